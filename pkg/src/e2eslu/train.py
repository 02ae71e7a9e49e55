"""CTC training: SGD with momentum, transfer chains and speaker-adaptive training.

Batches are built by sorting utterances by frame count and cutting
fixed-size groups; the group order is shuffled each epoch from the config
seed, so identical configs give identical checkpoints. Padded frames are
masked out of the loss. The checkpoint kept is the one with the lowest dev
character error rate; epoch 0 (before any update) is a candidate too.
"""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .ctc import ctc_loss, min_frames
from .decode import greedy_decode
from .errors import ConfigError, DataError, DivergenceError, InfeasibleTargetError
from .metrics import edit_distance
from .model import (
    Checkpoint,
    attach_speaker_input,
    backward_batch,
    check_transfer,
    forward_batch,
    replace_output_layer,
    save_checkpoint,
)
from .synthcorpus import Utterance
from .tagcodec import Vocabulary, bio_to_chunk, decode, encode, star_map

logger = logging.getLogger(__name__)

LOSS_MODES = ("plain", "star")
SPEAKER_MODES = ("none", "zero-pretrain", "adapted")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 0.01
    lr_decay: float = 0.95  # multiplied in after every epoch
    momentum: float = 0.9
    clip_norm: float = 5.0
    seed: int = 0
    loss_mode: str = "plain"
    speaker_mode: str = "none"
    bn_momentum: float = 0.1
    frozen: Tuple[str, ...] = ()
    dev_limit: Optional[int] = None  # evaluate on the first N dev utterances only
    sat_epochs: int = 0  # fine-tuning epochs of the adapted phase

    def __post_init__(self):
        self.frozen = tuple(self.frozen)
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}")
        if self.speaker_mode not in SPEAKER_MODES:
            raise ConfigError(f"speaker_mode must be one of {SPEAKER_MODES}")
        if self.epochs < 0 or self.sat_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0 or not self.clip_norm > 0:
            raise ConfigError("learning_rate and clip_norm must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")

    def to_dict(self):
        d = asdict(self)
        d["frozen"] = list(self.frozen)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class EpochRecord:
    stage: str
    epoch: int
    train_loss: Optional[float]
    dev_loss: float
    dev_cer: float
    wall_time: float
    skipped: int = 0

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


# -- targets ----------------------------------------------------------------------------

def target_text(utt: Utterance, vocab: Vocabulary) -> str:
    """Chunked transcript under ``vocab``'s tag inventory, or the plain
    transcript for a vocabulary without tags."""
    if vocab.has_tags:
        return bio_to_chunk(utt.bio, vocab.inventory)
    return utt.transcript


def build_target(utt: Utterance, vocab: Vocabulary, loss_mode: str = "plain") -> List[int]:
    ids = encode(target_text(utt, vocab), vocab)
    if loss_mode == "star":
        ids = star_map(ids, vocab)
    return ids


def check_config(cfg: TrainConfig, vocab: Vocabulary):
    if cfg.loss_mode == "star" and not vocab.star:
        raise ConfigError("star loss mode needs a vocabulary with the star unit")


# -- batching ---------------------------------------------------------------------------

def make_batches(lengths: Sequence[int], batch_size: int) -> List[np.ndarray]:
    order = np.argsort(np.asarray(lengths), kind="stable")
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def speaker_inputs(ckpt: Checkpoint, utts: Sequence[Utterance], mode: str):
    dim = ckpt.config.speaker_vector_dim
    if not dim:
        return None
    if mode == "adapted":
        out = []
        for u in utts:
            if u.speaker_vector is None:
                raise DataError(f"utterance {u.id} has no speaker vector")
            out.append(u.speaker_vector)
        return out
    return [np.zeros(dim, dtype=ckpt.dtype) for _ in utts]


def batch_logprobs(ckpt: Checkpoint, utts: Sequence[Utterance], speaker_mode: str = "adapted",
                   batch_size: int = 32) -> List[np.ndarray]:
    """Eval-mode log-probability matrices, trimmed to each output length."""
    out: List[Optional[np.ndarray]] = [None] * len(utts)
    for idx in make_batches([u.n_frames for u in utts], batch_size):
        sub = [utts[i] for i in idx]
        logp, lens, _ = forward_batch(ckpt, [u.features for u in sub],
                                      speaker_inputs(ckpt, sub, speaker_mode), train=False)
        for k, i in enumerate(idx):
            out[i] = logp[k, :lens[k]]
    return out


# -- optimization ----------------------------------------------------------------------

def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float]:
    """Scale ``grads`` so their global norm is at most ``max_norm``; returns
    (clipped grads, norm before clipping)."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = {k: g * np.asarray(scale, dtype=g.dtype) for k, g in grads.items()}
    return grads, norm


class Sgd:
    def __init__(self, params: Dict[str, np.ndarray], momentum: float):
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads, lr, frozen=()):
        for name, g in grads.items():
            if any(name.startswith(f + ".") for f in frozen):
                continue
            v = self.velocity[name]
            v *= self.momentum
            v -= np.asarray(lr, dtype=v.dtype) * g
            params[name] += v


def _update_running_stats(ckpt: Checkpoint, stats, momentum: float):
    for prefix, (mean, var) in stats.items():
        for key, val in (("bn_mean", mean), ("bn_var", var)):
            buf = ckpt.buffers[prefix + key]
            buf *= 1 - momentum
            buf += momentum * np.asarray(val, dtype=buf.dtype)


# -- evaluation ------------------------------------------------------------------------

def evaluate_dev(ckpt: Checkpoint, utts: Sequence[Utterance], loss_mode: str = "plain",
                 speaker_mode: str = "adapted", batch_size: int = 32) -> Tuple[float, float]:
    """(mean CTC loss, character error rate of greedy output against the
    training target string). Infeasible utterances count as total misses
    for the error rate and are left out of the loss."""
    vocab = ckpt.vocabulary
    if not utts:
        return float("nan"), float("nan")
    logps = batch_logprobs(ckpt, utts, speaker_mode, batch_size)
    losses, errors, n_chars = [], 0, 0
    for u, lp in zip(utts, logps):
        target = build_target(u, vocab, loss_mode)
        ref = decode(target, vocab)
        hyp = greedy_decode(lp, vocab)
        errors += edit_distance(ref, hyp)
        n_chars += len(ref)
        try:
            losses.append(ctc_loss(lp, target, vocab.blank).loss)
        except InfeasibleTargetError:
            pass
    loss = float(np.mean(losses)) if losses else float("nan")
    return loss, errors / max(n_chars, 1)


# -- training -----------------------------------------------------------------------------

def train_stage(ckpt: Checkpoint, train: Sequence[Utterance], dev: Sequence[Utterance],
                cfg: TrainConfig, stage: str = "train", log_path=None):
    """Train a copy of ``ckpt``. Returns (best checkpoint, list of EpochRecord)."""
    vocab = ckpt.vocabulary
    check_config(cfg, vocab)
    work = ckpt.copy()
    dev = list(dev)[:cfg.dev_limit] if cfg.dev_limit else list(dev)
    spk_mode = cfg.speaker_mode

    targets, keep = [], []
    out_lens = work.config.out_lengths([u.n_frames for u in train])
    skipped = 0
    for u, n_out in zip(train, out_lens):
        t = build_target(u, vocab, cfg.loss_mode)
        if min_frames(t) > n_out:
            skipped += 1
            continue
        keep.append(u)
        targets.append(t)
    if skipped:
        logger.warning("%s: skipped %d infeasible training utterances", stage, skipped)
    if train and not keep:
        raise DataError(f"{stage}: no training utterance is feasible after time reduction")

    history: List[EpochRecord] = []
    log = open(log_path, "a", encoding="utf-8") if log_path else None

    def record(epoch, train_loss, t0):
        dev_loss, dev_cer = evaluate_dev(work, dev, cfg.loss_mode, spk_mode)
        rec = EpochRecord(stage, epoch, train_loss, dev_loss, dev_cer, time.time() - t0, skipped)
        history.append(rec)
        logger.info("%s epoch %d train_loss=%s dev_loss=%.4f dev_cer=%.4f", stage, epoch,
                    "-" if train_loss is None else "%.4f" % train_loss, dev_loss, dev_cer)
        if log:
            log.write(rec.to_json() + "\n")
            log.flush()
        return rec

    try:
        t0 = time.time()
        rec = record(0, None, t0)
        best, best_cer = work.copy(), rec.dev_cer
        if cfg.epochs == 0:
            return ckpt.copy(), history
        rng = np.random.default_rng(cfg.seed)
        opt = Sgd(work.params, cfg.momentum)
        batches = make_batches([u.n_frames for u in keep], cfg.batch_size)
        lr = cfg.learning_rate
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.time()
            total, count = 0.0, 0
            for bi in rng.permutation(len(batches)):
                idx = batches[bi]
                loss, n = _train_batch(work, [keep[i] for i in idx], [targets[i] for i in idx],
                                       opt, lr, cfg, spk_mode)
                if not math.isfinite(loss):
                    raise DivergenceError(epoch)
                total += loss
                count += n
            rec = record(epoch, total / max(count, 1), t0)
            if rec.dev_cer < best_cer or (math.isnan(best_cer) and not math.isnan(rec.dev_cer)):
                best, best_cer = work.copy(), rec.dev_cer
            lr *= cfg.lr_decay
    finally:
        if log:
            log.close()
    best.meta = dict(best.meta)
    best.meta["stage"] = stage
    best.meta["epoch"] = min((r for r in history if r.dev_cer == best_cer), key=lambda r: r.epoch).epoch \
        if not math.isnan(best_cer) else history[-1].epoch
    # wall times stay in the log only, so checkpoints of identical runs are identical
    best.meta.setdefault("history", {})[stage] = [
        {k: v for k, v in asdict(r).items() if k != "wall_time"} for r in history]
    return best, history


def _train_batch(ckpt, utts, targets, opt, lr, cfg, spk_mode):
    logp, lens, cache = forward_batch(ckpt, [u.features for u in utts],
                                      speaker_inputs(ckpt, utts, spk_mode), train=True)
    grad = np.zeros_like(logp)
    total, n = 0.0, 0
    for b, t in enumerate(targets):
        res = ctc_loss(logp[b, :lens[b]], t, ckpt.vocabulary.blank)
        total += res.loss
        grad[b, :lens[b]] = res.grad
        n += 1
    if not math.isfinite(total):
        return total, n
    grad /= n
    grads = backward_batch(ckpt, cache, grad, cfg.frozen)
    grads, _ = clip_gradients(grads, cfg.clip_norm)
    opt.step(ckpt.params, grads, lr, cfg.frozen)
    if ckpt.config.batch_norm:
        _update_running_stats(ckpt, cache["bn_stats"], cfg.bn_momentum)
    return total, n


# -- speaker-adaptive training -------------------------------------------------------

def sat_protocol(ckpt: Checkpoint, train: Sequence[Utterance], dev: Sequence[Utterance],
                 cfg: TrainConfig, speaker_dim: int, stage: str = "sat", log_path=None):
    """Zero-vector pretraining, then widen the speaker input and fine-tune
    with the real vectors. Returns (phase-2 checkpoint, phase-1 checkpoint,
    history of both phases)."""
    if speaker_dim:
        for u in list(train) + list(dev):
            if u.speaker_vector is None:
                raise DataError(f"utterance {u.id} has no speaker vector")
            if len(u.speaker_vector) != speaker_dim:
                raise DataError(f"utterance {u.id} has a speaker vector of dim {len(u.speaker_vector)}, "
                                f"expected {speaker_dim}")
    phase1, hist1 = train_stage(ckpt, train, dev, replace(cfg, speaker_mode="zero-pretrain"),
                                stage + "/zero", log_path)
    if not speaker_dim:
        return phase1, phase1, hist1
    widened = attach_speaker_input(phase1, speaker_dim)
    ft_cfg = replace(cfg, speaker_mode="adapted", epochs=cfg.sat_epochs or cfg.epochs)
    phase2, hist2 = train_stage(widened, train, dev, ft_cfg, stage + "/adapted", log_path)
    return phase2, phase1, hist1 + hist2


# -- transfer chains ---------------------------------------------------------------

@dataclass
class StageSpec:
    name: str
    train: Sequence[Utterance]
    dev: Sequence[Utterance]
    vocabulary: Vocabulary
    config: TrainConfig
    speaker_dim: int = 0  # > 0 runs the speaker-adaptive protocol for this stage


@dataclass
class ChainSpec:
    stages: List[StageSpec]
    out_dir: Optional[str] = None
    seed: int = 0


def run_chain(spec: ChainSpec, initial: Checkpoint) -> List[Tuple[Checkpoint, List[EpochRecord]]]:
    """Train each stage in turn. Stage i+1 starts from stage i's best
    checkpoint with its output layer replaced for stage i+1's vocabulary;
    the first stage starts from ``initial``. Returns (checkpoint, history)
    per stage and saves each checkpoint when ``out_dir`` is set."""
    if not spec.stages:
        raise ConfigError("a chain needs at least one stage")
    for a, b in zip(spec.stages, spec.stages[1:]):
        check_transfer(a.vocabulary, b.vocabulary)
    if initial.vocabulary != spec.stages[0].vocabulary:
        check_transfer(initial.vocabulary, spec.stages[0].vocabulary)
    results = []
    ckpt = initial
    if spec.out_dir:
        os.makedirs(spec.out_dir, exist_ok=True)
    for i, st in enumerate(spec.stages):
        if i > 0 or ckpt.vocabulary != st.vocabulary:
            ckpt = replace_output_layer(ckpt, st.vocabulary, spec.seed + 1000 * (i + 1), step=st.name)
        log_path = os.path.join(spec.out_dir, "train_log.jsonl") if spec.out_dir else None
        if st.speaker_dim:
            ckpt, _, hist = sat_protocol(ckpt, st.train, st.dev, st.config, st.speaker_dim, st.name, log_path)
        else:
            ckpt, hist = train_stage(ckpt, st.train, st.dev, st.config, st.name, log_path)
        ckpt.meta["chain_position"] = i
        ckpt.meta["chain_stages"] = [s.name for s in spec.stages[:i + 1]]
        if spec.out_dir:
            save_checkpoint(ckpt, os.path.join(spec.out_dir, f"{i:02d}-{_slug(st.name)}.ckpt"))
        results.append((ckpt, hist))
    return results


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in name)
