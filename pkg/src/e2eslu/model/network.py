"""Convolutional front-end, bidirectional LSTM stack and softmax output.

Parameters live in a flat ``{name: array}`` dict inside a :class:`Checkpoint`.
The computation dtype is the dtype of the parameters (float32 for training,
float64 for gradient checks); log-probabilities are always returned as
float64, which is the boundary with the CTC module.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ConfigError, ShapeError, StateError, TransferMismatchError
from ..tagcodec import Vocabulary
from . import layers as L


@dataclass(frozen=True)
class ConvSpec:
    kernel: Tuple[int, int]
    stride: Tuple[int, int]
    padding: Tuple[int, int]
    channels: int

    def __post_init__(self):
        for name in ("kernel", "stride", "padding"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int
    output_units: int
    conv_layers: Tuple[ConvSpec, ...] = ()
    recurrent_layers: int = 5
    hidden: int = 800
    bidirectional: bool = True
    batch_norm: bool = True
    speaker_vector_dim: int = 0

    def __post_init__(self):
        convs = tuple(c if isinstance(c, ConvSpec) else ConvSpec(**c) for c in self.conv_layers)
        object.__setattr__(self, "conv_layers", convs)
        if self.output_units < 2:
            raise ConfigError("output_units must be >= 2 (blank plus one label)")
        if self.recurrent_layers < 1 or self.hidden < 1:
            raise ConfigError("need at least one recurrent layer of positive width")
        if self.speaker_vector_dim < 0:
            raise ConfigError("speaker_vector_dim must be >= 0")

    @classmethod
    def full_size(cls, input_dim, output_units, speaker_vector_dim=0):
        conv = ConvSpec((41, 11), (2, 2), (20, 5), 32)
        return cls(input_dim, output_units, (conv, conv), 5, 800, True, True, speaker_vector_dim)

    def replace(self, **changes) -> "NetworkConfig":
        d = self.to_dict()
        d.update(changes)
        return NetworkConfig.from_dict(d)

    def to_dict(self):
        d = asdict(self)
        d["conv_layers"] = [
            {k: list(v) if isinstance(v, tuple) else v for k, v in c.items()} for c in d["conv_layers"]
        ]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["conv_layers"] = tuple(ConvSpec(**c) for c in d.get("conv_layers", ()))
        return cls(**d)

    def out_lengths(self, lengths):
        """Frame counts after the convolutional time reduction."""
        out = np.asarray(lengths, dtype=np.int64)
        for c in self.conv_layers:
            out = L.conv_out_len(out, c.kernel[0], c.stride[0], c.padding[0])
        return out

    def conv_feature_dims(self):
        f = self.input_dim
        ch = 1
        for c in self.conv_layers:
            f = L.conv_out_len(f, c.kernel[1], c.stride[1], c.padding[1])
            ch = c.channels
        if self.conv_layers and f < 1:
            raise ConfigError("convolution stack reduces the feature axis to nothing")
        return ch * f if self.conv_layers else self.input_dim

    @property
    def directions(self):
        return ("fw", "bw") if self.bidirectional else ("fw",)


@dataclass
class Checkpoint:
    config: NetworkConfig
    vocabulary: Vocabulary
    params: Dict[str, np.ndarray]
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.vocabulary) != self.config.output_units:
            raise ConfigError(f"vocabulary has {len(self.vocabulary)} units but the network "
                              f"outputs {self.config.output_units}")
        expected = param_shapes(self.config)
        for name, shape in expected.items():
            if name not in self.params:
                raise ShapeError(f"missing parameter {name}")
            if self.params[name].shape != shape:
                raise ShapeError(f"parameter {name} has shape {self.params[name].shape}, expected {shape}")
        extra = set(self.params) - set(expected)
        if extra:
            raise ShapeError(f"unexpected parameters {sorted(extra)}")

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.config, self.vocabulary,
                          {k: v.copy() for k, v in self.params.items()},
                          {k: v.copy() for k, v in self.buffers.items()},
                          copy.deepcopy(self.meta))

    def astype(self, dtype) -> "Checkpoint":
        ck = self.copy()
        ck.params = {k: v.astype(dtype) for k, v in ck.params.items()}
        ck.buffers = {k: v.astype(dtype) for k, v in ck.buffers.items()}
        return ck

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype


@dataclass
class FeatureSequence:
    frames: np.ndarray
    speaker_vector: Optional[np.ndarray] = None


def param_shapes(cfg: NetworkConfig) -> Dict[str, tuple]:
    shapes = {}
    ch = 1
    for k, c in enumerate(cfg.conv_layers):
        shapes[f"conv{k}.W"] = (c.channels, ch, c.kernel[0], c.kernel[1])
        shapes[f"conv{k}.b"] = (c.channels,)
        ch = c.channels
    H = cfg.hidden
    in_dim = cfg.conv_feature_dims()
    for layer in range(cfg.recurrent_layers):
        for d in cfg.directions:
            p = f"rnn{layer}.{d}."
            shapes[p + "W_ih"] = (in_dim, 4 * H)
            if layer == 0 and cfg.speaker_vector_dim:
                shapes[p + "W_spk"] = (cfg.speaker_vector_dim, 4 * H)
            shapes[p + "W_hh"] = (H, 4 * H)
            if cfg.batch_norm:
                shapes[p + "bn_gamma"] = (4 * H,)
                shapes[p + "bn_beta"] = (4 * H,)
            else:
                shapes[p + "b"] = (4 * H,)
        in_dim = H * len(cfg.directions)
    shapes["out.W"] = (in_dim, cfg.output_units)
    shapes["out.b"] = (cfg.output_units,)
    return shapes


def _init_param(name, shape, rng, hidden):
    leaf = name.rsplit(".", 1)[1]
    if leaf == "bn_gamma":
        return np.ones(shape)
    if leaf == "bn_beta":
        return np.zeros(shape)
    if leaf == "b" and name.startswith("rnn"):
        b = np.zeros(shape)
        b[hidden:2 * hidden] = 1.0  # forget gate
        return b
    if leaf == "b":
        return np.zeros(shape)
    if leaf == "W" and name.startswith("conv"):
        fan_in = shape[1] * shape[2] * shape[3]
    elif leaf == "W_hh":
        fan_in = hidden
    else:
        fan_in = shape[0]
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_checkpoint(cfg: NetworkConfig, vocab: Vocabulary, seed: int, dtype=np.float32) -> Checkpoint:
    if len(vocab) != cfg.output_units:
        cfg = cfg.replace(output_units=len(vocab))
    rng = np.random.default_rng(seed)
    params = {n: _init_param(n, s, rng, cfg.hidden).astype(dtype) for n, s in param_shapes(cfg).items()}
    buffers = {}
    if cfg.batch_norm:
        for layer in range(cfg.recurrent_layers):
            for d in cfg.directions:
                p = f"rnn{layer}.{d}."
                buffers[p + "bn_mean"] = np.zeros(4 * cfg.hidden, dtype=dtype)
                buffers[p + "bn_var"] = np.ones(4 * cfg.hidden, dtype=dtype)
    return Checkpoint(cfg, vocab, params, buffers, {"seed": seed, "chain": []})


# -- batched forward / backward -------------------------------------------------

def pad_batch(frames: Sequence[np.ndarray], dtype) -> Tuple[np.ndarray, np.ndarray]:
    lengths = np.array([f.shape[0] for f in frames], dtype=np.int64)
    D = frames[0].shape[1]
    x = np.zeros((len(frames), int(lengths.max()), D), dtype=dtype)
    for b, f in enumerate(frames):
        x[b, :len(f)] = f
    return x, lengths


def _mask(lengths, T, dtype):
    return (np.arange(T)[None, :] < np.asarray(lengths)[:, None]).astype(dtype)


def forward_batch(ckpt: Checkpoint, frames: Sequence[np.ndarray],
                  speaker_vectors: Optional[Sequence[np.ndarray]] = None, train: bool = False):
    """Returns (logp (B, T', V) float64, output lengths, cache)."""
    cfg = ckpt.config
    P = ckpt.params
    dt = ckpt.dtype
    for f in frames:
        if f.ndim != 2 or f.shape[1] != cfg.input_dim or f.shape[0] < 1:
            raise ShapeError(f"features of shape {f.shape} do not match input_dim {cfg.input_dim}")
    spk = None
    if cfg.speaker_vector_dim:
        if speaker_vectors is None or any(s is None for s in speaker_vectors):
            raise ShapeError("this model needs a speaker vector for every utterance")
        spk = np.stack([np.asarray(s, dtype=dt) for s in speaker_vectors])
        if spk.shape[1] != cfg.speaker_vector_dim:
            raise ShapeError(f"speaker vectors have dim {spk.shape[1]}, expected {cfg.speaker_vector_dim}")
    elif speaker_vectors is not None and any(s is not None for s in speaker_vectors):
        raise ShapeError("speaker vector given to a speaker-independent model")

    x, lengths = pad_batch(frames, dt)
    cache = {"lengths": lengths, "spk": spk, "train": train}

    # convolutional front-end
    h = x[:, None, :, :]
    lens = lengths
    conv_caches = []
    for k, c in enumerate(cfg.conv_layers):
        z, cc = L.conv2d_forward(h, P[f"conv{k}.W"], P[f"conv{k}.b"], c.stride, c.padding)
        lens = L.conv_out_len(lens, c.kernel[0], c.stride[0], c.padding[0])
        if lens.min() < 1:
            raise ShapeError("utterance too short for the convolution stack")
        m = _mask(lens, z.shape[2], dt)[:, None, :, None]
        h = L.clipped_relu(z) * m
        conv_caches.append((z, cc, m))
    if cfg.conv_layers:
        B, C, T, F = h.shape
        h = h.transpose(0, 2, 1, 3).reshape(B, T, C * F)
    else:
        h = x
    cache["conv"] = conv_caches
    T = h.shape[1]
    mask = _mask(lens, T, dt)
    rev = L.reverse_index(lens, T)
    cache.update(out_lengths=lens, mask=mask, rev=rev)

    rnn_caches = []
    bn_stats = {}
    for layer in range(cfg.recurrent_layers):
        outs = []
        dcaches = {}
        for d in cfg.directions:
            p = f"rnn{layer}.{d}."
            pre = h @ P[p + "W_ih"]
            if layer == 0 and spk is not None:
                pre = pre + (spk @ P[p + "W_spk"])[:, None, :]
            if cfg.batch_norm:
                running = None if train else (ckpt.buffers[p + "bn_mean"], ckpt.buffers[p + "bn_var"])
                pre_n, bnc, stats = L.batchnorm_forward(pre, P[p + "bn_gamma"], P[p + "bn_beta"], mask, running)
                if stats is not None:
                    bn_stats[p] = stats
            else:
                pre_n, bnc = pre + P[p + "b"], None
            if d == "bw":
                pre_n = L.reverse_time(pre_n, rev)
            hs, lc = L.lstm_forward(pre_n, P[p + "W_hh"])
            if d == "bw":
                hs = L.reverse_time(hs, rev)
            outs.append(hs * mask[:, :, None])
            dcaches[d] = (bnc, lc)
        rnn_caches.append((h, dcaches))
        h = np.concatenate(outs, axis=-1) if len(outs) > 1 else outs[0]
    cache["rnn"] = rnn_caches
    cache["bn_stats"] = bn_stats

    logits = h @ P["out.W"] + P["out.b"]
    cache["top"] = h
    logp = L.log_softmax(logits.astype(np.float64))
    cache["logp"] = logp
    return logp, lens, cache


def backward_batch(ckpt: Checkpoint, cache, grad_logp: np.ndarray, frozen: Sequence[str] = ()):
    """Parameter gradients given d(loss)/d(log-probs) of shape (B, T', V).

    Gradients at padded frames are ignored. ``frozen`` lists layer prefixes
    (``conv0``, ``rnn1``, ``out``...) whose gradients are reported as zero.
    """
    cfg = ckpt.config
    P = ckpt.params
    dt = ckpt.dtype
    logp = cache["logp"]
    if grad_logp.shape != logp.shape:
        raise ShapeError(f"gradient shape {grad_logp.shape} does not match output {logp.shape}")
    mask = cache["mask"]
    rev = cache["rev"]
    dz = L.log_softmax_backward(np.asarray(grad_logp, dtype=np.float64), logp) * mask[:, :, None]
    dz = dz.astype(dt)
    grads = {}
    top = cache["top"]
    grads["out.W"] = np.tensordot(top, dz, axes=([0, 1], [0, 1]))
    grads["out.b"] = dz.sum(axis=(0, 1))
    dh = dz @ P["out.W"].T

    H = cfg.hidden
    for layer in range(cfg.recurrent_layers - 1, -1, -1):
        h_in, dcaches = cache["rnn"][layer]
        dh_in = np.zeros_like(h_in)
        for k, d in enumerate(cfg.directions):
            p = f"rnn{layer}.{d}."
            bnc, lc = dcaches[d]
            dhs = dh[:, :, k * H:(k + 1) * H] * mask[:, :, None]
            if d == "bw":
                dhs = L.reverse_time(dhs, rev)
            dpre_n, grads[p + "W_hh"] = L.lstm_backward(dhs, P[p + "W_hh"], lc)
            if d == "bw":
                dpre_n = L.reverse_time(dpre_n, rev)
            dpre_n = dpre_n * mask[:, :, None]
            if cfg.batch_norm:
                dpre, grads[p + "bn_gamma"], grads[p + "bn_beta"] = L.batchnorm_backward(
                    dpre_n, P[p + "bn_gamma"], bnc)
            else:
                dpre = dpre_n
                grads[p + "b"] = dpre.sum(axis=(0, 1))
            grads[p + "W_ih"] = np.tensordot(h_in, dpre, axes=([0, 1], [0, 1]))
            if layer == 0 and cfg.speaker_vector_dim:
                grads[p + "W_spk"] = cache["spk"].T @ dpre.sum(axis=1)
            dh_in += dpre @ P[p + "W_ih"].T
        dh = dh_in

    if cfg.conv_layers:
        last = cache["conv"][-1][0]
        B, C, T, F = last.shape
        dh = dh.reshape(B, T, C, F).transpose(0, 2, 1, 3)
        for k in range(len(cfg.conv_layers) - 1, -1, -1):
            c = cfg.conv_layers[k]
            z, cc, m = cache["conv"][k]
            dz_c = L.clipped_relu_backward(dh * m, z)
            dh, grads[f"conv{k}.W"], grads[f"conv{k}.b"] = L.conv2d_backward(
                dz_c, P[f"conv{k}.W"], c.stride, c.padding, cc)

    for name in grads:
        if any(name == f or name.startswith(f + ".") for f in frozen):
            grads[name] = np.zeros_like(grads[name])
        grads[name] = grads[name].astype(dt, copy=False)
    return grads


# -- single-utterance interface ---------------------------------------------------------

def _check_feature(ckpt, f):
    cfg = ckpt.config
    frames = np.asarray(f.frames)
    if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] != cfg.input_dim:
        raise ShapeError(f"features of shape {frames.shape} do not match input_dim {cfg.input_dim}")
    if not np.all(np.isfinite(frames)):
        raise ShapeError("features contain non-finite values")
    if cfg.speaker_vector_dim and f.speaker_vector is None:
        raise ShapeError("model expects a speaker vector")
    if not cfg.speaker_vector_dim and f.speaker_vector is not None:
        raise ShapeError("speaker vector given to a speaker-independent model")
    return frames


def forward(ckpt: Checkpoint, f: FeatureSequence, train: bool = False) -> np.ndarray:
    """Log-probability matrix (T' x output_units) for one utterance."""
    frames = _check_feature(ckpt, f)
    spk = None if f.speaker_vector is None else [f.speaker_vector]
    logp, _, _ = forward_batch(ckpt, [frames], spk, train=train)
    return logp[0]


def backward(ckpt: Checkpoint, f: FeatureSequence, grad_logprobs: np.ndarray,
             train: bool = True, frozen: Sequence[str] = ()) -> Dict[str, np.ndarray]:
    frames = _check_feature(ckpt, f)
    spk = None if f.speaker_vector is None else [f.speaker_vector]
    logp, _, cache = forward_batch(ckpt, [frames], spk, train=train)
    g = np.asarray(grad_logprobs)
    if g.shape != logp.shape[1:]:
        raise ShapeError(f"gradient shape {g.shape} does not match output {logp.shape[1:]}")
    return backward_batch(ckpt, cache, g[None], frozen)


# -- checkpoint surgery ---------------------------------------------------------------

def hidden_parameter_names(cfg: NetworkConfig) -> List[str]:
    return [n for n in param_shapes(cfg) if not n.startswith("out.")]


def check_transfer(src: Vocabulary, dst: Vocabulary):
    if src.graphemes != dst.graphemes:
        raise TransferMismatchError("target vocabulary does not start with the source grapheme block")


def replace_output_layer(ckpt: Checkpoint, new_vocab: Vocabulary, seed: int, step: str = "") -> Checkpoint:
    check_transfer(ckpt.vocabulary, new_vocab)
    cfg = ckpt.config.replace(output_units=len(new_vocab))
    rng = np.random.default_rng(seed)
    dt = ckpt.dtype
    params = {n: ckpt.params[n].copy() for n in hidden_parameter_names(cfg)}
    shapes = param_shapes(cfg)
    for n in ("out.W", "out.b"):
        params[n] = _init_param(n, shapes[n], rng, cfg.hidden).astype(dt)
    meta = copy.deepcopy(ckpt.meta)
    meta.setdefault("chain", []).append({
        "step": step or "replace_output_layer",
        "from_units": len(ckpt.vocabulary),
        "to_units": len(new_vocab),
        "seed": seed,
    })
    return Checkpoint(cfg, new_vocab, params, {k: v.copy() for k, v in ckpt.buffers.items()}, meta)


def attach_speaker_input(ckpt: Checkpoint, dim: int) -> Checkpoint:
    """Widen the first recurrent layer with ``dim`` zero-initialized speaker columns."""
    if ckpt.config.speaker_vector_dim:
        raise StateError("model already has a speaker input")
    if dim == 0:
        return ckpt.copy()
    cfg = ckpt.config.replace(speaker_vector_dim=dim)
    params = {}
    for n in param_shapes(cfg):
        if n.endswith("W_spk"):
            params[n] = np.zeros((dim, 4 * cfg.hidden), dtype=ckpt.dtype)
        else:
            params[n] = ckpt.params[n].copy()
    meta = copy.deepcopy(ckpt.meta)
    meta.setdefault("chain", []).append({"step": "attach_speaker_input", "dim": dim})
    return Checkpoint(cfg, ckpt.vocabulary, params, {k: v.copy() for k, v in ckpt.buffers.items()}, meta)
