"""Greedy and prefix beam-search decoding of CTC outputs.

Beam search fuses an n-gram LM at token boundaries (shallow fusion)::

    score = ln(p_blank + p_nonblank) + alpha * ln P_lm + beta * n_tokens

In word mode, tokens are separator-delimited words, and every tag symbol
and the star are single-symbol tokens. A word is scored when the next
boundary unit is emitted, or at the end of the utterance. Character mode
(an ablation) scores every emitted unit as its own token.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .ctc import collapse
from .errors import DecodeConfigError, ParseError
from .lm import BOS, EOS, NgramModel
from .tagcodec import SEPARATOR, STAR, Vocabulary

NEG_INF = float("-inf")
SPACE_TOKEN = "<sp>"


def greedy_decode(logp: np.ndarray, vocab: Vocabulary) -> str:
    """Per-frame argmax (lowest index wins ties), collapse, render."""
    best = np.argmax(np.asarray(logp), axis=1)
    return "".join(vocab.units[i] for i in collapse(best.tolist(), vocab.blank))


def _symbol_units(vocab: Vocabulary) -> List[str]:
    units = []
    if vocab.has_tags:
        units += list(vocab.inventory.opening_symbols) + [vocab.inventory.closing_symbol]
    if vocab.star:
        units.append(STAR)
    return units


def lm_tokens(text: str, vocab: Vocabulary, unit: str = "word") -> List[str]:
    """Split rendered text into LM tokens (see module docstring)."""
    if unit == "char":
        return [SPACE_TOKEN if c == SEPARATOR else c for c in text]
    symbols = set(_symbol_units(vocab))
    tokens, word = [], []
    for c in text:
        if c == SEPARATOR or c in symbols:
            if word:
                tokens.append("".join(word))
                word = []
            if c != SEPARATOR:
                tokens.append(c)
        else:
            word.append(c)
    if word:
        tokens.append("".join(word))
    return tokens


@dataclass
class BeamConfig:
    width: int = 8
    lm_weight: float = 0.0
    insertion_bonus: float = 0.0
    lm_unit: str = "word"

    def __post_init__(self):
        if self.width < 1:
            raise DecodeConfigError("beam width must be >= 1")
        if not (math.isfinite(self.lm_weight) and math.isfinite(self.insertion_bonus)):
            raise DecodeConfigError("lm_weight and insertion_bonus must be finite")
        if self.lm_weight < 0:
            raise DecodeConfigError("lm_weight must be >= 0")
        if self.lm_unit not in ("word", "char"):
            raise DecodeConfigError("lm_unit must be 'word' or 'char'")


@dataclass
class Hypothesis:
    prefix: Tuple[int, ...]
    log_pb: float = NEG_INF
    log_pnb: float = NEG_INF
    lm_context: Tuple[str, ...] = (BOS,)
    lm_score: float = 0.0
    n_tokens: int = 0
    word: str = ""

    @property
    def log_p(self) -> float:
        return float(np.logaddexp(self.log_pb, self.log_pnb))

    def score(self, cfg: BeamConfig) -> float:
        return self.log_p + cfg.lm_weight * self.lm_score + cfg.insertion_bonus * self.n_tokens


class _LmScorer:
    def __init__(self, lm: Optional[NgramModel], vocab: Vocabulary, cfg: BeamConfig):
        self.lm = lm
        self.cfg = cfg
        self.vocab = vocab
        self.symbols = set(_symbol_units(vocab))
        self.active = lm is not None
        self._cache: Dict[Tuple[Tuple[str, ...], str], float] = {}

    def logp(self, context, token):
        key = (context, token)
        v = self._cache.get(key)
        if v is None:
            v = self.lm.log_prob(context, token)
            self._cache[key] = v
        return v

    def _emit(self, hyp_ctx, score, n, token):
        if self.active:
            score += self.logp(hyp_ctx, token)
            hyp_ctx = (hyp_ctx + (token,))[-max(self.lm.order - 1, 1):]
        return hyp_ctx, score, n + 1

    def extend(self, parent: Hypothesis, unit: str):
        """LM state after appending ``unit`` to ``parent``'s prefix."""
        ctx, score, n, word = parent.lm_context, parent.lm_score, parent.n_tokens, parent.word
        if self.cfg.lm_unit == "char":
            tok = SPACE_TOKEN if unit == SEPARATOR else unit
            ctx, score, n = self._emit(ctx, score, n, tok)
            return ctx, score, n, ""
        if unit == SEPARATOR or unit in self.symbols:
            if word:
                ctx, score, n = self._emit(ctx, score, n, word)
                word = ""
            if unit != SEPARATOR:
                ctx, score, n = self._emit(ctx, score, n, unit)
            return ctx, score, n, word
        return ctx, score, n, word + unit

    def finish(self, hyp: Hypothesis):
        ctx, score, n = hyp.lm_context, hyp.lm_score, hyp.n_tokens
        if hyp.word:
            ctx, score, n = self._emit(ctx, score, n, hyp.word)
        if self.active:
            score += self.logp(ctx, EOS)
        return score, n


def check_lm_vocabulary(lm: NgramModel, vocab: Vocabulary, unit: str = "word"):
    """Every single-symbol token the vocabulary can emit must be known to the LM."""
    needed = set(_symbol_units(vocab))
    if unit == "char":
        needed |= {SPACE_TOKEN if g == SEPARATOR else g for g in vocab.graphemes}
    missing = sorted(t for t in needed if t not in lm.vocab)
    if missing:
        raise DecodeConfigError("LM vocabulary lacks tokens " + ", ".join("U+%04X" % ord(t[0]) if len(t) == 1
                                                                         else t for t in missing))
    private = {t for t in lm.vocab if len(t) == 1 and (0xE000 <= ord(t) <= 0xF8FF or t == STAR)}
    extra = private - needed
    if extra:
        raise DecodeConfigError("LM contains tag symbols the vocabulary cannot emit: "
                                + ", ".join("U+%04X" % ord(t) for t in sorted(extra)))


def _logsum(a, b):
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    m = max(a, b)
    return m + math.log1p(math.exp(-abs(a - b)))


def beam_decode(logp: np.ndarray, vocab: Vocabulary, lm: Optional[NgramModel] = None,
                cfg: Optional[BeamConfig] = None, trace: Optional[list] = None) -> Tuple[str, float]:
    """CTC prefix beam search. Returns (text, final combined score).

    Ties are broken lexicographically on the label-index prefix. When
    ``trace`` is a list, the total retained path mass (probability domain)
    after each frame is appended to it.
    """
    cfg = cfg or BeamConfig()
    if lm is not None:
        check_lm_vocabulary(lm, vocab, cfg.lm_unit)
    elif cfg.lm_weight:
        raise DecodeConfigError("lm_weight > 0 needs a language model")
    logp = np.asarray(logp, dtype=np.float64)
    T, V = logp.shape
    if V != len(vocab):
        raise DecodeConfigError(f"log-prob matrix has {V} columns but the vocabulary has {len(vocab)} units")
    scorer = _LmScorer(lm, vocab, cfg)
    blank = vocab.blank
    beam = {(): Hypothesis((), log_pb=0.0)}
    units = vocab.units
    for t in range(T):
        row = logp[t]
        nxt: Dict[Tuple[int, ...], Hypothesis] = {}

        def get(prefix, parent, unit):
            h = nxt.get(prefix)
            if h is None:
                if parent is None:
                    h = Hypothesis(prefix, lm_context=beam[prefix].lm_context, lm_score=beam[prefix].lm_score,
                                   n_tokens=beam[prefix].n_tokens, word=beam[prefix].word)
                else:
                    ctx, sc, n, word = scorer.extend(parent, unit)
                    h = Hypothesis(prefix, lm_context=ctx, lm_score=sc, n_tokens=n, word=word)
                nxt[prefix] = h
            return h

        for prefix, hyp in beam.items():
            total = _logsum(hyp.log_pb, hyp.log_pnb)
            # stay on the same prefix: blank, or a repeat of the last label
            h = get(prefix, None, None)
            h.log_pb = _logsum(h.log_pb, total + row[blank])
            if prefix:
                last = prefix[-1]
                h.log_pnb = _logsum(h.log_pnb, hyp.log_pnb + row[last])
            for k in range(V):
                if k == blank:
                    continue
                new = prefix + (k,)
                h = get(new, hyp, units[k])
                if prefix and k == prefix[-1]:
                    h.log_pnb = _logsum(h.log_pnb, hyp.log_pb + row[k])
                else:
                    h.log_pnb = _logsum(h.log_pnb, total + row[k])
        ranked = sorted(nxt.values(), key=lambda h: (-h.score(cfg), h.prefix))
        beam = {h.prefix: h for h in ranked[:cfg.width]}
        if trace is not None:
            trace.append(sum(math.exp(h.log_p) for h in beam.values()))

    best = None
    for h in beam.values():
        lm_score, n = scorer.finish(h)
        s = h.log_p + cfg.lm_weight * lm_score + cfg.insertion_bonus * n
        key = (-s, h.prefix)
        if best is None or key < best[0]:
            best = (key, h, s)
    _, h, s = best
    return "".join(units[i] for i in h.prefix), s


# -- hypothesis files ----------------------------------------------------------------

def write_hypotheses(records: Sequence[Tuple[str, str, float]], path):
    with open(path, "w", encoding="utf-8") as f:
        for uid, text, score in records:
            f.write(json.dumps({"id": uid, "text": text, "score": score}, sort_keys=True) + "\n")


def read_hypotheses(path) -> Dict[str, Tuple[str, float]]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out[rec["id"]] = (rec["text"], float(rec["score"]))
            except (ValueError, KeyError, TypeError) as e:
                raise ParseError(f"malformed hypothesis record: {e}", lineno, path) from None
    return out
