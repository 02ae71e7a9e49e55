"""Connectionist temporal classification loss.

All dynamic programming runs on natural-log probabilities in float64. The
gradient returned by :func:`ctc_loss` is taken with respect to the
pre-softmax logits, ``softmax(z) - occupancy``, so every row sums to zero.
"""
from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import InfeasibleTargetError, OracleTooLargeError
from .tagcodec import Vocabulary, star_map

NEG_INF = -np.inf
ORACLE_LIMIT = 10 ** 7


@dataclass
class CtcResult:
    loss: float
    grad: np.ndarray


def collapse(path: Sequence[int], blank: int = 0) -> List[int]:
    """Merge adjacent repeats, then delete blanks."""
    out = []
    prev = None
    for p in path:
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return out


def min_frames(labels: Sequence[int]) -> int:
    """Shortest input that can emit ``labels`` (a blank is needed between repeats)."""
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _extended(labels, blank):
    ext = np.full(2 * len(labels) + 1, blank, dtype=np.int64)
    ext[1::2] = labels
    # a skip from s-2 to s is allowed for labels that differ from the previous label
    skip = np.zeros(len(ext), dtype=bool)
    if len(labels) > 1:
        lab = np.asarray(labels)
        skip[3::2] = lab[1:] != lab[:-1]
    return ext, skip


def _shift(a, k):
    out = np.full_like(a, NEG_INF)
    out[k:] = a[:len(a) - k]
    return out


def _shift_back(a, k):
    out = np.full_like(a, NEG_INF)
    out[:len(a) - k] = a[k:]
    return out


def ctc_loss(logp: np.ndarray, labels: Sequence[int], blank: int = 0) -> CtcResult:
    logp = np.asarray(logp, dtype=np.float64)
    labels = [int(l) for l in labels]
    T = logp.shape[0]
    if T < max(min_frames(labels), 1):
        raise InfeasibleTargetError(T, max(min_frames(labels), 1))
    if np.isnan(logp).any() or np.isposinf(logp).any():
        return CtcResult(math.nan, np.full_like(logp, math.nan))
    ext, skip = _extended(labels, blank)
    S = len(ext)
    emit = logp[:, ext]  # T x S

    alpha = np.empty((T, S))
    a = np.full(S, NEG_INF)
    a[0] = emit[0, 0]
    if S > 1:
        a[1] = emit[0, 1]
    alpha[0] = a
    for t in range(1, T):
        prev = alpha[t - 1]
        a = np.logaddexp(prev, _shift(prev, 1))
        a[skip] = np.logaddexp(a[skip], _shift(prev, 2)[skip])
        alpha[t] = a + emit[t]

    # beta[t, s]: log mass of frames t+1..T-1 given state s at frame t
    beta = np.empty((T, S))
    b = np.full(S, NEG_INF)
    b[-1] = 0.0
    if S > 1:
        b[-2] = 0.0
    beta[T - 1] = b
    skip_from = np.zeros(S, dtype=bool)
    skip_from[:-2] = skip[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        b = np.logaddexp(nxt, _shift_back(nxt, 1))
        b[skip_from] = np.logaddexp(b[skip_from], _shift_back(nxt, 2)[skip_from])
        beta[t] = b

    log_p = np.logaddexp(alpha[T - 1, -1], alpha[T - 1, -2]) if S > 1 else alpha[T - 1, -1]
    if not np.isfinite(log_p):
        # the length check passed, so every path crosses a zero probability;
        # report an infinite loss rather than infeasibility
        return CtcResult(math.inf, np.full_like(logp, math.nan))

    occ = np.exp(alpha + beta - log_p)
    grad = np.exp(logp)
    np.add.at(grad.T, ext, -occ.T)
    return CtcResult(float(-log_p), grad)


def ctc_star_loss(logp: np.ndarray, labels: Sequence[int], vocab: Vocabulary) -> CtcResult:
    return ctc_loss(logp, star_map(labels, vocab), blank=vocab.blank)


@functools.lru_cache(maxsize=32)
def _paths_by_label(n_units: int, T: int, blank: int) -> Tuple[np.ndarray, Dict[tuple, np.ndarray]]:
    paths = np.array(list(itertools.product(range(n_units), repeat=T)), dtype=np.int64)
    groups: Dict[tuple, list] = {}
    for k, p in enumerate(paths.tolist()):
        groups.setdefault(tuple(collapse(p, blank)), []).append(k)
    return paths, {key: np.array(v) for key, v in groups.items()}


def brute_force_ctc(logp: np.ndarray, labels: Sequence[int], blank: int = 0) -> float:
    """-ln P(l|x) by enumerating every frame-level path; ``inf`` when no path collapses to l."""
    logp = np.asarray(logp, dtype=np.float64)
    T, V = logp.shape
    if V ** T > ORACLE_LIMIT:
        raise OracleTooLargeError(f"{V}^{T} paths exceed the oracle limit of {ORACLE_LIMIT}")
    paths, groups = _paths_by_label(V, T, blank)
    idx = groups.get(tuple(int(l) for l in labels))
    if idx is None:
        return float("inf")
    scores = logp[np.arange(T), paths[idx]].sum(axis=1)
    m = scores.max()
    return float(-(m + np.log(np.exp(scores - m).sum())))


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def grad_check(logp: np.ndarray, labels: Sequence[int], eps: float = 1e-5, blank: int = 0) -> float:
    """Max relative error between the analytic logit gradient and central differences.

    ``logp`` doubles as the logit matrix (log_softmax leaves a normalized
    matrix unchanged).
    """
    if not 0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    z = np.array(logp, dtype=np.float64)
    analytic = ctc_loss(log_softmax(z), labels, blank).grad
    worst = 0.0
    for t, k in np.ndindex(z.shape):
        if abs(analytic[t, k]) <= 1e-10:
            continue
        zp = z.copy()
        zp[t, k] += eps
        zm = z.copy()
        zm[t, k] -= eps
        num = (ctc_loss(log_softmax(zp), labels, blank).loss
               - ctc_loss(log_softmax(zm), labels, blank).loss) / (2 * eps)
        err = abs(num - analytic[t, k]) / max(abs(num), abs(analytic[t, k]))
        worst = max(worst, err)
    return worst
