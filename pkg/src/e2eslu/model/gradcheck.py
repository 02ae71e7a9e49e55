"""Finite-difference verification of :func:`backward_batch`."""
import numpy as np

from .network import backward_batch, forward_batch

# entries whose analytic and numeric magnitudes are both below this are skipped
MAGNITUDE_FLOOR = 1e-10


def _central(f, x, idx, eps, order):
    old = x[idx]
    if order == 2:
        steps, weights, denom = (1, -1), (1, -1), 2
    else:
        steps, weights, denom = (2, 1, -1, -2), (-1, 8, -8, 1), 12
    acc = 0.0
    for s, w in zip(steps, weights):
        x[idx] = old + s * eps
        acc += w * f()
    x[idx] = old
    return acc / (denom * eps)


def _numeric(f, x, idx, steps, order):
    """Central difference at the step whose estimate best agrees with the next
    smaller step; chosen without reference to the analytic value."""
    est = [_central(f, x, idx, e, order) for e in steps]
    if len(est) == 1:
        return est[0]
    gaps = [abs(a - b) for a, b in zip(est, est[1:])]
    k = int(np.argmin(gaps))
    return est[k + 1]


def network_gradient_errors(ckpt, frames, speaker_vectors=None, upstream=None,
                            steps=(1e-2, 1e-3, 1e-4), order=4, seed=0, frozen=()):
    """Max relative error per parameter tensor, analytic vs central differences.

    The scalar checked is ``sum(upstream * logp)`` over valid frames, with a
    random ``upstream`` by default. Runs in training mode (batch statistics).
    """
    logp, lens, cache = forward_batch(ckpt, frames, speaker_vectors, train=True)
    valid = (np.arange(logp.shape[1])[None, :] < lens[:, None])[:, :, None]
    if upstream is None:
        upstream = np.random.default_rng(seed).normal(size=logp.shape)
    upstream = upstream * valid
    grads = backward_batch(ckpt, cache, upstream, frozen)

    def scalar():
        lp, _, _ = forward_batch(ckpt, frames, speaker_vectors, train=True)
        return float((lp * upstream).sum())

    errors = {}
    for name, p in ckpt.params.items():
        worst = 0.0
        for idx in np.ndindex(p.shape):
            num = _numeric(scalar, p, idx, steps, order)
            ana = float(grads[name][idx])
            scale = max(abs(num), abs(ana))
            if scale <= MAGNITUDE_FLOOR:
                continue
            worst = max(worst, abs(num - ana) / scale)
        errors[name] = worst
    return errors
