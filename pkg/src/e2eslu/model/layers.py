"""Layer primitives with explicit backward passes.

Shapes follow (batch, time, features) for sequences and
(batch, channels, time, freq) for the convolutional front-end. ``mask`` is a
(batch, time) array of 0/1 marking valid frames; padded frames never
influence valid outputs.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CLIP = 20.0
BN_EPS = 1e-5


def conv_out_len(n, kernel, stride, pad):
    return (n + 2 * pad - kernel) // stride + 1


def sigmoid(x):
    return 0.5 * np.tanh(0.5 * x) + 0.5


# -- convolution + clipped ReLU ------------------------------------------------

def conv2d_forward(x, W, b, stride, pad):
    st, sf = stride
    pt, pf = pad
    kt, kf = W.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pt), (pf, pf)))
    win = sliding_window_view(xp, (kt, kf), axis=(2, 3))[:, :, ::st, ::sf]
    y = np.tensordot(win, W, axes=([1, 4, 5], [1, 2, 3]))  # B, T', F', O
    y = y.transpose(0, 3, 1, 2) + b[None, :, None, None]
    return y, (x.shape, xp.shape, win)


def conv2d_backward(dy, W, stride, pad, cache):
    x_shape, xp_shape, win = cache
    st, sf = stride
    pt, pf = pad
    kt, kf = W.shape[2:]
    Tq, Fq = dy.shape[2:]
    dW = np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3]))
    db = dy.sum(axis=(0, 2, 3))
    dxp = np.zeros(xp_shape, dtype=dy.dtype)
    for i in range(kt):
        for j in range(kf):
            contrib = np.tensordot(dy, W[:, :, i, j], axes=([1], [0]))  # B, T', F', C
            dxp[:, :, i:i + st * Tq:st, j:j + sf * Fq:sf] += contrib.transpose(0, 3, 1, 2)
    dx = dxp[:, :, pt:pt + x_shape[2], pf:pf + x_shape[3]]
    return dx, dW, db


def clipped_relu(x):
    return np.clip(x, 0.0, CLIP)


def clipped_relu_backward(dy, x):
    return dy * ((x > 0) & (x < CLIP))


# -- sequence-wise batch normalization -------------------------------------------

def batchnorm_forward(x, gamma, beta, mask, running=None):
    """Normalize x (B, T, C) with statistics over all valid (batch x time) frames.

    With ``running=(mean, var)`` the stored statistics are used instead
    (inference). Returns output, cache and the batch (mean, var).
    """
    m = mask[:, :, None]
    if running is not None:
        mean, var = running
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mean) * inv
        return (gamma * xhat + beta) * m, None, None
    n = m.sum()
    mean = (x * m).sum(axis=(0, 1)) / n
    xc = (x - mean) * m
    var = (xc * xc).sum(axis=(0, 1)) / n
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = xc * inv
    y = (gamma * xhat + beta) * m
    return y, (xhat, inv, m, n), (mean, var)


def batchnorm_backward(dy, gamma, cache):
    xhat, inv, m, n = cache
    dy = dy * m
    dgamma = (dy * xhat).sum(axis=(0, 1))
    dbeta = dy.sum(axis=(0, 1))
    dxhat = dy * gamma
    dx = inv / n * (n * dxhat - dxhat.sum(axis=(0, 1)) - xhat * (dxhat * xhat).sum(axis=(0, 1)))
    return dx * m, dgamma, dbeta


# -- LSTM recurrence ----------------------------------------------------------------

def reverse_index(lengths, T):
    """Per-sequence time reversal inside each valid length; padding stays in place."""
    t = np.arange(T)[None, :]
    L = np.asarray(lengths)[:, None]
    return np.where(t < L, L - 1 - t, t)


def reverse_time(x, idx):
    return np.take_along_axis(x, idx[:, :, None], axis=1)


def lstm_forward(pre, W_hh):
    """Run the recurrence over input pre-activations ``pre`` (B, T, 4H).

    Gate order in the 4H axis is input, forget, output, candidate.
    """
    B, T, G = pre.shape
    H = G // 4
    h = np.zeros((B, H), dtype=pre.dtype)
    c = np.zeros((B, H), dtype=pre.dtype)
    hs = np.empty((B, T, H), dtype=pre.dtype)
    gates = np.empty((B, T, G), dtype=pre.dtype)
    cs = np.empty((B, T, H), dtype=pre.dtype)
    tcs = np.empty((B, T, H), dtype=pre.dtype)
    for t in range(T):
        g = pre[:, t] + h @ W_hh
        g[:, :3 * H] = sigmoid(g[:, :3 * H])
        g[:, 3 * H:] = np.tanh(g[:, 3 * H:])
        c = g[:, H:2 * H] * c + g[:, :H] * g[:, 3 * H:]
        tc = np.tanh(c)
        h = g[:, 2 * H:3 * H] * tc
        gates[:, t] = g
        cs[:, t] = c
        tcs[:, t] = tc
        hs[:, t] = h
    return hs, (gates, cs, tcs, hs)


def lstm_backward(dhs, W_hh, cache):
    gates, cs, tcs, hs = cache
    B, T, G = gates.shape
    H = G // 4
    dpre = np.empty_like(gates)
    dW_hh = np.zeros_like(W_hh)
    dh_next = np.zeros((B, H), dtype=gates.dtype)
    dc_next = np.zeros((B, H), dtype=gates.dtype)
    zeros = np.zeros((B, H), dtype=gates.dtype)
    for t in range(T - 1, -1, -1):
        g = gates[:, t]
        i, f, o, gg = g[:, :H], g[:, H:2 * H], g[:, 2 * H:3 * H], g[:, 3 * H:]
        tc = tcs[:, t]
        c_prev = cs[:, t - 1] if t > 0 else zeros
        h_prev = hs[:, t - 1] if t > 0 else zeros
        dh = dhs[:, t] + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        d = dpre[:, t]
        d[:, :H] = dc * gg * i * (1.0 - i)
        d[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
        d[:, 2 * H:3 * H] = dh * tc * o * (1.0 - o)
        d[:, 3 * H:] = dc * i * (1.0 - gg * gg)
        dc_next = dc * f
        dW_hh += h_prev.T @ d
        dh_next = d @ W_hh.T
    return dpre, dW_hh


# -- output ---------------------------------------------------------------------------

def log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def log_softmax_backward(dlogp, logp):
    return dlogp - np.exp(logp) * dlogp.sum(axis=-1, keepdims=True)
