"""Pure numpy versions of the hot kernels.

Every function here has a drop-in twin in the compiled ``_ckernels`` module;
the two must agree to rounding.
"""

from __future__ import annotations

import numpy as np

GELU_C = np.sqrt(2.0 / np.pi)
GELU_A = 0.044715


def attention_forward(q, k, v, allowed):
    """Masked scaled-dot-product attention.

    q, k, v: (B, H, T, dh); allowed: (B, T, T) with allowed[b, i, j] true when
    query i may read key j. Disallowed keys get exactly zero weight.
    Returns (out, probs).
    """
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = np.matmul(q, np.swapaxes(k, -1, -2)) * scale
    ok = allowed[:, None, :, :].astype(bool)
    scores = np.where(ok, scores, -np.inf)
    scores -= scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    return np.matmul(probs, v), probs


def attention_backward(dout, q, k, v, probs):
    scale = 1.0 / np.sqrt(q.shape[-1])
    dv = np.matmul(np.swapaxes(probs, -1, -2), dout)
    dp = np.matmul(dout, np.swapaxes(v, -1, -2))
    ds = probs * (dp - (dp * probs).sum(axis=-1, keepdims=True))
    dq = np.matmul(ds, k) * scale
    dk = np.matmul(np.swapaxes(ds, -1, -2), q) * scale
    return dq, dk, dv


def layernorm_forward(x, g, b, eps=1e-5):
    """Row-wise layer norm over the last axis of a 2D array."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * g + b, xhat, rstd[..., 0]


def layernorm_backward(dy, xhat, rstd, g):
    """Input gradient only; callers reduce the gain/shift gradients themselves."""
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    return (dxhat - m1 - xhat * m2) * rstd[..., None]


def gelu_forward(u):
    u2 = u * u
    t = np.tanh(GELU_C * u * (1.0 + GELU_A * u2))
    return 0.5 * u * (1.0 + t)


def gelu_backward(dy, u):
    u2 = u * u
    t = np.tanh(GELU_C * u * (1.0 + GELU_A * u2))
    dinner = GELU_C * (1.0 + 3.0 * GELU_A * u2)
    return dy * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * dinner)
