"""Hand-differentiated layer primitives.

Each ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
maps an upstream gradient plus that cache to input and parameter gradients.
Leading batch axes are arbitrary; the feature axis is always last.
"""

from __future__ import annotations

import numpy as np

_GELU_C = float(np.sqrt(2.0 / np.pi))


def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int, scale: float = 1.0):
    w = rng.normal(0.0, scale / np.sqrt(fan_in), (fan_in, fan_out))
    return w, np.zeros(fan_out)


def linear_forward(x, w, b=None):
    y = x @ w
    if b is not None:
        y = y + b
    return y, x


def linear_backward(dy, x, w):
    """Returns (dx, dw, db)."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ w.T, x2.T @ dy2, dy2.sum(axis=0)


def gelu_forward(x):
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    return 0.5 * x * (1.0 + t), (x, x2, t)


def gelu_backward(dy, cache):
    x, x2, t = cache
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def layernorm_forward(x, g, b, eps: float = 1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc ** 2, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def layernorm_backward(dy, cache):
    xhat, rstd, g = cache
    d = xhat.shape[-1]
    dg = np.sum((dy * xhat).reshape(-1, d), axis=0)
    db = np.sum(dy.reshape(-1, d), axis=0)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
    return dx, dg, db


def mlp2_forward(x, p: dict, prefix: str):
    """Two-layer GELU perceptron: ``x @ w1 + b1 -> gelu -> @ w2 + b2``."""
    h, c1 = linear_forward(x, p[f"{prefix}w1"], p[f"{prefix}b1"])
    a, cg = gelu_forward(h)
    y, c2 = linear_forward(a, p[f"{prefix}w2"], p[f"{prefix}b2"])
    return y, (c1, cg, c2)


def mlp2_backward(dy, cache, p: dict, prefix: str, grads: dict):
    c1, cg, c2 = cache
    da, dw2, db2 = linear_backward(dy, c2, p[f"{prefix}w2"])
    dh = gelu_backward(da, cg)
    dx, dw1, db1 = linear_backward(dh, c1, p[f"{prefix}w1"])
    for k, v in (("w1", dw1), ("b1", db1), ("w2", dw2), ("b2", db2)):
        key = f"{prefix}{k}"
        grads[key] = grads[key] + v if key in grads else v
    return dx


def scatter_add_rows(index: np.ndarray, rows: np.ndarray, n: int) -> np.ndarray:
    """``out[index[i]] += rows[i]`` for an (n, d) output, without ``np.add.at``."""
    out = np.zeros((n, rows.shape[-1]), dtype=rows.dtype)
    index = np.asarray(index).reshape(-1)
    if index.size == 0:
        return out
    rows = rows.reshape(len(index), -1)
    order = np.argsort(index, kind="stable")
    idx = index[order]
    starts = np.flatnonzero(np.r_[True, idx[1:] != idx[:-1]])
    out[idx[starts]] = np.add.reduceat(rows[order], starts, axis=0)
    return out
