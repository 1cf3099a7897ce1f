"""Small dense numerics shared by every stage.

Everything here works on plain ``numpy`` arrays in float64.  Losses and
their gradients elsewhere in the package are written by hand; ``grad_check``
is the harness that keeps them honest.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np


def _check_temperature(temperature: float) -> None:
    if not (temperature > 0 and np.isfinite(temperature)):
        raise ValueError(f"temperature must be a positive finite number, got {temperature!r}")


def logsumexp(x: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


def softmax(scores, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax of ``scores / temperature`` along ``axis``."""
    _check_temperature(temperature)
    z = np.asarray(scores, dtype=np.float64)
    if z.size == 0:
        raise ValueError("softmax of an empty vector")
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax input contains non-finite values")
    z = z / temperature
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(scores, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    _check_temperature(temperature)
    z = np.asarray(scores, dtype=np.float64) / temperature
    return z - logsumexp(z, axis=axis, keepdims=True)


def cosine(u, v) -> float:
    """Cosine similarity.  A zero vector is treated as an upstream bug."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine of a zero vector is undefined")
    c = float(np.dot(u / nu, v / nv))
    return min(1.0, max(-1.0, c))


def normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (unit rows, row norms).  Raises on any zero row."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("cannot normalise a zero vector")
    return x / norms, norms


def normalize_backward(unit: np.ndarray, norms: np.ndarray, d_unit: np.ndarray) -> np.ndarray:
    """Gradient through ``x -> x / |x|`` given the forward outputs."""
    return (d_unit - unit * np.sum(unit * d_unit, axis=-1, keepdims=True)) / norms


def cosine_matrix(a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    ua, _ = normalize_rows(a)
    ub = ua if b is None else normalize_rows(b)[0]
    return ua @ ub.T


# --------------------------------------------------------------------------
# RNG

def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode())


def make_rng(seed: int, *stream) -> np.random.Generator:
    """Counter-based (Philox) generator for a named sub-stream of ``seed``.

    ``make_rng(42, "negatives", 3)`` always yields the same stream, no matter
    what other streams were drawn before it or on which thread.
    """
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tuple(_key(p) for p in stream))
    return np.random.Generator(np.random.Philox(ss))


# --------------------------------------------------------------------------
# AdamW

Params = dict[str, np.ndarray]


@dataclass
class OptimState:
    learning_rate: float
    weight_decay: float = 0.0
    warmup_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    no_decay: frozenset = frozenset()

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.weight_decay < 0 or self.warmup_steps < 0:
            raise ValueError("weight_decay and warmup_steps must be >= 0")

    def effective_lr(self, step: int | None = None) -> float:
        s = self.step if step is None else step
        if self.warmup_steps and s < self.warmup_steps:
            return self.learning_rate * s / self.warmup_steps
        return self.learning_rate


def adamw_step(params: Params, grads: Mapping[str, np.ndarray], state: OptimState) -> tuple[Params, OptimState]:
    """One decoupled-weight-decay Adam update, applied in place.

    Parameters without an entry in ``grads`` are left untouched (no decay
    either), which is what sparse embedding tables want.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if params[name].shape != np.shape(g):
            raise ValueError(f"shape mismatch for {name!r}: {params[name].shape} vs {np.shape(g)}")
    state.step += 1
    lr = state.effective_lr()
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        if state.weight_decay and name not in state.no_decay:
            p *= 1.0 - lr * state.weight_decay
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values())))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


# --------------------------------------------------------------------------
# Finite differences

def grad_check(loss_fn: Callable, params, epsilon: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` must return ``(loss, grads)`` where ``grads`` mirrors
    ``params`` (a dict of arrays, or a single array).  The relative error of
    each coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    single = isinstance(params, np.ndarray)
    p = {"x": params} if single else params

    def call():
        loss, g = loss_fn(params)
        return float(loss), ({"x": g} if single else g)

    base, analytic = call()
    again, _ = call()
    if base != again:
        raise RuntimeError(f"loss_fn is not deterministic: {base!r} != {again!r}")

    worst = 0.0
    for name, arr in p.items():
        if arr.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters, {name!r} is {arr.dtype}")
        g = np.asarray(analytic.get(name, np.zeros_like(arr)), dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + epsilon
            up, _ = call()
            flat[i] = old - epsilon
            down, _ = call()
            flat[i] = old
            numeric = (up - down) / (2 * epsilon)
            worst = max(worst, abs(gflat[i] - numeric) / max(1.0, abs(numeric)))
    return worst
