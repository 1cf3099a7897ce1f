"""Pre-LN causal decoder blocks with a key/value cache.

Only the block stack lives here; token assembly and output heads belong to
the callers.  ``blocks_forward`` handles both the cold path (``cache=None``)
and incremental extension; ``blocks_backward`` supports the cold path only,
which is all training needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn


@dataclass(frozen=True)
class BlockConfig:
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    max_len: int = 256

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")


@dataclass
class KvCache:
    """Per-layer keys and values, each shaped (batch, heads, length, head_dim)."""

    keys: list[np.ndarray] = field(default_factory=list)
    values: list[np.ndarray] = field(default_factory=list)

    @property
    def length(self) -> int:
        return self.keys[0].shape[2] if self.keys else 0

    @property
    def batch(self) -> int:
        return self.keys[0].shape[0] if self.keys else 0

    def take(self, rows) -> KvCache:
        rows = np.asarray(rows)
        return KvCache([k[rows] for k in self.keys], [v[rows] for v in self.values])

    def repeat(self, n: int) -> KvCache:
        if self.batch != 1:
            raise ValueError("only a single-row cache can be broadcast")
        return self.take(np.zeros(n, dtype=np.int64))


def init_blocks(rng: np.random.Generator, cfg: BlockConfig) -> dict[str, np.ndarray]:
    d, f = cfg.d_model, cfg.d_ff
    p: dict[str, np.ndarray] = {}
    out_scale = 1.0 / np.sqrt(2 * cfg.n_layers)
    for layer in range(cfg.n_layers):
        k = f"blk{layer}/"
        p[k + "ln1_g"], p[k + "ln1_b"] = np.ones(d), np.zeros(d)
        p[k + "w_qkv"], p[k + "b_qkv"] = nn.init_linear(rng, d, 3 * d)
        p[k + "w_o"], p[k + "b_o"] = nn.init_linear(rng, d, d, out_scale)
        p[k + "ln2_g"], p[k + "ln2_b"] = np.ones(d), np.zeros(d)
        p[k + "w_ff1"], p[k + "b_ff1"] = nn.init_linear(rng, d, f)
        p[k + "w_ff2"], p[k + "b_ff2"] = nn.init_linear(rng, f, d, out_scale)
    p["lnf_g"], p["lnf_b"] = np.ones(d), np.zeros(d)
    return p


def _heads(x: np.ndarray, h: int) -> np.ndarray:
    b, t, d = x.shape
    return x.reshape(b, t, h, d // h).transpose(0, 2, 1, 3)


def _merge(x: np.ndarray) -> np.ndarray:
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def blocks_forward(params: dict, cfg: BlockConfig, x: np.ndarray, cache: KvCache | None = None,
                   keep: bool = False):
    """Run the stack on input rows ``x`` (B, T, d) that follow ``cache``.

    Returns ``(final, new_cache, acts)``; ``final`` is the last layer-norm
    output and ``acts`` is ``None`` unless ``keep`` is set.
    """
    b, t, d = x.shape
    past = cache.length if cache is not None else 0
    if past + t > cfg.max_len:
        raise ValueError(f"sequence length {past + t} exceeds the maximum {cfg.max_len}")
    if cache is not None and cache.keys and cache.batch != b:
        raise ValueError("cache batch does not match the input batch")
    if keep and past:
        raise ValueError("backward through a cached prefix is not supported")
    h = cfg.n_heads
    scale = 1.0 / float(np.sqrt(d // h))
    allowed = np.arange(past + t)[None, :] <= (past + np.arange(t))[:, None]
    new_k, new_v, acts = [], [], []
    for layer in range(cfg.n_layers):
        k_ = f"blk{layer}/"
        h1, c_ln1 = nn.layernorm_forward(x, params[k_ + "ln1_g"], params[k_ + "ln1_b"])
        qkv = h1 @ params[k_ + "w_qkv"] + params[k_ + "b_qkv"]
        q, k, v = (_heads(a, h) for a in np.split(qkv, 3, axis=-1))
        if past:
            k = np.concatenate([cache.keys[layer], k], axis=2)
            v = np.concatenate([cache.values[layer], v], axis=2)
        new_k.append(k)
        new_v.append(v)
        s = (q @ k.transpose(0, 1, 3, 2)) * scale
        s = np.where(allowed, s, -np.inf)
        s = s - s.max(axis=-1, keepdims=True)
        a = np.exp(s)
        a /= a.sum(axis=-1, keepdims=True)
        o = _merge(a @ v)
        x2 = x + o @ params[k_ + "w_o"] + params[k_ + "b_o"]
        h2, c_ln2 = nn.layernorm_forward(x2, params[k_ + "ln2_g"], params[k_ + "ln2_b"])
        f1 = h2 @ params[k_ + "w_ff1"] + params[k_ + "b_ff1"]
        g, c_g = nn.gelu_forward(f1)
        x_next = x2 + g @ params[k_ + "w_ff2"] + params[k_ + "b_ff2"]
        if keep:
            acts.append((c_ln1, h1, q, k, v, a, o, c_ln2, h2, c_g, g))
        x = x_next
    final, c_lnf = nn.layernorm_forward(x, params["lnf_g"], params["lnf_b"])
    if keep:
        acts.append(c_lnf)
    return final, KvCache(new_k, new_v), (acts if keep else None)


def _acc(grads: dict, key: str, g: np.ndarray) -> None:
    grads[key] = grads[key] + g if key in grads else g


def blocks_backward(params: dict, cfg: BlockConfig, d_final: np.ndarray, acts, grads: dict) -> np.ndarray:
    """Accumulate parameter gradients into ``grads``; return d(input rows)."""
    h = cfg.n_heads
    d = d_final.shape[-1]
    scale = 1.0 / float(np.sqrt(d // h))
    dx, dg, db = nn.layernorm_backward(d_final, acts[-1])
    _acc(grads, "lnf_g", dg)
    _acc(grads, "lnf_b", db)
    for layer in reversed(range(cfg.n_layers)):
        k_ = f"blk{layer}/"
        c_ln1, h1, q, k, v, a, o, c_ln2, h2, c_g, g = acts[layer]
        # feed-forward branch
        dg_, dw, dbias = nn.linear_backward(dx, g, params[k_ + "w_ff2"])
        _acc(grads, k_ + "w_ff2", dw)
        _acc(grads, k_ + "b_ff2", dbias)
        df1 = nn.gelu_backward(dg_, c_g)
        dh2, dw, dbias = nn.linear_backward(df1, h2, params[k_ + "w_ff1"])
        _acc(grads, k_ + "w_ff1", dw)
        _acc(grads, k_ + "b_ff1", dbias)
        dx2, dgam, dbet = nn.layernorm_backward(dh2, c_ln2)
        _acc(grads, k_ + "ln2_g", dgam)
        _acc(grads, k_ + "ln2_b", dbet)
        dx2 = dx2 + dx
        # attention branch
        do, dw, dbias = nn.linear_backward(dx2, o, params[k_ + "w_o"])
        _acc(grads, k_ + "w_o", dw)
        _acc(grads, k_ + "b_o", dbias)
        do = _heads(do, h)
        da = do @ v.transpose(0, 1, 3, 2)
        dv = a.transpose(0, 1, 3, 2) @ do
        ds = a * (da - np.sum(da * a, axis=-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dqkv = np.concatenate([_merge(dq), _merge(dk), _merge(dv)], axis=-1)
        dh1, dw, dbias = nn.linear_backward(dqkv, h1, params[k_ + "w_qkv"])
        _acc(grads, k_ + "w_qkv", dw)
        _acc(grads, k_ + "b_qkv", dbias)
        dx1, dgam, dbet = nn.layernorm_backward(dh1, c_ln1)
        _acc(grads, k_ + "ln1_g", dgam)
        _acc(grads, k_ + "ln1_b", dbet)
        dx = dx2 + dx1
    return dx
