"""Hybrid item tokens: SID prefix tokens followed by one ID slot.

The SID tokens come from a level-disjoint vocabulary; the ID slot is not a
vocabulary entry at all.  Its input row is the up-projected fusion of the
item's pretrained embeddings (behavioural ID, grounded text, visual).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn

TASKS = ("JustForYou", "Query", "Category", "Longtail", "Discover", "Season", "Holiday")
ROLES = ("base", "sid", "item", "query")
SPECIALS = ("<pad>", "<bos>", "<eos>", "<query>", "<item>")
FUSED_DIM = 128


class Vocabulary:
    """Token layout: specials, task tokens, profile and constraint tokens, then SIDs.

    ``sid_token(level, code) = base_offset + (level - 1) * K + code`` with
    1-based levels.
    """

    def __init__(self, levels: int, codebook_size: int, *, n_age: int = 6, n_gender: int = 2, n_region: int = 8,
                 n_query: int = 128, n_category: int = 32, n_season: int = 4, n_holiday: int = 6):
        self.levels = levels
        self.codebook_size = codebook_size
        names: list[str] = list(SPECIALS)
        names += [f"<task:{t}>" for t in TASKS]
        self.groups = {"age": n_age, "gender": n_gender, "region": n_region, "query": n_query,
                       "category": n_category, "season": n_season, "holiday": n_holiday}
        self._group_offset = {}
        for g, n in self.groups.items():
            self._group_offset[g] = len(names)
            names += [f"<{g}:{i}>" for i in range(n)]
        self.base_offset = len(names)
        self._base_names = names
        self._index = {n: i for i, n in enumerate(names)}

    # specials
    @property
    def pad(self) -> int: return 0
    @property
    def bos(self) -> int: return 1
    @property
    def eos(self) -> int: return 2
    @property
    def query(self) -> int: return 3
    @property
    def item(self) -> int: return 4

    def __len__(self) -> int:
        return self.base_offset + self.levels * self.codebook_size

    def task(self, name: str) -> int:
        return self._index[f"<task:{name}>"]

    def attr(self, group: str, value: int) -> int:
        if not 0 <= value < self.groups[group]:
            raise ValueError(f"{group} value {value} out of range")
        return self._group_offset[group] + int(value)

    def sid_token(self, level: int, code: int) -> int:
        if not 1 <= level <= self.levels:
            raise ValueError(f"level {level} outside 1..{self.levels}")
        if not 0 <= code < self.codebook_size:
            raise ValueError(f"code {code} outside 0..{self.codebook_size - 1}")
        return self.base_offset + (level - 1) * self.codebook_size + int(code)

    def decode_sid(self, token: int) -> tuple[int, int]:
        off = int(token) - self.base_offset
        if not 0 <= off < self.levels * self.codebook_size:
            raise ValueError(f"token {token} is not a SID token")
        return off // self.codebook_size + 1, off % self.codebook_size

    def role(self, token: int) -> int:
        if token >= self.base_offset:
            return 1
        if token == self.item:
            return 2
        if token == self.query:
            return 3
        return 0

    def roles(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens)
        r = np.zeros(tokens.shape, dtype=np.int64)
        r[tokens >= self.base_offset] = 1
        r[tokens == self.item] = 2
        r[tokens == self.query] = 3
        return r

    def name(self, token: int) -> str:
        if token < self.base_offset:
            return self._base_names[token]
        level, code = self.decode_sid(token)
        return f"<sid:{level}:{code}>"

    def write_manifest(self, path) -> None:
        with open(path, "w") as fh:
            for t in range(len(self)):
                fh.write(f"{self.name(t)}\t{t}\t{ROLES[self.role(t)]}\n")

    def config(self) -> dict[str, int]:
        return {"levels": self.levels, "codebook_size": self.codebook_size,
                **{f"n_{g}": n for g, n in self.groups.items()}}


@dataclass(frozen=True)
class HybridTokenSeq:
    sid_prefix: tuple[int, ...]
    item_id: int


def tokenize_item(vocab: Vocabulary, sids, item: int, ell: int) -> HybridTokenSeq:
    """``sids`` maps item id -> full code tuple (dict or (N, L) array)."""
    if not 0 <= ell <= vocab.levels:
        raise ValueError(f"prefix length {ell} outside 0..{vocab.levels}")
    try:
        codes = sids[item]
    except (KeyError, IndexError):
        raise KeyError(f"item {item} has no semantic ID") from None
    if np.any(np.asarray(codes) < 0):
        raise KeyError(f"item {item} has no semantic ID")
    return HybridTokenSeq(tuple(vocab.sid_token(t + 1, int(codes[t])) for t in range(ell)), int(item))


def detokenize(vocab: Vocabulary, seq: HybridTokenSeq) -> tuple[tuple[int, ...], int]:
    codes = []
    for t, tok in enumerate(seq.sid_prefix):
        level, code = vocab.decode_sid(tok)
        if level != t + 1:
            raise ValueError(f"token at position {t} belongs to level {level}")
        codes.append(code)
    return tuple(codes), seq.item_id


# --------------------------------------------------------------------------
# fused item embeddings

@dataclass
class ItemStore:
    """Pretrained per-item embeddings feeding the fusion MLP."""

    v_id: np.ndarray
    v_text: np.ndarray
    v_img: np.ndarray
    has_img: np.ndarray

    def __post_init__(self):
        n = len(self.v_id)
        if not (len(self.v_text) == len(self.v_img) == len(self.has_img) == n):
            raise ValueError("pretrained embedding tables disagree on the number of items")
        # unit RMS per block keeps the MLP input well scaled whatever the source
        self._scale = [1.0 / max(float(np.sqrt(np.mean(a ** 2))), 1e-12) if a.size else 1.0
                       for a in (self.v_id, self.v_text, self.v_img)]

    @property
    def n_items(self) -> int:
        return len(self.v_id)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.v_id.shape[1], self.v_text.shape[1], self.v_img.shape[1]

    def inputs(self, items: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        items = np.asarray(items)
        if items.size and (items.min() < 0 or items.max() >= self.n_items):
            bad = items[(items < 0) | (items >= self.n_items)][0]
            raise KeyError(f"unknown item id {int(bad)}")
        x = np.concatenate([self.v_id[items] * self._scale[0], self.v_text[items] * self._scale[1],
                            self.v_img[items] * self._scale[2]], axis=-1)
        return x, self.has_img[items]


def init_fusion(rng: np.random.Generator, dims: tuple[int, int, int], d_model: int, n_items: int,
                mode: str = "pretrained", hidden: int = 256) -> dict[str, np.ndarray]:
    """Parameters (prefixed ``fuse/``) for the fusion MLP and its up-projection.

    ``mode="free"`` replaces the MLP by a learned per-item table; the
    up-projection is shared by both modes.
    """
    p: dict[str, np.ndarray] = {}
    if mode == "pretrained":
        w1, b1 = nn.init_linear(rng, sum(dims), hidden)
        w2, b2 = nn.init_linear(rng, hidden, FUSED_DIM)
        p.update({"fuse/w1": w1, "fuse/b1": b1, "fuse/w2": w2, "fuse/b2": b2,
                  "fuse/missing_img": np.zeros(dims[2])})
    elif mode == "free":
        p["fuse/table"] = rng.normal(0.0, 1.0, (n_items, FUSED_DIM))
    else:
        raise ValueError(f"unknown fusion mode {mode!r}")
    up_w, up_b = nn.init_linear(rng, FUSED_DIM, d_model)
    p["fuse/up_w"], p["fuse/up_b"] = up_w, up_b
    return p


def fuse_forward(params: dict, store: ItemStore, items: np.ndarray):
    """Fused 128-d representation for each item id in ``items``."""
    items = np.asarray(items, dtype=np.int64)
    if "fuse/table" in params:
        if items.size and (items.min() < 0 or items.max() >= len(params["fuse/table"])):
            raise KeyError("unknown item id")
        return params["fuse/table"][items], ("free", items)
    x, has = store.inputs(items)
    x = x.astype(params["fuse/w1"].dtype, copy=False)
    d_id, d_text, d_img = store.dims
    miss = ~has
    if miss.any():
        x = x.copy()
        x[miss, d_id + d_text:] = params["fuse/missing_img"]
    y, cache = nn.mlp2_forward(x, params, "fuse/")
    return y, ("mlp", cache, miss, d_id + d_text)


def fuse_backward(params: dict, d_y: np.ndarray, cache, grads: dict) -> None:
    if cache[0] == "free":
        g = nn.scatter_add_rows(cache[1], d_y, len(params["fuse/table"]))
        grads["fuse/table"] = grads["fuse/table"] + g if "fuse/table" in grads else g
        return
    _, mcache, miss, img_at = cache
    dx = nn.mlp2_backward(d_y, mcache, params, "fuse/", grads)
    g = dx[miss, img_at:].sum(axis=0) if miss.any() else np.zeros_like(params["fuse/missing_img"])
    grads["fuse/missing_img"] = grads.get("fuse/missing_img", 0) + g


def fuse_item_embedding(params: dict, v_id: np.ndarray, v_text: np.ndarray, v_img: np.ndarray | None,
                        store: ItemStore | None = None) -> np.ndarray:
    """Fuse one item's three embeddings (``v_img=None`` means missing)."""
    v_id, v_text = np.asarray(v_id, float), np.asarray(v_text, float)
    if store is not None:
        dims = store.dims
        scale = store._scale
    else:
        dims = (len(v_id), len(v_text), params["fuse/missing_img"].shape[0])
        scale = [1.0, 1.0, 1.0]
    if (len(v_id), len(v_text)) != dims[:2] or (v_img is not None and len(v_img) != dims[2]):
        raise ValueError("embedding dimensions do not match the fusion MLP")
    img = params["fuse/missing_img"] if v_img is None else np.asarray(v_img, float) * scale[2]
    x = np.concatenate([v_id * scale[0], v_text * scale[1], img])
    if x.shape[0] != params["fuse/w1"].shape[0]:
        raise ValueError("embedding dimensions do not match the fusion MLP")
    return nn.mlp2_forward(x, params, "fuse/")[0]


def up_project(params: dict, fused: np.ndarray) -> np.ndarray:
    return fused @ params["fuse/up_w"] + params["fuse/up_b"]


def embed_item_sequence(vocab: Vocabulary, params: dict, store: ItemStore, seq: HybridTokenSeq) -> np.ndarray:
    """Input rows for one hybrid item: token-table lookups then the projected fusion."""
    table = params["tok_emb"]
    for tok in seq.sid_prefix:
        vocab.decode_sid(tok)
    rows = [table[t] for t in seq.sid_prefix]
    fused, _ = fuse_forward(params, store, np.array([seq.item_id]))
    rows.append(up_project(params, fused)[0])
    return np.stack(rows)
