"""Prefix buckets over fused item embeddings, and the user-to-items store.

Every item lives in the bucket of its length-``ell`` SID prefix.  Cosine
search is a dot product against unit copies made once at build time.  Ties
break toward the smaller item id everywhere.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorio
from .numeric import make_rng

EMPTY_BUCKET = "empty bucket"


@dataclass
class Bucket:
    items: np.ndarray  # ascending item ids
    emb: np.ndarray
    unit: np.ndarray
    centroids: np.ndarray | None = None  # unit-normalised cell centres
    cells: list[np.ndarray] | None = None  # member positions per cell

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class PrefixIndex:
    ell: int
    buckets: dict[tuple, Bucket]
    item_prefix: dict[int, tuple]
    approx_min_bucket: int | None = None
    seed: int = 0
    kmeans_iters: int = 25

    @property
    def n_items(self) -> int:
        return len(self.item_prefix)

    def prefix_of(self, item: int) -> tuple:
        return self.item_prefix[int(item)]

    def members(self, prefix) -> np.ndarray:
        b = self.buckets.get(tuple(prefix))
        return b.items if b is not None else np.zeros(0, dtype=np.int64)

    def sizes(self) -> dict[tuple, int]:
        return {p: len(b) for p, b in self.buckets.items()}


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("zero embedding cannot be indexed by cosine")
    return x / n


def _cells(unit: np.ndarray, n_cells: int, iters: int, rng: np.random.Generator):
    """Spherical k-means; empty cells are dropped."""
    n = len(unit)
    cent = unit[np.sort(rng.choice(n, n_cells, replace=False))].copy()
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        assign = np.argmax(unit @ cent.T, axis=1)
        sums = np.zeros_like(cent)
        np.add.at(sums, assign, unit)
        norm = np.linalg.norm(sums, axis=1)
        keep = norm > 0
        cent[keep] = sums[keep] / norm[keep, None]
    assign = np.argmax(unit @ cent.T, axis=1)
    used = np.unique(assign)
    lists = [np.flatnonzero(assign == c) for c in used]
    return cent[used], lists


def build_prefix_index(sids, fused: np.ndarray, ell: int, *, approx_min_bucket: int | None = None,
                       seed: int = 0, kmeans_iters: int = 25) -> PrefixIndex:
    """Group items by SID prefix.

    ``sids`` is an (N, L) code array or a dict item -> codes; ``fused`` holds
    one embedding row per item id.  Buckets with at least
    ``approx_min_bucket`` members also get k-means cells for approximate
    search (about sqrt(size) cells).
    """
    if ell < 1:
        raise ValueError("prefix length must be at least 1")
    if isinstance(sids, dict):
        items = sorted(sids)
        codes = np.array([sids[i] for i in items], dtype=np.int64).reshape(len(items), -1)
    else:
        codes = np.asarray(sids, dtype=np.int64)
        items = list(range(len(codes)))
    if codes.size and ell > codes.shape[1]:
        raise ValueError(f"prefix length {ell} exceeds SID length {codes.shape[1]}")
    fused = np.asarray(fused, dtype=np.float64)
    for it in items:
        if it >= len(fused) or not np.all(np.isfinite(fused[it])):
            raise ValueError(f"item {it} has no fused embedding")
    items_arr = np.asarray(items, dtype=np.int64)
    prefixes = codes[:, :ell]
    groups: dict[tuple, list[int]] = {}
    for row, it in enumerate(items_arr.tolist()):
        groups.setdefault(tuple(prefixes[row].tolist()), []).append(it)
    buckets = {}
    item_prefix = {}
    for p in sorted(groups):
        ids = np.array(sorted(groups[p]), dtype=np.int64)
        buckets[p] = _bucket(p, ids, fused[ids], approx_min_bucket, seed, kmeans_iters)
        for it in ids.tolist():
            item_prefix[it] = p
    return PrefixIndex(ell, buckets, item_prefix, approx_min_bucket, seed, kmeans_iters)


def _bucket(prefix, ids, emb, approx_min_bucket, seed, kmeans_iters) -> Bucket:
    b = Bucket(ids, emb, _unit(emb))
    if approx_min_bucket is not None and len(ids) >= approx_min_bucket:
        rng = make_rng(seed, "cells", *prefix)
        b.centroids, b.cells = _cells(b.unit, max(1, int(round(math.sqrt(len(ids))))), kmeans_iters, rng)
    return b


@dataclass
class AnnResult:
    items: np.ndarray
    scores: np.ndarray
    status: str = "ok"
    # cosines over the whole bucket, aligned with ``bucket_items``
    bucket_items: np.ndarray | None = None
    bucket_scores: np.ndarray | None = None


def _top(items: np.ndarray, scores: np.ndarray, m: int) -> np.ndarray:
    order = np.lexsort((items, -scores))
    return order[:m]


def ann_query(index: PrefixIndex, prefix, h: np.ndarray, m: int, mode: str = "exact",
              n_probe: int | None = None) -> AnnResult:
    """Top-``m`` bucket members by cosine to ``h``, best first."""
    if m < 1:
        raise ValueError("M must be at least 1")
    b = index.buckets.get(tuple(int(c) for c in prefix))
    if b is None:
        z = np.zeros(0)
        return AnnResult(z.astype(np.int64), z, EMPTY_BUCKET)
    q = np.asarray(h, dtype=np.float64)
    nq = np.linalg.norm(q)
    if nq == 0:
        raise ValueError("query vector is zero")
    q = q / nq
    if mode == "exact" or b.cells is None:
        if mode not in ("exact", "approx"):
            raise ValueError(f"unknown mode {mode!r}")
        s = np.clip(b.unit @ q, -1.0, 1.0)
        top = _top(b.items, s, m)
        return AnnResult(b.items[top], s[top], bucket_items=b.items, bucket_scores=s)
    if mode != "approx":
        raise ValueError(f"unknown mode {mode!r}")
    n_cells = len(b.cells)
    p = n_probe if n_probe is not None else default_probe(n_cells)
    cs = b.centroids @ q
    probe = np.lexsort((np.arange(n_cells), -cs))[:max(1, p)]
    cand = np.sort(np.concatenate([b.cells[c] for c in probe]))
    s = np.clip(b.unit[cand] @ q, -1.0, 1.0)
    top = _top(b.items[cand], s, m)
    return AnnResult(b.items[cand][top], s[top])


def default_probe(n_cells: int) -> int:
    return max(1, int(math.ceil(0.5 * n_cells)))


# --------------------------------------------------------------------------
# persistence

def save_index(index: PrefixIndex, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    approx = "none" if index.approx_min_bucket is None else index.approx_min_bucket
    lines = [f"ell={index.ell}", f"buckets={len(index.buckets)}",
             f"approx_min_bucket={approx}", f"seed={index.seed}", f"kmeans_iters={index.kmeans_iters}"]
    for k, (p, b) in enumerate(index.buckets.items()):
        tensorio.write_tensor(d / f"bucket{k:05d}.sgma", b.emb)
        (d / f"bucket{k:05d}.ids.txt").write_text("\n".join(map(str, b.items.tolist())) + "\n")
        lines.append(f"bucket{k:05d}\t{','.join(map(str, p))}\t{len(b)}")
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_index(directory) -> PrefixIndex:
    d = Path(directory)
    lines = (d / "manifest.txt").read_text().splitlines()
    head = dict(line.split("=", 1) for line in lines if "=" in line and "\t" not in line)
    ell = int(head["ell"])
    approx = None if head.get("approx_min_bucket", "none") == "none" else int(head["approx_min_bucket"])
    seed, iters = int(head.get("seed", 0)), int(head.get("kmeans_iters", 25))
    buckets, item_prefix = {}, {}
    for line in lines:
        if "\t" not in line:
            continue
        name, pre, _ = line.split("\t")
        p = tuple(int(c) for c in pre.split(","))
        ids = np.array([int(x) for x in (d / f"{name}.ids.txt").read_text().split()], dtype=np.int64)
        emb = tensorio.read_tensor(d / f"{name}.sgma").astype(np.float64)
        # cells are rebuilt deterministically from the same seed
        buckets[p] = _bucket(p, ids, emb, approx, seed, iters)
        for it in ids.tolist():
            item_prefix[it] = p
    return PrefixIndex(ell, buckets, item_prefix, approx, seed, iters)


# --------------------------------------------------------------------------
# user-to-items snapshots

@dataclass(frozen=True)
class U2iEntry:
    timestamp: float
    items: tuple[int, ...]
    probs: tuple[float, ...]


@dataclass
class U2iIndex:
    """One writer, many readers.  Each put swaps in a whole immutable entry."""

    max_items: int = 100
    _entries: dict[int, U2iEntry] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock)

    def put(self, user: int, results, timestamp: float) -> bool:
        """Store ``results`` (sorted (item, prob) pairs); an older timestamp loses."""
        pairs = list(results)[: self.max_items]
        probs = tuple(float(p) for _, p in pairs)
        if any(b > a for a, b in zip(probs, probs[1:])):
            raise ValueError("results must be sorted by probability")
        entry = U2iEntry(float(timestamp), tuple(int(i) for i, _ in pairs), probs)
        with self._lock:
            old = self._entries.get(int(user))
            if old is not None and old.timestamp > entry.timestamp:
                return False
            self._entries[int(user)] = entry
        return True

    def get(self, user: int) -> list[tuple[int, float]]:
        e = self._entries.get(int(user))
        return [] if e is None else list(zip(e.items, e.probs))

    def entry(self, user: int) -> U2iEntry | None:
        return self._entries.get(int(user))

    def users(self) -> list[int]:
        return sorted(self._entries)

    def export(self, path) -> None:
        with open(path, "w") as fh:
            for u in self.users():
                e = self._entries[u]
                for rank, (it, p) in enumerate(zip(e.items, e.probs), start=1):
                    fh.write(f"{u}\t{it}\t{rank}\t{p!r}\n")


def u2i_put(index: U2iIndex, user: int, results, timestamp: float) -> bool:
    return index.put(user, results, timestamp)


def u2i_get(index: U2iIndex, user: int) -> list[tuple[int, float]]:
    return index.get(user)
