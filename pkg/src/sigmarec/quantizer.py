"""Residual vector quantisation (RQ-VAE) into L-level semantic IDs."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numeric import OptimState, adamw_step, make_rng
from .tensorio import read_tensors, write_tensors

log = logging.getLogger(__name__)


@dataclass
class RqVaeConfig:
    levels: int = 4
    codebook_size: int = 256
    beta: float = 0.25
    ema_decay: float = 0.95
    epochs: int = 10
    batch_size: int = 512
    learning_rate: float = 1e-3
    kmeans_iters: int = 25
    identity: bool = False  # freeze encoder/decoder to the identity map
    seed: int = 0


@dataclass
class RqVaeModel:
    enc_w: np.ndarray
    enc_b: np.ndarray
    dec_w: np.ndarray
    dec_b: np.ndarray
    codebooks: list[np.ndarray]
    beta: float = 0.25

    @classmethod
    def identity(cls, dim: int, codebooks: list[np.ndarray], beta: float = 0.25) -> "RqVaeModel":
        eye = np.eye(dim)
        return cls(eye.copy(), np.zeros(dim), eye.copy(), np.zeros(dim), [np.asarray(c, float) for c in codebooks], beta)

    @property
    def levels(self) -> int:
        return len(self.codebooks)

    @property
    def codebook_size(self) -> int:
        return self.codebooks[0].shape[0]

    @property
    def dim(self) -> int:
        return self.enc_w.shape[0]

    def encode(self, x: np.ndarray) -> np.ndarray:
        return x @ self.enc_w + self.enc_b

    def decode(self, z: np.ndarray) -> np.ndarray:
        return z @ self.dec_w + self.dec_b


def nearest_codeword(r: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Index of the closest codeword per row; ties go to the lowest index.

    Distances come from the expanded form ``|c|^2 - 2 r.c`` (one matmul);
    rows whose best candidates are within rounding of each other are then
    re-scored from explicit differences so near-ties resolve the same way
    an exhaustive scan would.
    """
    r = np.asarray(r, dtype=np.float64)
    cn = np.sum(codebook ** 2, axis=1)
    d = cn[None, :] - 2.0 * (r @ codebook.T)
    best = np.argmin(d, axis=1)
    dmin = d[np.arange(len(r)), best]
    scale = np.sum(r ** 2, axis=1) + cn.max(initial=0.0)
    close = d <= (dmin + 1e-9 * (scale + 1.0))[:, None]
    for i in np.flatnonzero(close.sum(axis=1) > 1):
        cand = np.flatnonzero(close[i])
        exact = np.sum((r[i] - codebook[cand]) ** 2, axis=1)
        best[i] = cand[np.argmin(exact)]
    return best


def quantize(codebooks: list[np.ndarray], z: np.ndarray):
    """Greedy residual assignment.  Returns (codes (N, L), quantised sum, residuals per level)."""
    r = np.array(z, dtype=np.float64, copy=True)
    codes = np.empty((len(z), len(codebooks)), dtype=np.int64)
    residuals = []
    total = np.zeros_like(r)
    for t, cb in enumerate(codebooks):
        residuals.append(r)
        c = nearest_codeword(r, cb)
        codes[:, t] = c
        total = total + cb[c]
        r = r - cb[c]
    residuals.append(r)
    return codes, total, residuals


def encode_batch(model: RqVaeModel, x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != model.dim:
        raise ValueError(f"expected dim {model.dim}, got {x.shape[1]}")
    return quantize(model.codebooks, model.encode(x))[0]


def rq_encode(model: RqVaeModel, v_text: np.ndarray) -> tuple[int, ...]:
    v = np.asarray(v_text, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError("rq_encode takes a single vector; use encode_batch for matrices")
    return tuple(int(c) for c in encode_batch(model, v[None])[0])


def rq_decode(model: RqVaeModel, sid) -> np.ndarray:
    codes = [int(c) for c in sid]
    if len(codes) != model.levels:
        raise ValueError(f"semantic ID must have {model.levels} codes")
    z = np.zeros(model.codebooks[0].shape[1])
    for t, c in enumerate(codes):
        if not 0 <= c < model.codebooks[t].shape[0]:
            raise ValueError(f"code {c} out of range at level {t + 1}")
        z = z + model.codebooks[t][c]
    return model.decode(z)


# --------------------------------------------------------------------------
# initialisation

def kmeans_with_mean(x: np.ndarray, k: int, iters: int, rng: np.random.Generator) -> np.ndarray:
    """k-means whose centroid 0 is pinned to the data mean.

    Keeping the mean as a codeword guarantees that quantising with the result
    never increases the total squared residual: every point is at least as
    close to its assigned codeword as to the mean, and the mean minimises the
    summed squared distance over all constant codewords (including zero).
    """
    n = len(x)
    mean = x.mean(axis=0)
    cents = np.empty((k, x.shape[1]))
    cents[0] = mean
    if k == 1:
        return cents
    # k-means++ seeding for the free centroids
    d2 = np.sum((x - mean) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        idx = int(rng.choice(n, p=d2 / total)) if total > 0 else int(rng.integers(0, n))
        cents[j] = x[idx]
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    for _ in range(iters):
        assign = nearest_codeword(x, cents)
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(cents)
        np.add.at(sums, assign, x)
        moved = cents.copy()
        nz = counts > 0
        moved[nz] = sums[nz] / counts[nz, None]
        moved[0] = mean
        empty = np.flatnonzero(~nz)
        empty = empty[empty > 0]
        if len(empty):
            # re-seed empty clusters at the points worst served right now
            far = np.argsort(-np.sum((x - cents[assign]) ** 2, axis=1), kind="stable")[:len(empty)]
            moved[empty[:len(far)]] = x[far]
        if np.array_equal(moved, cents):
            break
        cents = moved
    return cents


def init_codebooks(z: np.ndarray, levels: int, k: int, iters: int, seed: int) -> tuple[list[np.ndarray], list[float]]:
    """Level-by-level k-means on the running residual.

    Returns the codebooks and the mean squared residual before level 1 and
    after every level.
    """
    r = np.array(z, dtype=np.float64)
    books, msr = [], [float(np.mean(np.sum(r ** 2, axis=1)))]
    for t in range(levels):
        cb = kmeans_with_mean(r, k, iters, make_rng(seed, "rq-kmeans", t))
        books.append(cb)
        r = r - cb[nearest_codeword(r, cb)]
        msr.append(float(np.mean(np.sum(r ** 2, axis=1))))
    return books, msr


# --------------------------------------------------------------------------
# training

@dataclass
class RqVaeReport:
    init_residual_msr: list[float]
    recon_mse: float
    utilization: list[int]
    history: list[tuple[int, float]] = field(default_factory=list)


def train_rqvae(embeddings: np.ndarray, config: RqVaeConfig | None = None) -> tuple[RqVaeModel, RqVaeReport]:
    cfg = config or RqVaeConfig()
    x = np.asarray(embeddings, dtype=np.float64)
    n, dim = x.shape
    if n < cfg.codebook_size:
        raise ValueError(f"need at least K={cfg.codebook_size} embeddings to initialise codebooks, got {n}")
    model = RqVaeModel.identity(dim, [], cfg.beta)
    books, msr = init_codebooks(model.encode(x), cfg.levels, cfg.codebook_size, cfg.kmeans_iters, cfg.seed)
    model.codebooks = books
    k = cfg.codebook_size
    ema_n = [np.bincount(quantize(books, x)[0][:, t], minlength=k).astype(float) for t in range(cfg.levels)]
    ema_s = [books[t] * np.maximum(ema_n[t], 1e-3)[:, None] for t in range(cfg.levels)]
    params = {"enc_w": model.enc_w, "enc_b": model.enc_b, "dec_w": model.dec_w, "dec_b": model.dec_b}
    opt = OptimState(cfg.learning_rate)
    rng = make_rng(cfg.seed, "rq-train")
    history = []
    bs = min(cfg.batch_size, n)
    step = 0
    for epoch in range(cfg.epochs):
        used = [np.zeros(k, dtype=bool) for _ in range(cfg.levels)]
        order = rng.permutation(n)
        for s in range(0, n, bs):
            xb = x[order[s:s + bs]]
            z = model.encode(xb)
            codes, qsum, residuals = quantize(model.codebooks, z)
            xh = model.decode(qsum)  # straight-through: forward uses the codes
            diff = xh - xb
            recon = float(np.mean(diff ** 2))
            history.append((step, recon))
            step += 1
            if not cfg.identity:
                m = len(xb)
                d_xh = 2.0 * diff / diff.size
                g_dec_w = qsum.T @ d_xh
                g_dec_b = d_xh.sum(axis=0)
                d_z = d_xh @ model.dec_w.T
                # commitment: beta * sum_t |z - sg(partial sum up to t)|^2
                partial = np.zeros_like(z)
                for t in range(cfg.levels):
                    partial = partial + model.codebooks[t][codes[:, t]]
                    d_z = d_z + cfg.beta * 2.0 * (z - partial) / (m * dim)
                g_enc_w = xb.T @ d_z
                g_enc_b = d_z.sum(axis=0)
                adamw_step(params, {"enc_w": g_enc_w, "enc_b": g_enc_b, "dec_w": g_dec_w, "dec_b": g_dec_b}, opt)
            for t in range(cfg.levels):
                c = codes[:, t]
                used[t][c] = True
                cnt = np.bincount(c, minlength=k).astype(float)
                sums = np.zeros((k, dim))
                np.add.at(sums, c, residuals[t])
                ema_n[t] = cfg.ema_decay * ema_n[t] + (1 - cfg.ema_decay) * cnt
                ema_s[t] = cfg.ema_decay * ema_s[t] + (1 - cfg.ema_decay) * sums
                tot = ema_n[t].sum()
                smoothed = (ema_n[t] + 1e-5) / (tot + k * 1e-5) * tot
                model.codebooks[t] = ema_s[t] / smoothed[:, None]
        # reseed codewords that served nothing for a whole epoch
        _, _, residuals = quantize(model.codebooks, model.encode(x))
        for t in range(cfg.levels):
            dead = np.flatnonzero(~used[t])
            if len(dead):
                pick = rng.choice(n, size=len(dead), replace=len(dead) > n)
                model.codebooks[t][dead] = residuals[t][pick]
                ema_n[t][dead] = 1.0
                ema_s[t][dead] = residuals[t][pick]
        log.debug("rq-vae epoch %d recon %.5f dead %s", epoch, history[-1][1] if history else float("nan"),
                  [int((~u).sum()) for u in used])
    codes, qsum, _ = quantize(model.codebooks, model.encode(x))
    recon = float(np.mean((model.decode(qsum) - x) ** 2))
    util = [int(len(np.unique(codes[:, t]))) for t in range(cfg.levels)]
    return model, RqVaeReport(msr, recon, util, history)


# --------------------------------------------------------------------------
# catalogue assignment and files

def assign_catalog(model: RqVaeModel, embeddings: np.ndarray, item_ids=None):
    """Map every item to its SID and histogram bucket sizes for prefix lengths 1 and 2.

    Returns ``(sids, histogram)`` where ``sids`` maps item id -> code tuple and
    ``histogram[l]`` is a ``Counter`` of prefix -> bucket size.
    """
    codes = encode_batch(model, embeddings)
    ids = range(len(codes)) if item_ids is None else item_ids
    sids = {int(i): tuple(int(c) for c in row) for i, row in zip(ids, codes)}
    hist = {ell: Counter(s[:ell] for s in sids.values()) for ell in (1, 2) if ell <= model.levels}
    return sids, hist


def write_sids(path, sids: dict[int, tuple]) -> None:
    with open(path, "w") as fh:
        for i in sorted(sids):
            fh.write(f"{i}\t{','.join(map(str, sids[i]))}\n")


def read_sids(path) -> dict[int, tuple]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            i, codes = line.split("\t")
            out[int(i)] = tuple(int(c) for c in codes.split(","))
    return out


def sid_array(sids: dict[int, tuple], n_items: int) -> np.ndarray:
    out = np.full((n_items, len(next(iter(sids.values())))), -1, dtype=np.int64)
    for i, s in sids.items():
        out[i] = s
    return out


def save_model(model: RqVaeModel, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "codebooks.txt").write_text(
        f"L={model.levels}\nK={model.codebook_size}\nbeta={model.beta}\nlatent_dim={model.codebooks[0].shape[1]}\n")
    write_tensors(d / "codebooks.sgma", model.codebooks)
    write_tensors(d / "autoencoder.sgma", [model.enc_w, model.enc_b, model.dec_w, model.dec_b])


def load_model(directory) -> RqVaeModel:
    d = Path(directory)
    head = dict(line.split("=") for line in (d / "codebooks.txt").read_text().split())
    enc_w, enc_b, dec_w, dec_b = read_tensors(d / "autoencoder.sgma")
    return RqVaeModel(enc_w, enc_b, dec_w, dec_b, read_tensors(d / "codebooks.sgma"), float(head["beta"]))
