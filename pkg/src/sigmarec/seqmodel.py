"""Instruction-following sequence model over hybrid item tokens.

Prompt layout, left to right::

    <bos> age gender region | per history item: SID prefix tokens, <item> |
    <task:...> constraint tokens | target SID prefix | <query>

The logits at the token before each target SID position predict that level
(masked to the level's K codes); the final hidden state at ``<query>``
goes through a small head to give the retrieval vector ``h``.
"""

from __future__ import annotations

import copy
import hashlib
import logging
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensorio
from .numeric import OptimState, adamw_step, clip_grad_norm, logsumexp, make_rng, normalize_backward, normalize_rows
from .sft import InstructionSample  # noqa: F401  (re-exported)
from .tokenizer import FUSED_DIM, ItemStore, Vocabulary, fuse_backward, fuse_forward, init_fusion
from .nn import scatter_add_rows
from .transformer import BlockConfig, KvCache, blocks_backward, blocks_forward, init_blocks

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    max_len: int = 256
    levels: int = 4
    codebook_size: int = 256
    prefix_len: int = 1  # SID tokens generated before the ID step
    history_prefix_len: int = 1
    history_item: bool = True  # emit the fused ID row for history items
    fusion: str = "pretrained"  # or "free": a learned per-item table
    n_age: int = 6
    n_gender: int = 2
    n_region: int = 8
    n_query: int = 128
    n_category: int = 32
    n_season: int = 4
    n_holiday: int = 6

    def blocks(self) -> BlockConfig:
        return BlockConfig(self.d_model, self.n_heads, self.n_layers, self.d_ff, self.max_len)

    def vocabulary(self) -> Vocabulary:
        return Vocabulary(self.levels, self.codebook_size, n_age=self.n_age, n_gender=self.n_gender,
                          n_region=self.n_region, n_query=self.n_query, n_category=self.n_category,
                          n_season=self.n_season, n_holiday=self.n_holiday)


@dataclass
class SeqModel:
    config: ModelConfig
    params: dict[str, np.ndarray]
    store: ItemStore
    sids: np.ndarray  # (n_items, levels) codes
    vocab: Vocabulary = field(init=False)

    def __post_init__(self):
        self.vocab = self.config.vocabulary()
        if self.sids.shape[1] < max(self.config.prefix_len, self.config.history_prefix_len):
            raise ValueError("SID table is shorter than the configured prefix")

    @property
    def n_items(self) -> int:
        return len(self.sids)


def init_model(config: ModelConfig, store: ItemStore, sids: np.ndarray, seed: int = 0) -> SeqModel:
    if not 0 <= config.prefix_len <= config.levels:
        raise ValueError("prefix length outside 0..levels")
    rng = make_rng(seed, "seqmodel", "init")
    d = config.d_model
    vocab = config.vocabulary()
    p = init_blocks(rng, config.blocks())
    p["tok_emb"] = rng.normal(0.0, 1.0, (len(vocab), d))
    p["type_emb"] = rng.normal(0.0, 0.1, (4, d))
    p["pos_emb"] = rng.normal(0.0, 0.1, (config.max_len, d))
    p["head_w"] = rng.normal(0.0, 0.02, (d, config.levels * config.codebook_size))
    p["head_b"] = np.zeros(config.levels * config.codebook_size)
    p["qh_w"] = rng.normal(0.0, 1.0 / np.sqrt(d), (d, FUSED_DIM))
    p["qh_b"] = np.zeros(FUSED_DIM)
    p.update(init_fusion(rng, store.dims, d, store.n_items, config.fusion))
    return SeqModel(config, p, store, np.asarray(sids, dtype=np.int64))


# --------------------------------------------------------------------------
# prompt assembly

def item_tokens(model: SeqModel, item: int, ell: int, with_item: bool) -> tuple[list[int], list[int]]:
    codes = model.sids[item]
    toks = [model.vocab.sid_token(t + 1, int(codes[t])) for t in range(ell)]
    items = [-1] * ell
    if with_item:
        toks.append(model.vocab.item)
        items.append(int(item))
    return toks, items


def context_tokens(model: SeqModel, profile, history) -> tuple[list[int], list[int]]:
    """Profile and history part of the prompt (what nearline serving caches)."""
    v, cfg = model.vocab, model.config
    toks = [v.bos, v.attr("age", profile[0]), v.attr("gender", profile[1]), v.attr("region", profile[2])]
    items = [-1] * 4
    for it in history:
        t, i = item_tokens(model, int(it), cfg.history_prefix_len, cfg.history_item)
        toks += t
        items += i
    return toks, items


def instruction_tokens(model: SeqModel, task: str, constraints) -> list[int]:
    return [model.vocab.task(task)] + [model.vocab.attr(g, v) for g, v in constraints]


def prompt_tokens(model: SeqModel, sample: InstructionSample) -> tuple[list[int], list[int]]:
    """Tokens and item slots up to (not including) the first target SID.

    The oldest history items are dropped if the full sequence would not fit.
    """
    cfg = model.config
    per_item = cfg.history_prefix_len + int(cfg.history_item)
    fixed = 4 + 1 + len(sample.constraints) + cfg.prefix_len + 1
    room = (cfg.max_len - fixed) // max(per_item, 1)
    history = sample.history[-room:] if room > 0 else ()
    toks, items = context_tokens(model, sample.profile, history)
    ins = instruction_tokens(model, sample.task, sample.constraints)
    return toks + ins, items + [-1] * len(ins)


def target_tokens(model: SeqModel, item: int) -> list[int]:
    codes = model.sids[item]
    return [model.vocab.sid_token(t + 1, int(codes[t])) for t in range(model.config.prefix_len)]


# --------------------------------------------------------------------------
# forward

def _inputs(model: SeqModel, tokens: np.ndarray, rows: np.ndarray, up: np.ndarray, start: int) -> np.ndarray:
    """Input rows: token lookups, item slots from ``up[rows]``, plus type and position."""
    p = model.params
    x = p["tok_emb"][tokens]
    slot = rows >= 0
    if slot.any():
        x[slot] = up[rows[slot]]
    t = tokens.shape[1]
    return x + p["type_emb"][model.vocab.roles(tokens)] + p["pos_emb"][start:start + t]


def _fused_up(model: SeqModel, items: np.ndarray):
    uniq, inv = np.unique(items[items >= 0], return_inverse=True)
    rows = np.full(items.shape, -1, dtype=np.int64)
    rows[items >= 0] = inv
    if len(uniq):
        fused, _ = fuse_forward(model.params, model.store, uniq)
        up = fused @ model.params["fuse/up_w"] + model.params["fuse/up_b"]
    else:
        up = np.zeros((0, model.config.d_model))
    return rows, up


def forward(model: SeqModel, tokens, items=None, cache: KvCache | None = None, logits: bool = True):
    """Run ``tokens`` (B, T) after the prefix held in ``cache``.

    ``items`` gives the item id at every ``<item>`` slot and -1 elsewhere.
    Returns ``(hidden, sid_logits, new_cache)``; ``sid_logits`` spans all
    L*K SID entries, level t occupying columns (t-1)*K..t*K-1.
    """
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    items = np.full(tokens.shape, -1, np.int64) if items is None else np.atleast_2d(np.asarray(items, np.int64))
    if items.shape != tokens.shape:
        raise ValueError("items must align with tokens")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= len(model.vocab)):
        raise ValueError("token id outside the vocabulary")
    if np.any((tokens == model.vocab.item) != (items >= 0)):
        raise ValueError("every <item> slot needs an item id and nothing else may carry one")
    start = cache.length if cache is not None else 0
    if start + tokens.shape[1] > model.config.max_len:
        raise ValueError(f"sequence length {start + tokens.shape[1]} exceeds the maximum {model.config.max_len}")
    rows, up = _fused_up(model, items)
    x = _inputs(model, tokens, rows, up, start)
    hidden, new_cache, _ = blocks_forward(model.params, model.config.blocks(), x, cache)
    out = hidden @ model.params["head_w"] + model.params["head_b"] if logits else None
    return hidden, out, new_cache


def level_logits(model: SeqModel, hidden: np.ndarray, level: int) -> np.ndarray:
    k = model.config.codebook_size
    sl = slice((level - 1) * k, level * k)
    return hidden @ model.params["head_w"][:, sl] + model.params["head_b"][sl]


def query_vector(model: SeqModel, hidden: np.ndarray) -> np.ndarray:
    return hidden @ model.params["qh_w"] + model.params["qh_b"]


# --------------------------------------------------------------------------
# losses

def level_nll(logits: np.ndarray, codes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row negative log-likelihood of ``codes`` and d(nll)/d(logits)."""
    lse = logsumexp(logits, axis=-1, keepdims=True)
    logp = logits - lse
    rows = np.arange(len(codes))
    nll = -logp[rows, codes]
    d = np.exp(logp)
    d[rows, codes] -= 1.0
    return nll, d


def ntp_loss(model: SeqModel, sample: InstructionSample) -> float:
    """Mean level-masked NLL over the target's SID prefix tokens."""
    ell = model.config.prefix_len
    if ell == 0:
        return 0.0
    toks, items = prompt_tokens(model, sample)
    tgt = target_tokens(model, sample.target)
    hidden, _, _ = forward(model, [toks + tgt[:-1]], [items + [-1] * (ell - 1)], logits=False)
    pos = len(toks) - 1 + np.arange(ell)
    codes = model.sids[sample.target, :ell]
    total = 0.0
    for t in range(ell):
        nll, _ = level_nll(level_logits(model, hidden[0, pos[t]][None], t + 1), codes[t:t + 1])
        total += float(nll[0])
    return total / ell


def masked_infonce(h: np.ndarray, cand: np.ndarray, mask: np.ndarray, target: np.ndarray, tau: float):
    """Batched InfoNCE over cosine logits; each row sees only its ``mask`` columns.

    Returns ``(loss, d_h, d_cand)`` with the loss averaged over rows.
    """
    hn, hnorm = normalize_rows(h)
    cn, cnorm = normalize_rows(cand)
    s = (hn @ cn.T) / tau
    s_m = np.where(mask, s, -np.inf)
    lse = logsumexp(s_m, axis=1, keepdims=True)
    rows = np.arange(len(h))
    loss_rows = lse[:, 0] - s[rows, target]
    p = np.where(mask, np.exp(s_m - lse), 0.0)
    p[rows, target] -= 1.0
    ds = p / (len(h) * tau)
    d_hn = ds @ cn
    d_cn = ds.T @ hn
    return float(loss_rows.mean()), normalize_backward(hn, hnorm, d_hn), normalize_backward(cn, cnorm, d_cn)


def id_infonce_loss(h: np.ndarray, target: np.ndarray, negatives: np.ndarray, tau: float = 0.05):
    """InfoNCE of one query against its target and negatives.

    Returns ``(loss, d_h, d_target, d_negatives)``.
    """
    negatives = np.asarray(negatives, dtype=np.float64).reshape(-1, len(target))
    if len(negatives) == 0:
        warnings.warn("empty negative set; InfoNCE is degenerate", RuntimeWarning, stacklevel=2)
        return 0.0, np.zeros_like(h, dtype=np.float64), np.zeros_like(target, dtype=np.float64), negatives.copy()
    cand = np.vstack([np.asarray(target, float)[None], negatives])
    mask = np.ones((1, len(cand)), dtype=bool)
    loss, dh, dc = masked_infonce(np.asarray(h, float)[None], cand, mask, np.array([0]), tau)
    return loss, dh[0], dc[0], dc[1:]


# --------------------------------------------------------------------------
# negatives

def sample_hard_negatives(buckets, target: int, n: int, seed) -> tuple[np.ndarray, bool]:
    """``n`` negatives from the target's prefix bucket, topped up globally.

    ``buckets`` is anything with ``prefix_of(item)``, ``members(prefix)`` and
    ``n_items``.  The flag is set when the bucket could not supply all ``n``.
    """
    rng = make_rng(*np.atleast_1d(seed).tolist(), "hard-negatives", int(target))
    members = buckets.members(buckets.prefix_of(target))
    others = members[members != target]
    if len(others) >= n:
        return np.sort(rng.choice(others, n, replace=False)), False
    pool = np.setdiff1d(np.arange(buckets.n_items), np.append(others, target))
    extra = rng.choice(pool, min(n - len(others), len(pool)), replace=False)
    return np.concatenate([others, np.sort(extra)]), True


class SidBuckets:
    """Prefix membership without embeddings, for negative sampling."""

    def __init__(self, sids: np.ndarray, ell: int):
        self.ell = ell
        self._prefix = [tuple(r) for r in np.asarray(sids)[:, :ell].tolist()]
        groups: dict[tuple, list[int]] = {}
        for i, p in enumerate(self._prefix):
            groups.setdefault(p, []).append(i)
        self._members = {p: np.array(v, dtype=np.int64) for p, v in groups.items()}

    @property
    def n_items(self) -> int:
        return len(self._prefix)

    def prefix_of(self, item: int) -> tuple:
        return self._prefix[int(item)]

    def members(self, prefix) -> np.ndarray:
        return self._members.get(tuple(prefix), np.zeros(0, dtype=np.int64))


# --------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class SftConfig:
    steps: int = 600
    batch_size: int = 64
    lr: float = 2e-3
    weight_decay: float = 0.01
    warmup: int = 30
    clip: float = 1.0
    w_ntp: float = 1.0
    w_id: float = 1.0
    tau: float = 0.05
    negatives: int = 256  # per-sample cap on prefix-bucket negatives
    shared_pool: int = 128  # global negatives shared by the whole batch
    negative_mode: str = "prefix"  # or "global": the shared pool only, of size ``negatives``
    update_candidates: bool = True  # let the ID loss move target and negative embeddings
    compute_dtype: str = "float32"  # forward/backward precision; master weights stay float64
    seed: int = 0


@dataclass
class Batch:
    tokens: np.ndarray
    rows: np.ndarray  # index into ``uniq`` at item slots, else -1
    uniq: np.ndarray
    ntp_pos: np.ndarray  # (B, ell)
    ntp_codes: np.ndarray  # (B, ell)
    q_pos: np.ndarray  # (B,)
    target_col: np.ndarray
    mask: np.ndarray  # (B, U) candidate columns per row


def make_batch(model: SeqModel, samples: list[InstructionSample], negatives: list[np.ndarray]) -> Batch:
    ell = model.config.prefix_len
    seqs, slots, ntp_pos, q_pos = [], [], [], []
    for s in samples:
        toks, items = prompt_tokens(model, s)
        p = len(toks)
        seq = toks + target_tokens(model, s.target) + [model.vocab.query]
        seqs.append(seq)
        slots.append(items + [-1] * (ell + 1))
        ntp_pos.append(p - 1 + np.arange(ell))
        q_pos.append(p + ell)
    t = max(len(s) for s in seqs)
    b = len(samples)
    tokens = np.full((b, t), model.vocab.pad, dtype=np.int64)
    items = np.full((b, t), -1, dtype=np.int64)
    for i, (s, it) in enumerate(zip(seqs, slots)):
        tokens[i, :len(s)] = s
        items[i, :len(it)] = it
    targets = np.array([s.target for s in samples], dtype=np.int64)
    uniq = np.unique(np.concatenate([items[items >= 0], targets] + [np.asarray(n, np.int64) for n in negatives]))
    rows = np.where(items >= 0, np.searchsorted(uniq, items), -1)
    mask = np.zeros((b, len(uniq)), dtype=bool)
    tcol = np.searchsorted(uniq, targets)
    for i, n in enumerate(negatives):
        mask[i, np.searchsorted(uniq, np.asarray(n, np.int64))] = True
    mask[np.arange(b), tcol] = True
    return Batch(tokens, rows, uniq, np.array(ntp_pos, dtype=np.int64).reshape(b, ell),
                 model.sids[targets, :ell], np.array(q_pos), tcol, mask)


def batch_objective(model: SeqModel, batch: Batch, cfg: SftConfig, need_grad: bool = True):
    """Weighted NTP + ID InfoNCE on one batch.  Returns (loss, (ntp, id), grads)."""
    p, mc = model.params, model.config
    bsz = len(batch.tokens)
    ell = mc.prefix_len
    fused, fcache = fuse_forward(p, model.store, batch.uniq)
    up = fused @ p["fuse/up_w"] + p["fuse/up_b"]
    x = _inputs(model, batch.tokens, batch.rows, up, 0)
    hidden, _, acts = blocks_forward(p, mc.blocks(), x, keep=need_grad)
    d_hidden = np.zeros_like(hidden) if need_grad else None
    grads: dict[str, np.ndarray] = {}

    ntp = 0.0
    if ell and cfg.w_ntp:
        k = mc.codebook_size
        g_w = np.zeros_like(p["head_w"])
        g_b = np.zeros_like(p["head_b"])
        for t in range(ell):
            hrow = hidden[np.arange(bsz), batch.ntp_pos[:, t]]
            nll, d = level_nll(level_logits(model, hrow, t + 1), batch.ntp_codes[:, t])
            ntp += float(nll.mean()) / ell
            if need_grad:
                d *= cfg.w_ntp / (bsz * ell)
                sl = slice(t * k, (t + 1) * k)
                g_w[:, sl] += hrow.T @ d
                g_b[sl] += d.sum(axis=0)
                d_hidden[np.arange(bsz), batch.ntp_pos[:, t]] += d @ p["head_w"][:, sl].T
        grads["head_w"], grads["head_b"] = g_w, g_b

    idl = 0.0
    d_fused = np.zeros_like(fused)
    if cfg.w_id:
        hq_in = hidden[np.arange(bsz), batch.q_pos]
        hq = query_vector(model, hq_in)
        idl, d_hq, d_cand = masked_infonce(hq, fused, batch.mask, batch.target_col, cfg.tau)
        if need_grad:
            d_hq *= cfg.w_id
            grads["qh_w"] = hq_in.T @ d_hq
            grads["qh_b"] = d_hq.sum(axis=0)
            d_hidden[np.arange(bsz), batch.q_pos] += d_hq @ p["qh_w"].T
            if cfg.update_candidates:
                d_fused += cfg.w_id * d_cand

    loss = cfg.w_ntp * ntp + cfg.w_id * idl
    if not need_grad:
        return loss, (ntp, idl), None
    dx = blocks_backward(p, mc.blocks(), d_hidden, acts, grads)
    slot = batch.rows >= 0
    grads["tok_emb"] = scatter_add_rows(batch.tokens[~slot], dx[~slot], len(p["tok_emb"]))
    grads["type_emb"] = scatter_add_rows(model.vocab.roles(batch.tokens), dx, len(p["type_emb"]))
    g_pos = np.zeros_like(p["pos_emb"])
    g_pos[:dx.shape[1]] = dx.sum(axis=0)
    grads["pos_emb"] = g_pos
    d_up = scatter_add_rows(batch.rows[slot], dx[slot], len(up))
    grads["fuse/up_w"] = fused.T @ d_up
    grads["fuse/up_b"] = d_up.sum(axis=0)
    d_fused += d_up @ p["fuse/up_w"].T
    fuse_backward(p, d_fused, fcache, grads)
    return loss, (ntp, idl), grads


def batch_negatives(model: SeqModel, buckets: SidBuckets | None, samples, cfg: SftConfig,
                    rng: np.random.Generator) -> list[np.ndarray]:
    """Per-sample prefix-bucket negatives plus one shared global pool."""
    n_items = model.n_items
    if cfg.negative_mode == "global" or buckets is None:
        pool = rng.choice(n_items, min(cfg.negatives, n_items), replace=False)
        return [pool[pool != s.target] for s in samples]
    if cfg.negative_mode != "prefix":
        raise ValueError(f"unknown negative mode {cfg.negative_mode!r}")
    pool = rng.choice(n_items, min(cfg.shared_pool, n_items), replace=False)
    out = []
    for s in samples:
        members = buckets.members(buckets.prefix_of(s.target))
        others = members[members != s.target]
        if len(others) > cfg.negatives:
            others = rng.choice(others, cfg.negatives, replace=False)
        out.append(np.union1d(others, pool[pool != s.target]))
    return out


@dataclass
class SftReport:
    history: list[tuple[int, float, float, float]] = field(default_factory=list)  # step, loss, ntp, id
    aborted: bool = False


class TrainingAborted(FloatingPointError):
    def __init__(self, msg: str, model: SeqModel, report: SftReport):
        super().__init__(msg)
        self.model = model
        self.report = report


def sft_train(model: SeqModel, dataset: list[InstructionSample], config: SftConfig | None = None,
              checkpoint_dir=None) -> tuple[SeqModel, SftReport]:
    """Optimise the weighted NTP + InfoNCE objective with AdamW.

    A non-finite loss aborts with ``TrainingAborted`` carrying the model as
    of the last finite step (also written to ``checkpoint_dir`` if given).
    """
    cfg = config or SftConfig()
    if not dataset:
        raise ValueError("empty SFT dataset")
    model = copy.deepcopy(model)
    report = SftReport()
    if cfg.steps == 0:
        return model, report
    ell = model.config.prefix_len
    buckets = SidBuckets(model.sids, ell) if ell > 0 else None
    rng = make_rng(cfg.seed, "sft-train")
    state = OptimState(cfg.lr, weight_decay=cfg.weight_decay, warmup_steps=cfg.warmup,
                       no_decay=frozenset(k for k in model.params if k.endswith(("_b", "_g", "/b1", "/b2"))
                                          or k in ("type_emb", "pos_emb")))
    order = rng.permutation(len(dataset))
    cursor = 0
    good = copy.deepcopy(model.params)
    dtype = np.dtype(cfg.compute_dtype)
    work = copy.copy(model)
    for step in range(1, cfg.steps + 1):
        if cursor + cfg.batch_size > len(order):
            order = rng.permutation(len(dataset))
            cursor = 0
        samples = [dataset[i] for i in order[cursor:cursor + cfg.batch_size]]
        cursor += cfg.batch_size
        negs = batch_negatives(model, buckets, samples, cfg, rng)
        batch = make_batch(model, samples, negs)
        work.params = {k: v.astype(dtype) for k, v in model.params.items()}
        loss, (ntp, idl), grads = batch_objective(work, batch, cfg)
        grads = {k: g.astype(np.float64) for k, g in grads.items()}
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            model.params = good
            report.aborted = True
            if checkpoint_dir is not None:
                save_checkpoint(model, checkpoint_dir)
            raise TrainingAborted(f"non-finite loss at step {step}", model, report)
        good = {k: v.copy() for k, v in model.params.items()}
        clip_grad_norm(grads, cfg.clip)
        adamw_step(model.params, grads, state)
        report.history.append((step, loss, ntp, idl))
        if step % 100 == 0:
            log.info("sft step %d loss %.4f ntp %.4f id %.4f", step, loss, ntp, idl)
    if checkpoint_dir is not None:
        save_checkpoint(model, checkpoint_dir)
    return model, report


# --------------------------------------------------------------------------
# checkpoints

def vocab_hash(vocab: Vocabulary) -> str:
    text = "".join(f"{vocab.name(t)}\n" for t in range(len(vocab)))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def save_checkpoint(model: SeqModel, directory) -> None:
    d = Path(directory)
    manifest = {f"config.{k}": v for k, v in asdict(model.config).items()}
    manifest.update({"vocab_hash": vocab_hash(model.vocab), "ell": model.config.prefix_len,
                     "L": model.config.levels, "K": model.config.codebook_size})
    tensorio.save_params(d, model.params, manifest)
    tensorio.write_tensor(d / "sids.sgma", model.sids.astype(np.float64))
    model.vocab.write_manifest(d / "vocab.txt")


def load_checkpoint(directory, store: ItemStore) -> SeqModel:
    d = Path(directory)
    params, manifest = tensorio.load_params(d)
    kwargs = {}
    for f in fields(ModelConfig):
        raw = manifest[f"config.{f.name}"]
        kwargs[f.name] = (raw == "True") if f.type in (bool, "bool") else type(f.default)(raw)
    config = ModelConfig(**kwargs)
    sids = tensorio.read_tensor(d / "sids.sgma").astype(np.int64)
    model = SeqModel(config, params, store, sids)
    if manifest["vocab_hash"] != vocab_hash(model.vocab):
        raise ValueError("checkpoint vocabulary does not match its configuration")
    return model
