"""Three-step item generation: SID prefixes, per-prefix retrieval, fusion.

1. Beam search proposes K prefixes with cumulative log-probabilities phi.
2. Each prefix is followed by ``<query>``; that hidden state (through the
   query head) searches the prefix's bucket by cosine.
3. Within a bucket, item probabilities are a softmax of cosine * sigma / tau
   where sigma is the spread of the K beam scores; an item's final score is
   exp(phi) times its in-bucket probability.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .index import EMPTY_BUCKET, PrefixIndex, ann_query
from .numeric import log_softmax
from .seqmodel import SeqModel, forward, level_logits, prompt_tokens, query_vector
from .sft import InstructionSample
from .transformer import KvCache

SIGMA_FLOOR = 1e-6


@dataclass
class BeamCandidate:
    prefix: tuple[int, ...]  # SID codes, one per level
    phi: float
    h: np.ndarray | None = None


@dataclass
class BeamSearchResult:
    beams: list[BeamCandidate]
    truncated: bool = False  # fewer reachable prefixes than requested


@dataclass(frozen=True)
class GenerationConfig:
    beams: int = 16
    per_beam: int = 50  # M
    top_n: int = 20
    tau: float = 0.05
    sigma_floor: bool = True
    renormalize_beams: bool = False
    exact_beams: bool = True  # certify the beam against exhaustive search
    ann_mode: str = "exact"
    top_prefix_only: bool = False  # ablation: all N candidates from the best prefix's bucket


@dataclass
class GenerationResult:
    items: np.ndarray
    probs: np.ndarray
    beam: np.ndarray  # index into ``beams`` for each returned item
    beams: list[BeamCandidate]
    sigma: float
    counts: list[int]  # candidates retrieved per beam
    config: GenerationConfig
    status: str = "ok"
    total_mass: float = 0.0  # sum over every scored candidate of every beam


@dataclass
class PromptState:
    """A processed prompt: its cache and the final hidden state."""

    cache: KvCache
    last: np.ndarray  # (d,)


def encode_prompt(model: SeqModel, tokens, items=None, cache: KvCache | None = None) -> PromptState:
    tokens = list(tokens)
    if not tokens:
        raise ValueError("empty prompt")
    items = [-1] * len(tokens) if items is None else list(items)
    hidden, _, new_cache = forward(model, [tokens], [items], cache, logits=False)
    return PromptState(new_cache, hidden[0, -1])


def _as_state(model: SeqModel, prompt) -> PromptState:
    if isinstance(prompt, PromptState):
        return prompt
    if isinstance(prompt, InstructionSample):
        return encode_prompt(model, *prompt_tokens(model, prompt))
    toks, items = prompt
    return encode_prompt(model, toks, items)


def _extend(model: SeqModel, state: PromptState, prefixes: list[tuple[int, ...]], with_query: bool = False):
    """Hidden states after appending each prefix (and optionally ``<query>``)."""
    if not prefixes:
        return np.zeros((0, model.config.d_model))
    n = len(prefixes[0])
    if n == 0 and not with_query:
        return np.repeat(state.last[None], len(prefixes), axis=0)
    v = model.vocab
    toks = np.array([[v.sid_token(t + 1, c) for t, c in enumerate(p)] + ([v.query] if with_query else [])
                     for p in prefixes], dtype=np.int64).reshape(len(prefixes), -1)
    hidden, _, _ = forward(model, toks, None, state.cache.repeat(len(prefixes)), logits=False)
    return hidden[:, -1]


def _top(prefixes: list[tuple[int, ...]], phi: np.ndarray, k: int) -> list[int]:
    """Indices of the best ``k`` by phi descending, ties by lexicographic prefix."""
    order = sorted(range(len(prefixes)), key=lambda i: (-phi[i], prefixes[i]))
    return order[:k]


def _expand(model: SeqModel, state: PromptState, prefixes, phis, level: int):
    hidden = _extend(model, state, prefixes)
    logp = log_softmax(level_logits(model, hidden, level), axis=-1)
    kc = model.config.codebook_size
    new_p = [p + (c,) for p in prefixes for c in range(kc)]
    new_phi = (np.asarray(phis)[:, None] + logp).reshape(-1)
    return new_p, new_phi


def beam_search(model: SeqModel, prompt, k: int, ell: int | None = None, exact: bool = True) -> BeamSearchResult:
    """Width-``k`` beam over level-masked SID logits.

    With ``exact`` the beam's k-th score becomes a lower bound and every
    partial prefix at or above it is expanded, so the returned set is the
    true top-k.  Scores only fall as prefixes grow, which is what makes the
    bound safe.
    """
    ell = model.config.prefix_len if ell is None else ell
    if k < 1:
        raise ValueError("beam width must be at least 1")
    if not 1 <= ell <= model.config.levels:
        raise ValueError("prefix length outside 1..levels")
    state = _as_state(model, prompt)
    reachable = model.config.codebook_size ** ell
    truncated = k > reachable
    k = min(k, reachable)
    prefixes: list[tuple[int, ...]] = [()]
    phis = np.zeros(1)
    for level in range(1, ell + 1):
        cand, cphi = _expand(model, state, prefixes, phis, level)
        keep = _top(cand, cphi, k)
        prefixes = [cand[i] for i in keep]
        phis = cphi[keep]
    if exact and ell > 1:
        bound = phis[-1]
        prefixes, phis = [()], np.zeros(1)
        for level in range(1, ell + 1):
            cand, cphi = _expand(model, state, prefixes, phis, level)
            keep = np.flatnonzero(cphi >= bound)
            prefixes = [cand[i] for i in keep]
            phis = cphi[keep]
        keep = _top(prefixes, phis, k)
        prefixes, phis = [prefixes[i] for i in keep], phis[keep]
    return BeamSearchResult([BeamCandidate(p, float(f)) for p, f in zip(prefixes, phis)], truncated)


def exhaustive_prefixes(model: SeqModel, tokens, items, ell: int) -> tuple[list[tuple[int, ...]], np.ndarray]:
    """Every length-``ell`` prefix with its score, each from a cold forward pass."""
    kc = model.config.codebook_size
    v = model.vocab
    prefixes = [tuple(int(x) for x in np.unravel_index(i, (kc,) * ell)) for i in range(kc ** ell)]
    phis = np.zeros(len(prefixes))
    start = len(tokens) - 1
    for i, p in enumerate(prefixes):
        seq = list(tokens) + [v.sid_token(t + 1, c) for t, c in enumerate(p[:-1])]
        hidden, _, _ = forward(model, [seq], [list(items) + [-1] * (ell - 1)], logits=False)
        for t in range(ell):
            phis[i] += log_softmax(level_logits(model, hidden[0, start + t], t + 1))[p[t]]
    return prefixes, phis


def prefix_hidden_state(model: SeqModel, prompt, prefixes) -> np.ndarray:
    """Query vectors h_k for each prefix, all beams sharing the prompt's cache."""
    state = _as_state(model, prompt)
    prefixes = [tuple(int(c) for c in p) for p in prefixes]
    hidden = _extend(model, state, prefixes, with_query=True)
    return query_vector(model, hidden)


def apf_id_distribution(cosines, beam_scores, tau: float = 0.05, sigma_floor: bool = True) -> np.ndarray:
    """Softmax over a bucket of cos * sigma / tau, sigma the population std of beam scores."""
    cos = np.asarray(cosines, dtype=np.float64)
    if cos.size == 0:
        raise ValueError("empty bucket")
    if not tau > 0:
        raise ValueError("tau must be positive")
    sigma = beam_sigma(beam_scores, sigma_floor)
    z = cos * (sigma / tau)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def beam_sigma(beam_scores, floor: bool = True) -> float:
    s = float(np.std(np.asarray(beam_scores, dtype=np.float64)))
    return max(s, SIGMA_FLOOR) if floor else s


def generate(model: SeqModel, index: PrefixIndex, prompt, config: GenerationConfig | None = None) -> GenerationResult:
    cfg = config or GenerationConfig()
    ell = model.config.prefix_len
    if index.ell != ell:
        raise ValueError(f"index prefix length {index.ell} does not match the model's {ell}")
    if cfg.top_n > cfg.beams * cfg.per_beam:
        raise ValueError("N must not exceed K * M")
    state = _as_state(model, prompt)
    found = beam_search(model, state, cfg.beams, ell, exact=cfg.exact_beams)
    beams = found.beams
    phis = np.array([b.phi for b in beams])
    hs = prefix_hidden_state(model, state, [b.prefix for b in beams])
    sigma = beam_sigma(phis, cfg.sigma_floor)
    weights = np.exp(phis)
    if cfg.renormalize_beams:
        weights = weights / weights.sum()
    items, probs, beam_of, counts = [], [], [], []
    total = 0.0
    active = [0] if cfg.top_prefix_only else range(len(beams))
    m = cfg.top_n if cfg.top_prefix_only else cfg.per_beam
    for k, b in enumerate(beams):
        b.h = hs[k]
    for k in active:
        b = beams[k]
        res = ann_query(index, b.prefix, hs[k], m, cfg.ann_mode)
        if res.status == EMPTY_BUCKET:
            counts.append(0)
            continue
        if res.bucket_scores is None:  # approximate retrieval: normaliser still spans the bucket
            full = ann_query(index, b.prefix, hs[k], len(index.buckets[tuple(b.prefix)]))
            bucket_items, bucket_cos = full.bucket_items, full.bucket_scores
        else:
            bucket_items, bucket_cos = res.bucket_items, res.bucket_scores
        z = bucket_cos * (sigma / cfg.tau)
        z = z - z.max()
        p_bucket = np.exp(z) / np.exp(z).sum()
        pos = np.searchsorted(bucket_items, res.items)
        p = weights[k] * p_bucket[pos]
        total += float(weights[k] * p_bucket.sum())
        items.append(res.items)
        probs.append(p)
        beam_of.append(np.full(len(res.items), k))
        counts.append(len(res.items))
    if not items:
        z = np.zeros(0)
        return GenerationResult(z.astype(np.int64), z, z.astype(np.int64), beams, sigma, counts, cfg,
                                "all buckets empty", 0.0)
    items_a = np.concatenate(items)
    probs_a = np.concatenate(probs)
    beam_a = np.concatenate(beam_of)
    order = np.lexsort((items_a, -probs_a))[: cfg.top_n]
    return GenerationResult(items_a[order], probs_a[order], beam_a[order], beams, sigma, counts, cfg,
                            "ok", total)


def format_result(result: GenerationResult) -> str:
    lines = []
    for r, (it, p, k) in enumerate(zip(result.items, result.probs, result.beam), start=1):
        b = result.beams[int(k)]
        lines.append(f"{r}\t{int(it)}\t{float(p)!r}\t{','.join(map(str, b.prefix))}\t{b.phi!r}")
    c = result.config
    lines.append(f"# sigma={result.sigma!r} K={c.beams} M={c.per_beam} N={c.top_n} tau={c.tau} "
                 f"status={result.status} per_beam={','.join(map(str, result.counts))}")
    return "\n".join(lines) + "\n"


def parse_result(text: str) -> list[tuple[int, int, float, tuple[int, ...], float]]:
    rows = []
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        r, it, p, pre, phi = line.split("\t")
        rows.append((int(r), int(it), float(p), tuple(int(c) for c in pre.split(",")), float(phi)))
    return rows
