"""Multi-view grounding of item representations.

Relevance pairs from four views (semantic, visual, knowledge, collaborative)
train a small item encoder with an in-batch InfoNCE objective, while a
distillation term pulls the in-batch similarity distribution of the encoder
towards that of behavioural ID embeddings.

Batch layout convention used throughout: a batch of ``B`` pairs is stacked
as a ``(2B, d)`` array whose rows ``0..B-1`` are anchors and rows
``B..2B-1`` the matching positives, so row ``i`` pairs with
``(i + B) % 2B`` (0-based).
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .numeric import OptimState, adamw_step, clip_grad_norm, log_softmax, make_rng, normalize_backward, normalize_rows
from .tensorio import read_tensor, write_tensor
from .world import World

log = logging.getLogger(__name__)

TEXT_DIM = 64


class View(str, enum.Enum):
    SEMANTIC = "Semantic"
    VISUAL = "Visual"
    KNOWLEDGE = "Knowledge"
    COLLABORATIVE = "Collaborative"


@dataclass(frozen=True)
class RelevancePair:
    anchor: int
    positive: int
    view: View


@dataclass
class GroundingBatch:
    """``text`` and ``teacher`` are (2B, d) arrays in anchor/positive order."""

    pairs: list[RelevancePair]
    text: np.ndarray
    teacher: np.ndarray | None = None

    @property
    def size(self) -> int:
        return len(self.pairs)


# --------------------------------------------------------------------------
# pair construction

def _within_group_pairs(rng, groups: list[np.ndarray], count: int, view: View) -> list[RelevancePair]:
    if count == 0:
        return []
    if not groups:
        raise ValueError(f"no item group with >= 2 members for view {view.value}")
    # pick a group with probability proportional to its number of ordered pairs
    sizes = np.array([len(g) for g in groups], dtype=np.float64)
    w = sizes * (sizes - 1)
    gi = rng.choice(len(groups), size=count, p=w / w.sum())
    out = []
    for g in gi:
        members = groups[g]
        a, b = rng.choice(len(members), size=2, replace=False)
        out.append(RelevancePair(int(members[a]), int(members[b]), view))
    return out


def session_pairs(world: World, max_gap: int = 1800) -> np.ndarray:
    """All (item, next item) pairs of one user within ``max_gap`` seconds."""
    out = []
    for ev in world.user_events():
        if len(ev) < 2:
            continue
        t, it = world.ev_time[ev], world.ev_item[ev]
        ok = (np.diff(t) <= max_gap) & (it[1:] != it[:-1])
        out.append(np.stack([it[:-1][ok], it[1:][ok]], axis=1))
    return np.concatenate(out) if out else np.zeros((0, 2), dtype=np.int64)


def build_relevance_pairs(world: World, view_mix: dict, seed: int = 0) -> list[RelevancePair]:
    """Sample relevance pairs for each view.

    * Semantic: both items in the same style (the "query" cluster).
    * Visual: same style, both items carry an image embedding.
    * Knowledge: both items share a season or a holiday theme.
    * Collaborative: consecutive items of one user session.
    """
    if world.n_items == 0:
        raise ValueError("empty catalogue")
    mix = {View(k): int(v) for k, v in view_mix.items()}
    if any(v < 0 for v in mix.values()):
        raise ValueError("pair counts must be >= 0")
    pairs: list[RelevancePair] = []
    for view in View:
        n = mix.get(view, 0)
        if n == 0:
            continue
        rng = make_rng(seed, "pairs", view.value)
        if view is View.SEMANTIC:
            pairs += _within_group_pairs(rng, _label_groups(world.style), n, view)
        elif view is View.VISUAL:
            pairs += _within_group_pairs(rng, _label_groups(world.style, world.has_img), n, view)
        elif view is View.KNOWLEDGE:
            theme = np.where(world.holiday >= 0, 1000 + world.holiday, world.season)
            pairs += _within_group_pairs(rng, _label_groups(theme, theme >= 0), n, view)
        else:
            sp = session_pairs(world)
            if len(sp) == 0:
                raise ValueError("no co-occurring session items for view Collaborative")
            pick = rng.integers(0, len(sp), n)
            pairs += [RelevancePair(int(sp[k, 0]), int(sp[k, 1]), view) for k in pick]
    return pairs


def _label_groups(labels: np.ndarray, mask: np.ndarray | None = None) -> list[np.ndarray]:
    idx = np.arange(len(labels)) if mask is None else np.flatnonzero(mask)
    lab = labels[idx]
    order = np.argsort(lab, kind="stable")
    idx, lab = idx[order], lab[order]
    cuts = np.flatnonzero(np.diff(lab)) + 1
    return [g for g in np.split(idx, cuts) if len(g) >= 2]


def pair_satisfies_view(world: World, pair: RelevancePair, co_items: set | None = None) -> bool:
    a, p = pair.anchor, pair.positive
    if a == p:
        return False
    if pair.view is View.SEMANTIC:
        return world.style[a] == world.style[p]
    if pair.view is View.VISUAL:
        return world.style[a] == world.style[p] and world.has_img[a] and world.has_img[p]
    if pair.view is View.KNOWLEDGE:
        return ((world.season[a] >= 0 and world.season[a] == world.season[p])
                or (world.holiday[a] >= 0 and world.holiday[a] == world.holiday[p]))
    return co_items is not None and (a, p) in co_items


def write_pairs(path, pairs: list[RelevancePair]) -> None:
    with open(path, "w") as fh:
        for p in pairs:
            fh.write(f"{p.anchor}\t{p.positive}\t{p.view.value}\n")


def read_pairs(path) -> list[RelevancePair]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            a, p, v = line.split("\t")
            out.append(RelevancePair(int(a), int(p), View(v)))
    return out


# --------------------------------------------------------------------------
# losses

def partner_index(i: int, b: int) -> int:
    return (i + b) % (2 * b)


def similarity_logprobs(emb: np.ndarray, tau: float):
    """Row-wise log of the in-batch probability matrix.

    Entry ``[i, j]`` is ``log P(i, j)``: a softmax over ``k != i`` of
    ``cos(e_i, e_k) / tau``.  The diagonal is ``-inf``.
    """
    unit, norms = normalize_rows(emb)
    s = unit @ unit.T / tau
    np.fill_diagonal(s, -np.inf)
    return log_softmax(s, 1.0, axis=1), (unit, norms)


def pair_probability(emb: np.ndarray, i: int, j: int, tau: float) -> float:
    """In-batch probability that row ``i`` picks row ``j`` (0-based, ``i != j``)."""
    n = len(emb)
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError("pair index out of range")
    if i == j:
        raise ValueError("self-probability is undefined: the denominator excludes k == i")
    if tau <= 0:
        raise ValueError("tau must be > 0")
    logp, _ = similarity_logprobs(emb, tau)
    return float(np.exp(logp[i, j]))


def _sim_backward(d_s: np.ndarray, unit: np.ndarray, norms: np.ndarray, tau: float) -> np.ndarray:
    d_unit = (d_s + d_s.T) @ unit / tau
    return normalize_backward(unit, norms, d_unit)


def contrastive_loss(text: np.ndarray, tau: float) -> tuple[float, np.ndarray]:
    """In-batch InfoNCE over a (2B, d) anchor/positive stack.

    Returns ``(loss, d loss / d text)``.
    """
    n = len(text)
    if n == 0 or n % 2:
        raise ValueError("need a non-empty batch of 2B embeddings")
    b = n // 2
    logp, (unit, norms) = similarity_logprobs(text, tau)
    partner = (np.arange(n) + b) % n
    loss = -float(np.mean(logp[np.arange(n), partner]))
    p = np.exp(logp)
    p[np.arange(n), partner] -= 1.0
    np.fill_diagonal(p, 0.0)
    grad = _sim_backward(p / n, unit, norms, tau)
    return loss, grad


def kd_loss(text: np.ndarray, teacher: np.ndarray | None, tau: float) -> tuple[float, np.ndarray]:
    """Mean over rows of KL(teacher row distribution || student row distribution).

    The ``j == i`` terms are excluded from every row, so each row is a proper
    distribution over the other ``2B - 1`` items.
    """
    if teacher is None:
        raise ValueError("knowledge distillation needs teacher embeddings")
    if len(teacher) != len(text):
        raise ValueError("teacher and student batches differ in size")
    n = len(text)
    logq, (unit, norms) = similarity_logprobs(text, tau)
    logt, _ = similarity_logprobs(teacher, tau)
    t = np.exp(logt)
    np.fill_diagonal(logt, 0.0)
    q = np.exp(logq)
    np.fill_diagonal(logq, 0.0)
    loss = float(np.sum(t * (logt - logq)) / n)
    d_s = (q - t) / n
    np.fill_diagonal(d_s, 0.0)
    return max(loss, 0.0), _sim_backward(d_s, unit, norms, tau)


# --------------------------------------------------------------------------
# encoder + training

@dataclass
class ItemEncoder:
    """Feature standardisation followed by a two-layer GELU network."""

    params: dict[str, np.ndarray]
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def init(cls, features: np.ndarray, hidden: int = 128, out_dim: int = TEXT_DIM, seed: int = 0):
        rng = make_rng(seed, "item-encoder")
        w1, b1 = nn.init_linear(rng, features.shape[1], hidden)
        w2, b2 = nn.init_linear(rng, hidden, out_dim)
        std = features.std(axis=0)
        return cls({"w1": w1, "b1": b1, "w2": w2, "b2": b2}, features.mean(axis=0), np.where(std > 0, std, 1.0))

    def forward(self, features: np.ndarray):
        x = (features - self.mean) / self.std
        return nn.mlp2_forward(x, self.params, "")

    def encode(self, features: np.ndarray) -> np.ndarray:
        return self.forward(features)[0]

    def backward(self, d_out: np.ndarray, cache) -> dict[str, np.ndarray]:
        grads: dict[str, np.ndarray] = {}
        nn.mlp2_backward(d_out, cache, self.params, "", grads)
        return grads


@dataclass
class GroundingConfig:
    tau: float = 0.05
    batch_size: int = 256
    steps: int = 300
    cl_weight: float = 1.0
    kd_weight: float = 1.0
    learning_rate: float = 3e-3
    weight_decay: float = 1e-4
    warmup_steps: int = 20
    hidden: int = 128
    seed: int = 0


@dataclass
class GroundingResult:
    encoder: ItemEncoder
    embeddings: np.ndarray
    history: list[tuple[int, float, float]] = field(default_factory=list)


def train_grounding(features: np.ndarray, pairs: list[RelevancePair], teacher: np.ndarray | None,
                    config: GroundingConfig) -> GroundingResult:
    """Fit the item encoder on relevance pairs; return it with catalogue embeddings.

    ``history`` holds ``(step, contrastive, distillation)`` per step.
    """
    if not pairs:
        raise ValueError("no relevance pairs")
    if config.kd_weight and teacher is None:
        raise ValueError("kd_weight > 0 needs teacher embeddings")
    enc = ItemEncoder.init(features, config.hidden, TEXT_DIM, config.seed)
    opt = OptimState(config.learning_rate, config.weight_decay, config.warmup_steps, no_decay=frozenset({"b1", "b2"}))
    anchors = np.array([p.anchor for p in pairs])
    positives = np.array([p.positive for p in pairs])
    rng = make_rng(config.seed, "grounding-batches")
    b = min(config.batch_size, len(pairs))
    order = rng.permutation(len(pairs))
    cursor = 0
    history = []
    for step in range(config.steps):
        if cursor + b > len(order):
            order, cursor = rng.permutation(len(pairs)), 0
        idx = order[cursor:cursor + b]
        cursor += b
        items = np.concatenate([anchors[idx], positives[idx]])
        out, cache = enc.forward(features[items])
        d_out = np.zeros_like(out)
        cl = kd = 0.0
        if config.cl_weight:
            cl, g = contrastive_loss(out, config.tau)
            d_out += config.cl_weight * g
        if config.kd_weight:
            kd, g = kd_loss(out, teacher[items], config.tau)
            d_out += config.kd_weight * g
        if not (np.isfinite(cl) and np.isfinite(kd)):
            raise FloatingPointError(f"grounding diverged at step {step}: cl={cl} kd={kd}")
        history.append((step, cl, kd))
        grads = enc.backward(d_out, cache)
        clip_grad_norm(grads, 5.0)
        adamw_step(enc.params, grads, opt)
        if step % 50 == 0:
            log.debug("grounding step %d cl=%.4f kd=%.4f", step, cl, kd)
    return GroundingResult(enc, enc.encode(features), history)


def save_embeddings(path, embeddings: np.ndarray, item_ids=None) -> None:
    path = Path(path)
    write_tensor(path, embeddings)
    ids = range(len(embeddings)) if item_ids is None else item_ids
    path.with_suffix(".ids.txt").write_text("".join(f"{int(i)}\n" for i in ids))


def load_embeddings(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    ids = np.loadtxt(path.with_suffix(".ids.txt"), dtype=np.int64, ndmin=1)
    return read_tensor(path), ids
