"""SID-level hit rate, baselines and the end-to-end experiment runner.

A prediction hits when any of its top-K items has exactly the target's full
SID, so two items that share a full SID are interchangeable here.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import grounding as gr
from . import quantizer as q
from .generator import GenerationConfig, encode_prompt, generate, prefix_hidden_state, beam_search
from .index import PrefixIndex, ann_query, build_prefix_index
from .numeric import make_rng
from .seqmodel import ModelConfig, SeqModel, SftConfig, init_model, prompt_tokens, sft_train
from .sft import InstructionSample, UserSplit, build_eval_cases, build_sft_dataset
from .tokenizer import TASKS, ItemStore, fuse_forward
from .world import World, WorldConfig, generate_world

log = logging.getLogger(__name__)

KS = (1, 5, 10, 20)
ABLATIONS = ("no_grounding", "no_apf", "no_pretrained_emb", "fewer_negatives", "global_negatives")


def hr_at_k(predictions, target: int, k: int, sids) -> int:
    """1 if any of the first ``k`` predictions shares the target's full SID."""
    if k < 1:
        raise ValueError("K must be at least 1")
    table = np.asarray(sids)
    n = len(table)
    for it in list(predictions)[:k]:
        if not 0 <= int(it) < n:
            raise KeyError(f"item {it} has no SID")
    if not 0 <= int(target) < n:
        raise KeyError(f"item {target} has no SID")
    tgt = table[int(target)]
    return int(any(np.array_equal(table[int(it)], tgt) for it in list(predictions)[:k]))


def hit_vector(predictions, target: int, sid_keys: np.ndarray) -> np.ndarray:
    """Hits at every K in ``KS``; ``sid_keys`` maps item -> a scalar full-SID key."""
    preds = np.asarray(list(predictions)[: max(KS)], dtype=np.int64)
    match = sid_keys[preds] == sid_keys[int(target)] if len(preds) else np.zeros(0, dtype=bool)
    first = int(np.argmax(match)) if match.any() else None
    return np.array([first is not None and first < k for k in KS], dtype=np.float64)


def sid_keys(sids: np.ndarray) -> np.ndarray:
    """Collapse each full SID row to one integer so equality is a scalar compare."""
    sids = np.atleast_2d(np.asarray(sids, dtype=np.int64))
    base = 4096
    if sids.shape[1] * 12 > 62 or sids.max(initial=0) >= base:
        raise ValueError("SID table too wide to pack into one integer")
    key = np.zeros(len(sids), dtype=np.int64)
    for col in range(sids.shape[1]):
        key = key * base + sids[:, col]
    return key


@dataclass
class MetricsReport:
    config_id: str
    per_task: dict[str, np.ndarray]  # task -> hit rates at KS
    counts: dict[str, int]
    wall_seconds: float = 0.0
    config_hash: str = ""
    extra: dict[str, object] = field(default_factory=dict)
    stages: dict[str, str] = field(default_factory=dict)  # stage -> hash of that stage's own settings
    failed: str | None = None

    def mean(self) -> np.ndarray:
        if not self.per_task:
            return np.zeros(len(KS))
        return np.mean([v for v in self.per_task.values()], axis=0)

    def hr(self, k: int, task: str | None = None) -> float:
        v = self.mean() if task is None else self.per_task[task]
        return float(v[KS.index(k)])

    def rows(self) -> list[dict]:
        out = []
        for task, v in list(self.per_task.items()) + [("mean", self.mean())]:
            out.append({"config_id": self.config_id, "task": task, **{f"hr{k}": float(x) for k, x in zip(KS, v)},
                        "wall_seconds": round(self.wall_seconds, 3)})
        if self.failed:
            out.append({"config_id": self.config_id, "task": f"FAILED: {self.failed}",
                        **{f"hr{k}": "" for k in KS}, "wall_seconds": round(self.wall_seconds, 3)})
        return out


def write_metrics_csv(path, reports: list[MetricsReport]) -> None:
    cols = ["config_id", "task"] + [f"hr{k}" for k in KS] + ["wall_seconds"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in reports:
            for row in r.rows():
                w.writerow({k: (f"{v:.6f}" if isinstance(v, float) and k.startswith("hr") else v)
                            for k, v in row.items()})


def score_cases(predict, cases_by_task: dict[str, list[InstructionSample]], keys: np.ndarray):
    """Average hit vectors per task for a ``predict(sample) -> item ids`` callable."""
    per_task, counts = {}, {}
    for task, cases in cases_by_task.items():
        if not cases:
            continue
        hits = np.zeros(len(KS))
        for c in cases:
            hits += hit_vector(predict(c), c.target, keys)
        per_task[task] = hits / len(cases)
        counts[task] = len(cases)
    return per_task, counts


# --------------------------------------------------------------------------
# pipeline configuration

@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 42
    # world
    n_items: int = 10_000
    n_users: int = 2_000
    n_events: int = 200_000
    # grounding
    pairs_semantic: int = 20_000
    pairs_visual: int = 8_000
    pairs_knowledge: int = 8_000
    pairs_collaborative: int = 20_000
    grounding_steps: int = 300
    grounding_batch: int = 256
    # quantiser
    levels: int = 4
    codebook_size: int = 256
    rq_epochs: int = 5
    # sequence model
    prefix_len: int = 1
    d_model: int = 128
    n_layers: int = 2
    max_history: int = 10
    sft_steps: int = 1000
    sft_batch: int = 64
    sft_lr: float = 3e-3
    negatives: int = 256
    shared_pool: int = 128
    fewer_negatives: int = 8
    mix_justforyou: int = 20_000
    mix_query: int = 3_000
    mix_category: int = 3_000
    mix_longtail: int = 2_000
    mix_discover: int = 2_000
    mix_season: int = 2_000
    mix_holiday: int = 2_000
    # generation and evaluation
    beams: int = 16
    per_beam: int = 50
    top_n: int = 20
    tau: float = 0.05
    eval_cases: int = 500  # per task

    @classmethod
    def from_text(cls, text: str, **overrides) -> PipelineConfig:
        kinds = {f.name: type(f.default) for f in fields(cls)}
        values = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, raw = line.partition("=")
            key = key.strip().replace("-", "_")
            if key not in kinds:
                raise ValueError(f"unknown config key {key!r}")
            values[key] = kinds[key](raw.strip())
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def task_mix(self) -> dict[str, int]:
        return {t: getattr(self, f"mix_{t.lower()}") for t in TASKS}

    def world_config(self) -> WorldConfig:
        return WorldConfig(n_items=self.n_items, n_users=self.n_users, n_events=self.n_events)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())


def _hash(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:16]


def array_hash(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode() + str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


# --------------------------------------------------------------------------
# stages

@dataclass
class Stages:
    """Memoised pipeline stages keyed by the hash of everything upstream."""

    cache: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    fixed: dict = field(default_factory=dict)  # precomputed "world", "text" or "sids" artifacts

    def _get(self, key, build):
        if key not in self.cache:
            t = time.perf_counter()
            self.cache[key] = build()
            self.timings[key] = time.perf_counter() - t
        return self.cache[key]

    def world(self, cfg: PipelineConfig) -> World:
        if "world" in self.fixed:
            return self.fixed["world"]
        wc = cfg.world_config()
        return self._get(("world", _hash(asdict(wc), cfg.seed)), lambda: generate_world(wc, cfg.seed))

    def text_embeddings(self, cfg: PipelineConfig, grounded: bool = True) -> np.ndarray:
        if grounded and "text" in self.fixed:
            return self.fixed["text"]
        world = self.world(cfg)
        key = ("grounding", _hash(asdict(cfg.world_config()), cfg.seed, grounded, cfg.grounding_steps,
                                  cfg.grounding_batch, cfg.pairs_semantic, cfg.pairs_visual,
                                  cfg.pairs_knowledge, cfg.pairs_collaborative))

        def build():
            gcfg = gr.GroundingConfig(steps=cfg.grounding_steps if grounded else 0,
                                      batch_size=cfg.grounding_batch, seed=cfg.seed)
            mix = {"Semantic": cfg.pairs_semantic, "Visual": cfg.pairs_visual,
                   "Knowledge": cfg.pairs_knowledge, "Collaborative": cfg.pairs_collaborative}
            pairs = gr.build_relevance_pairs(world, mix, seed=cfg.seed)
            return gr.train_grounding(world.features, pairs, world.teacher_id, gcfg).embeddings
        return self._get(key, build)

    def sids(self, cfg: PipelineConfig, grounded: bool = True) -> np.ndarray:
        if grounded and "sids" in self.fixed:
            return self.fixed["sids"]
        text = self.text_embeddings(cfg, grounded)
        key = ("quantizer", array_hash(text), cfg.levels, cfg.codebook_size, cfg.rq_epochs, cfg.seed)

        def build():
            rcfg = q.RqVaeConfig(levels=cfg.levels, codebook_size=cfg.codebook_size, epochs=cfg.rq_epochs,
                                 seed=cfg.seed)
            model, _ = q.train_rqvae(text, rcfg)
            return q.encode_batch(model, text)
        return self._get(key, build)

    def split(self, cfg: PipelineConfig) -> UserSplit:
        world = self.world(cfg)
        return self._get(("split", _hash(asdict(cfg.world_config()), cfg.seed)), lambda: UserSplit.from_world(world))

    def dataset(self, cfg: PipelineConfig) -> list[InstructionSample]:
        world = self.world(cfg)
        key = ("sft-data", _hash(asdict(cfg.world_config()), cfg.seed, cfg.task_mix(), cfg.max_history))
        return self._get(key, lambda: build_sft_dataset(world, cfg.task_mix(), cfg.seed, cfg.max_history,
                                                        self.split(cfg)))

    def store(self, cfg: PipelineConfig, grounded: bool = True) -> ItemStore:
        world = self.world(cfg)
        return ItemStore(world.teacher_id, self.text_embeddings(cfg, grounded), world.visual, world.has_img)

    def model(self, cfg: PipelineConfig, mcfg: ModelConfig, scfg: SftConfig, grounded: bool = True) -> SeqModel:
        sids = self.sids(cfg, grounded)
        store = self.store(cfg, grounded)
        data = self.dataset(cfg)
        key = ("sft", array_hash(sids, store.v_text), _hash(asdict(mcfg), asdict(scfg)),
               _hash(asdict(cfg.world_config()), cfg.task_mix(), cfg.max_history, cfg.seed))

        def build():
            model = init_model(mcfg, store, sids, cfg.seed)
            trained, rep = sft_train(model, data, scfg)
            return trained
        return self._get(key, build)

    def index(self, model: SeqModel) -> PrefixIndex:
        key = ("index", array_hash(*[model.params[k] for k in sorted(model.params)]), model.config.prefix_len)
        return self._get(key, lambda: build_prefix_index(model.sids, fused_table(model), model.config.prefix_len))


def fused_table(model: SeqModel, chunk: int = 4096) -> np.ndarray:
    """Fused embeddings of the whole catalogue from a trained model."""
    rows = []
    for s in range(0, model.n_items, chunk):
        f, _ = fuse_forward(model.params, model.store, np.arange(s, min(s + chunk, model.n_items)))
        rows.append(f)
    return np.vstack(rows)


def eval_cases(world: World, cfg: PipelineConfig, split: UserSplit | None = None) -> dict[str, list[InstructionSample]]:
    """Held-out last-event cases per task, at most ``eval_cases`` users each."""
    out = {}
    for task in TASKS:
        cases = build_eval_cases(world, task, cfg.max_history, split)
        if len(cases) > cfg.eval_cases:
            pick = np.sort(make_rng(cfg.seed, "eval", task).choice(len(cases), cfg.eval_cases, replace=False))
            cases = [cases[i] for i in pick]
        out[task] = cases
    return out


def model_configs(cfg: PipelineConfig, world: World, ablations=(), prefix_len: int | None = None):
    ab = set(ablations)
    ell = cfg.prefix_len if prefix_len is None else prefix_len
    mcfg = ModelConfig(d_model=cfg.d_model, n_layers=cfg.n_layers, levels=cfg.levels,
                       codebook_size=cfg.codebook_size, prefix_len=ell, history_prefix_len=max(ell, 1),
                       fusion="free" if "no_pretrained_emb" in ab else "pretrained",
                       n_age=world.config.n_age, n_gender=world.config.n_gender, n_region=world.config.n_region,
                       n_query=world.config.n_styles, n_category=world.config.n_subcats,
                       n_season=world.config.n_seasons, n_holiday=world.config.n_holidays)
    negatives = cfg.fewer_negatives if "fewer_negatives" in ab else cfg.negatives
    scfg = SftConfig(steps=cfg.sft_steps, batch_size=cfg.sft_batch, lr=cfg.sft_lr, negatives=negatives,
                     shared_pool=cfg.fewer_negatives if "fewer_negatives" in ab else cfg.shared_pool,
                     negative_mode="global" if "global_negatives" in ab else "prefix", tau=cfg.tau, seed=cfg.seed)
    gcfg = GenerationConfig(beams=cfg.beams, per_beam=cfg.per_beam, top_n=cfg.top_n, tau=cfg.tau,
                            top_prefix_only="no_apf" in ab)
    return mcfg, scfg, gcfg


def evaluate_sigma(model: SeqModel, index: PrefixIndex, cases_by_task, gcfg: GenerationConfig):
    keys = sid_keys(model.sids)
    ell = model.config.prefix_len
    prefix_hits = []

    def predict(sample):
        state = encode_prompt(model, *prompt_tokens(model, sample))
        res = generate(model, index, state, gcfg)
        top = res.beams[0].prefix
        prefix_hits.append(tuple(int(c) for c in model.sids[sample.target, :ell]) == top)
        return res.items

    per_task, counts = score_cases(predict, cases_by_task, keys)
    return per_task, counts, float(np.mean(prefix_hits)) if prefix_hits else 0.0


def run_config(stages: Stages, cfg: PipelineConfig, config_id: str, ablations=(), prefix_len: int | None = None,
               cases=None) -> MetricsReport:
    t = time.perf_counter()
    unknown = set(ablations) - set(ABLATIONS)
    if unknown:
        raise ValueError(f"unknown ablations {sorted(unknown)}")
    world = stages.world(cfg)
    mcfg, scfg, gcfg = model_configs(cfg, world, ablations, prefix_len)
    grounded = "no_grounding" not in ablations
    try:
        model = stages.model(cfg, mcfg, scfg, grounded)
        index = stages.index(model)
        cases = cases or eval_cases(world, cfg, stages.split(cfg))
        per_task, counts, acc = evaluate_sigma(model, index, cases, gcfg)
    except Exception as exc:  # a failed stage still yields a (marked) row
        log.exception("configuration %s failed", config_id)
        return MetricsReport(config_id, {}, {}, time.perf_counter() - t, failed=f"{type(exc).__name__}: {exc}")
    rep = MetricsReport(config_id, per_task, counts, time.perf_counter() - t,
                        _hash(asdict(cfg), sorted(ablations), prefix_len))
    rep.extra["prefix_accuracy"] = acc
    rep.extra["checkpoint_hash"] = array_hash(*[model.params[k] for k in sorted(model.params)])
    rep.extra["sid_hash"] = array_hash(model.sids)
    rep.stages = stage_signature(cfg, grounded, mcfg, scfg, gcfg)
    return rep


def stage_signature(cfg: PipelineConfig, grounded: bool, mcfg: ModelConfig, scfg: SftConfig,
                    gcfg: GenerationConfig) -> dict[str, str]:
    """Per-stage settings hashes; an ablation should move exactly one of them."""
    return {
        "world": _hash(asdict(cfg.world_config()), cfg.seed),
        "grounding": _hash(grounded, cfg.grounding_steps, cfg.grounding_batch, cfg.pairs_semantic,
                           cfg.pairs_visual, cfg.pairs_knowledge, cfg.pairs_collaborative),
        "quantizer": _hash(cfg.levels, cfg.codebook_size, cfg.rq_epochs),
        "sft": _hash(asdict(mcfg), asdict(scfg), cfg.task_mix(), cfg.max_history),
        "generation": _hash(asdict(gcfg)),
    }


# --------------------------------------------------------------------------
# baselines

def ann_recall_benchmark(world: World, m: int = 50, n_queries: int = 200, noise: float = 0.3,
                         min_bucket: int = 256, seed: int = 0) -> float:
    """Mean recall@m of approx against exact ANN over the world's item features.

    Items are bucketed by top category (one-level prefixes); each query is a
    random item's feature vector plus Gaussian noise of ``noise`` times the
    per-dimension spread, routed to that item's bucket.
    """
    sids = world.top[:, None]
    idx = build_prefix_index(sids, world.features, 1, approx_min_bucket=min_bucket, seed=seed)
    r = make_rng(seed, "ann-benchmark")
    spread = world.features.std(axis=0)
    hits = 0
    for it in r.choice(world.n_items, n_queries, replace=False):
        h = world.features[it] + noise * spread * r.normal(size=spread.shape)
        p = idx.prefix_of(int(it))
        exact = ann_query(idx, p, h, m).items
        approx = ann_query(idx, p, h, m, "approx").items
        hits += len(np.intersect1d(exact, approx))
    return hits / (n_queries * m)


def popularity_ranking(world: World, split: UserSplit) -> np.ndarray:
    """Items by training-period interaction count, ties by id."""
    counts = np.zeros(world.n_items, dtype=np.int64)
    for items in split.items:
        if len(items) > 1:
            np.add.at(counts, items[:-1], 1)
    return np.lexsort((np.arange(world.n_items), -counts))


def run_baseline(name: str, stages: Stages, cfg: PipelineConfig, cases=None) -> MetricsReport:
    t = time.perf_counter()
    world = stages.world(cfg)
    split = stages.split(cfg)
    cases = cases or eval_cases(world, cfg, split)
    sids = stages.sids(cfg)
    keys = sid_keys(sids)
    if name == "Popularity":
        top = popularity_ranking(world, split)[: max(KS)]
        per_task, counts = score_cases(lambda s: top, cases, keys)
    elif name == "AutoregressiveID":
        from .baselines import train_autoregressive_id
        model = stages._get(("arid", _hash(asdict(cfg))), lambda: train_autoregressive_id(world, stages.dataset(cfg), cfg))
        per_task, counts = score_cases(lambda s: model.recommend(s.history, max(KS)), cases, keys)
    elif name == "GR_SID":
        mcfg, scfg, _ = model_configs(cfg, world, (), cfg.levels)
        mcfg = replace(mcfg, history_prefix_len=cfg.levels, history_item=False)
        scfg = replace(scfg, w_id=0.0)
        model = stages.model(cfg, mcfg, scfg)
        members: dict[int, list[int]] = {}
        for it, key in enumerate(keys.tolist()):
            members.setdefault(key, []).append(it)

        def predict(s):
            # a generated SID stands for every item carrying it; invalid SIDs yield nothing
            res = beam_search(model, s, max(KS), cfg.levels, exact=False)
            out = []
            for b in res.beams:
                out.extend(members.get(int(sid_keys([b.prefix])[0]), []))
            return out[: max(KS)]
        per_task, counts = score_cases(predict, cases, keys)
    elif name == "GR_ID":
        mcfg, scfg, _ = model_configs(cfg, world, (), 0)
        mcfg = replace(mcfg, history_prefix_len=0)
        scfg = replace(scfg, w_ntp=0.0, negative_mode="global")
        model = stages.model(cfg, mcfg, scfg)
        table = fused_table(model)
        unit = table / np.linalg.norm(table, axis=1, keepdims=True)

        def predict(s):
            state = encode_prompt(model, *prompt_tokens(model, s))
            h = prefix_hidden_state(model, state, [()])[0]
            sc = unit @ (h / np.linalg.norm(h))
            return np.lexsort((np.arange(len(sc)), -sc))[: max(KS)]
        per_task, counts = score_cases(predict, cases, keys)
    else:
        raise ValueError(f"unknown baseline {name!r}")
    return MetricsReport(name, per_task, counts, time.perf_counter() - t, _hash(asdict(cfg), name))


def run_experiment(cfg: PipelineConfig, ablations=(), extra_prefix_lens=(), baselines=("Popularity",),
                   out_dir=None, stages: Stages | None = None) -> list[MetricsReport]:
    """Full SIGMA plus one row per single ablation, prefix-length variant and baseline."""
    stages = stages or Stages()
    world = stages.world(cfg)
    cases = eval_cases(world, cfg, stages.split(cfg))
    reports = [run_config(stages, cfg, f"SIGMA(SID{cfg.prefix_len}ID)", (), None, cases)]
    for ab in ablations:
        reports.append(run_config(stages, cfg, f"-{ab}", (ab,), None, cases))
    for ell in extra_prefix_lens:
        reports.append(run_config(stages, cfg, f"SIGMA(SID{ell}ID)", (), ell, cases))
    for b in baselines:
        try:
            reports.append(run_baseline(b, stages, cfg, cases))
        except Exception as exc:
            log.exception("baseline %s failed", b)
            reports.append(MetricsReport(b, {}, {}, failed=f"{type(exc).__name__}: {exc}"))
    if out_dir is not None:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(d / "metrics.csv", reports)
    return reports
