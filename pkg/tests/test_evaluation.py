import csv
import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sigmarec import evaluation as ev
from sigmarec.sft import UserSplit
from sigmarec.world import WorldConfig, generate_world

TINY = dict(n_items=300, n_users=60, n_events=3000, pairs_semantic=300, pairs_visual=100, pairs_knowledge=100,
            pairs_collaborative=300, grounding_steps=4, grounding_batch=32, levels=2, codebook_size=8, rq_epochs=1,
            d_model=16, n_layers=1, max_history=5, sft_steps=3, sft_batch=8, negatives=8, shared_pool=4,
            fewer_negatives=2, mix_justforyou=30, mix_query=10, mix_category=10, mix_longtail=10,
            mix_discover=10, mix_season=10, mix_holiday=10, beams=4, per_beam=10, top_n=20, eval_cases=8)


class TestHitRate:
    sids = np.array([[0, 1], [0, 1], [2, 3], [4, 4]])

    def test_self_hit(self):
        for k in (1, 5, 10):
            assert ev.hr_at_k([2, 0], 2, k, self.sids) == 1

    def test_sid_level(self):
        assert ev.hr_at_k([1], 0, 1, self.sids) == 1
        assert ev.hr_at_k([3, 2], 0, 2, self.sids) == 0
        assert ev.hr_at_k([3, 2, 1], 0, 2, self.sids) == 0
        assert ev.hr_at_k([3, 2, 1], 0, 3, self.sids) == 1

    def test_errors(self):
        with pytest.raises(KeyError):
            ev.hr_at_k([9], 0, 1, self.sids)
        with pytest.raises(KeyError):
            ev.hr_at_k([0], 9, 1, self.sids)
        with pytest.raises(ValueError):
            ev.hr_at_k([0], 0, 0, self.sids)

    def test_fixture_hand_count(self):
        # 100 scripted cases: the target's SID twin sits at rank (case % 25) + 1, or nowhere when case % 5 == 4
        sids = np.repeat(np.arange(60), 2)[:, None] * np.array([[1, 1]])
        hits = {k: 0 for k in ev.KS}
        expected = {k: 0 for k in ev.KS}
        for case in range(100):
            target = 2 * (case % 50)
            twin = target + 1
            fillers = [i for i in range(120) if sids[i, 0] != sids[target, 0]][:30]
            preds = list(fillers)
            rank = case % 25
            if case % 5 != 4:
                preds.insert(rank, twin)
            for k in ev.KS:
                hits[k] += ev.hr_at_k(preds, target, k, sids)
                expected[k] += int(case % 5 != 4 and rank < k)
        assert hits == expected

    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_same_sid_substitution_and_monotone(self, seed):
        r = np.random.default_rng(seed)
        sids = r.integers(0, 3, size=(40, 2))
        preds = r.choice(40, 25, replace=False).tolist()
        target = int(r.integers(0, 40))
        hits = [ev.hr_at_k(preds, target, k, sids) for k in (1, 5, 10, 20)]
        assert hits == sorted(hits)
        i = int(r.integers(0, 25))
        twins = [j for j in range(40) if (sids[j] == sids[preds[i]]).all()]
        swapped = preds.copy()
        swapped[i] = int(r.choice(twins))
        assert [ev.hr_at_k(swapped, target, k, sids) for k in (1, 5, 10, 20)] == hits

    def test_hit_vector_agrees(self, rng):
        sids = rng.integers(0, 4, size=(50, 3))
        keys = ev.sid_keys(sids)
        for _ in range(50):
            preds = rng.choice(50, 20, replace=False)
            t = int(rng.integers(0, 50))
            np.testing.assert_array_equal(ev.hit_vector(preds, t, keys),
                                          [ev.hr_at_k(preds, t, k, sids) for k in ev.KS])

    def test_sid_keys_distinguish_rows(self, rng):
        sids = rng.integers(0, 256, size=(500, 4))
        keys = ev.sid_keys(sids)
        assert len(set(keys.tolist())) == len({tuple(r) for r in sids.tolist()})
        with pytest.raises(ValueError):
            ev.sid_keys(np.zeros((2, 6), dtype=int))


def test_popularity_matches_collision_adjusted_chance():
    w = generate_world(WorldConfig(n_items=400, n_users=3000, n_events=30000, popularity_exponent=0.0,
                                   n_top=2, n_sub=2, n_style=2), seed=5)
    sids = np.random.default_rng(0).integers(0, 6, size=(400, 2))  # 36 SIDs: heavy collisions
    cfg = ev.PipelineConfig(n_items=400, n_users=3000, n_events=30000, eval_cases=10**6)
    stages = ev.Stages(fixed={"world": w, "sids": sids})
    split = UserSplit.from_world(w)
    # resample targets uniformly so the expected hit rate is the covered share of the catalogue
    r = np.random.default_rng(1)
    cases = {"JustForYou": [dataclasses.replace(c, target=int(r.integers(0, 400)))
                            for c in ev.eval_cases(w, cfg, split)["JustForYou"]]}
    rep = ev.run_baseline("Popularity", stages, cfg, cases)
    top = ev.popularity_ranking(w, split)
    keys = ev.sid_keys(sids)
    n = len(cases["JustForYou"])
    for k in ev.KS:
        covered = set(keys[top[:k]].tolist())
        chance = float(np.isin(keys, list(covered)).mean())
        sd = math.sqrt(chance * (1 - chance) / n)
        assert abs(rep.hr(k) - chance) <= 3 * sd + 1e-12, (k, rep.hr(k), chance)


class TestConfig:
    def test_parse(self):
        cfg = ev.PipelineConfig.from_text("# comment\nn-items = 500\nsft_lr=0.01\n\nbeams=4  # inline\n", seed=7)
        assert (cfg.n_items, cfg.sft_lr, cfg.beams, cfg.seed) == (500, 0.01, 4, 7)
        assert ev.PipelineConfig.from_text(cfg.to_text()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            ev.PipelineConfig.from_text("warp_speed=9")

    def test_task_mix(self):
        assert sum(ev.PipelineConfig().task_mix().values()) == 34_000


@pytest.fixture(scope="module")
def tiny_run():
    cfg = ev.PipelineConfig(**TINY)
    stages = ev.Stages()
    reports = ev.run_experiment(cfg, ablations=ev.ABLATIONS, extra_prefix_lens=(2,),
                                baselines=("Popularity", "AutoregressiveID", "GR_SID", "GR_ID"), stages=stages)
    return cfg, stages, reports


class TestExperiment:
    def test_rows(self, tiny_run):
        _, _, reports = tiny_run
        ids = [r.config_id for r in reports]
        assert ids[0] == "SIGMA(SID1ID)" and "SIGMA(SID2ID)" in ids
        assert {"-" + a for a in ev.ABLATIONS} <= set(ids)
        assert {"Popularity", "AutoregressiveID", "GR_SID", "GR_ID"} <= set(ids)
        for r in reports:
            assert r.failed is None, r.failed
            assert np.all(np.diff(r.mean()) >= 0)
            for v in r.per_task.values():
                assert np.all(np.diff(v) >= 0)

    def test_ablation_isolation(self, tiny_run):
        _, _, reports = tiny_run
        by_id = {r.config_id: r for r in reports}
        full = by_id["SIGMA(SID1ID)"]
        moved = {"no_grounding": "grounding", "no_apf": "generation", "no_pretrained_emb": "sft",
                 "fewer_negatives": "sft", "global_negatives": "sft"}
        for ab, stage in moved.items():
            r = by_id["-" + ab]
            diff = {k for k in full.stages if full.stages[k] != r.stages[k]}
            assert diff == {stage}, (ab, diff)
        assert by_id["-no_apf"].extra["checkpoint_hash"] == full.extra["checkpoint_hash"]
        assert by_id["-no_pretrained_emb"].extra["sid_hash"] == full.extra["sid_hash"]
        assert by_id["-no_grounding"].extra["sid_hash"] != full.extra["sid_hash"]

    def test_stages_are_cached(self, tiny_run):
        _, stages, _ = tiny_run
        kinds = [k[0] for k in stages.cache]
        assert kinds.count("world") == 1
        assert kinds.count("grounding") == 2  # grounded and untrained encoders

    def test_empty_ablation_set_gives_one_row(self, tiny_run):
        cfg, stages, _ = tiny_run
        assert len(ev.run_experiment(cfg, baselines=(), stages=stages)) == 1

    def test_csv(self, tiny_run, tmp_path):
        _, _, reports = tiny_run
        ev.write_metrics_csv(tmp_path / "m.csv", reports)
        with open(tmp_path / "m.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["config_id", "task", "hr1", "hr5", "hr10", "hr20", "wall_seconds"]
        assert {r["task"] for r in rows} >= {"mean", "JustForYou"}

    def test_failure_is_marked(self, tiny_run, tmp_path):
        cfg, stages, _ = tiny_run
        bad = ev.PipelineConfig(**{**TINY, "d_model": 15})  # not divisible by the head count
        rep = ev.run_config(stages, bad, "broken")
        assert rep.failed and "divisible" in rep.failed
        ev.write_metrics_csv(tmp_path / "m.csv", [rep])
        assert "FAILED" in (tmp_path / "m.csv").read_text()

    def test_unknown_baseline_and_ablation(self, tiny_run):
        cfg, stages, _ = tiny_run
        with pytest.raises(ValueError):
            ev.run_baseline("Oracle", stages, cfg)
        with pytest.raises(ValueError):
            ev.run_config(stages, cfg, "x", ("no_everything",))
