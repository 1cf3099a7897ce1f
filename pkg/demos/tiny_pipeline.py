"""Whole pipeline on a small catalogue, in about a minute.

    python3 demos/tiny_pipeline.py
"""
import logging

from sigmarec import evaluation as ev

logging.basicConfig(level=logging.INFO, format="%(message)s")

cfg = ev.PipelineConfig(n_items=2000, n_users=400, n_events=30_000, pairs_semantic=4000, pairs_visual=1500,
                        pairs_knowledge=1500, pairs_collaborative=4000, grounding_steps=100, levels=3,
                        codebook_size=32, d_model=64, sft_steps=150, mix_justforyou=3000, mix_query=500,
                        mix_category=500, mix_longtail=300, mix_discover=300, mix_season=300, mix_holiday=300,
                        eval_cases=200)
stages = ev.Stages()
reports = ev.run_experiment(cfg, ablations=("no_apf",), extra_prefix_lens=(2,),
                            baselines=("Popularity", "GR_SID"), stages=stages)

print(f"\n{'config':<16}" + "".join(f"HR@{k:<6}" for k in ev.KS) + "prefix acc")
for r in reports:
    acc = r.extra.get("prefix_accuracy")
    print(f"{r.config_id:<16}" + "".join(f"{x:<9.4f}" for x in r.mean()) + (f"{acc:.3f}" if acc is not None else ""))

print("\nper task, full model HR@10:")
for task, hr in reports[0].per_task.items():
    print(f"  {task:<11} {hr[2]:.4f}  ({reports[0].counts[task]} cases)")
totals = {}
for key, sec in stages.timings.items():
    totals[key[0]] = totals.get(key[0], 0.0) + sec
print("\nstage timings (s):", {k: round(v, 1) for k, v in totals.items()})
