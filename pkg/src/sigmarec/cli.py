"""Command line entry point.

Every subcommand works inside ``--out-dir`` and picks up what earlier
subcommands left there::

    world/            gen-data
    text_emb.sgma     train-grounding (plus pairs.tsv)
    rqvae/, sids.tsv  fit-quantizer
    sft.tsv, model/   sft-train
    index/            build-index
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import grounding as gr
from . import quantizer as q
from .generator import GenerationConfig, format_result, generate
from .index import build_prefix_index, load_index, save_index
from .seqmodel import init_model, load_checkpoint, prompt_tokens, sft_train
from .serving import BehaviorEvent, ServingSimulator, read_event_file
from .sft import build_eval_cases, build_sft_dataset, read_dataset, write_dataset
from .tokenizer import ItemStore
from .world import ACTIONS, generate_world, load_world, save_world

log = logging.getLogger("sigmarec")


def _config(args) -> ev.PipelineConfig:
    text = Path(args.config).read_text() if args.config else ""
    return ev.PipelineConfig.from_text(text, seed=args.seed)


def _world(out: Path):
    if not (out / "world").exists():
        raise SystemExit(f"no world in {out}; run gen-data first")
    return load_world(out / "world")


def _sids(out: Path, n_items: int) -> np.ndarray:
    return q.sid_array(q.read_sids(out / "sids.tsv"), n_items)


def _store(out: Path, world) -> ItemStore:
    text, _ = gr.load_embeddings(out / "text_emb.sgma")
    return ItemStore(world.teacher_id, text, world.visual, world.has_img)


def _model(out: Path, world):
    return load_checkpoint(out / "model", _store(out, world))


def _gen_config(cfg: ev.PipelineConfig, args) -> GenerationConfig:
    return GenerationConfig(beams=cfg.beams, per_beam=cfg.per_beam, top_n=cfg.top_n, tau=cfg.tau,
                            top_prefix_only=getattr(args, "no_apf", False),
                            ann_mode=getattr(args, "ann_mode", "exact"))


def cmd_gen_data(args, cfg, out):
    world = generate_world(cfg.world_config(), cfg.seed)
    save_world(world, out / "world")
    print(f"world: {world.n_items} items, {world.n_users} users, {len(world.ev_item)} events -> {out / 'world'}")


def cmd_train_grounding(args, cfg, out):
    world = _world(out)
    mix = {"Semantic": cfg.pairs_semantic, "Visual": cfg.pairs_visual,
           "Knowledge": cfg.pairs_knowledge, "Collaborative": cfg.pairs_collaborative}
    pairs = gr.build_relevance_pairs(world, mix, seed=cfg.seed)
    gr.write_pairs(out / "pairs.tsv", pairs)
    steps = 0 if args.untrained else cfg.grounding_steps
    res = gr.train_grounding(world.features, pairs, world.teacher_id,
                             gr.GroundingConfig(steps=steps, batch_size=cfg.grounding_batch, seed=cfg.seed))
    gr.save_embeddings(out / "text_emb.sgma", res.embeddings)
    print(f"grounded embeddings {res.embeddings.shape} -> {out / 'text_emb.sgma'}")


def cmd_fit_quantizer(args, cfg, out):
    text, ids = gr.load_embeddings(out / "text_emb.sgma")
    model, report = q.train_rqvae(text, q.RqVaeConfig(levels=cfg.levels, codebook_size=cfg.codebook_size,
                                                      epochs=cfg.rq_epochs, seed=cfg.seed))
    q.save_model(model, out / "rqvae")
    sids, hist = q.assign_catalog(model, text, ids)
    q.write_sids(out / "sids.tsv", sids)
    print(f"sids -> {out / 'sids.tsv'}; unique full SIDs {len(set(sids.values()))}; "
          f"level-1 buckets {len(hist[1])}")


def cmd_sft_train(args, cfg, out):
    world = _world(out)
    store = _store(out, world)
    sids = _sids(out, world.n_items)
    data_path = out / "sft.tsv"
    if data_path.exists() and not args.rebuild_data:
        data = read_dataset(data_path)
    else:
        data = build_sft_dataset(world, cfg.task_mix(), cfg.seed, cfg.max_history)
        write_dataset(data_path, data)
    ablations = tuple(args.ablation or ())
    mcfg, scfg, _ = ev.model_configs(cfg, world, ablations)
    model = init_model(mcfg, store, sids, cfg.seed)
    trained, report = sft_train(model, data, scfg, checkpoint_dir=out / "model")
    last = report.history[-1] if report.history else None
    print(f"trained {len(report.history)} steps" + (f", final loss {last[1]:.4f}" if last else "")
          + f" -> {out / 'model'}")


def cmd_build_index(args, cfg, out):
    world = _world(out)
    model = _model(out, world)
    index = build_prefix_index(model.sids, ev.fused_table(model), model.config.prefix_len,
                               approx_min_bucket=args.approx_min_bucket, seed=cfg.seed)
    save_index(index, out / "index")
    sizes = index.sizes()
    print(f"index: {len(sizes)} buckets, largest {max(sizes.values())} -> {out / 'index'}")


def cmd_generate(args, cfg, out):
    world = _world(out)
    model = _model(out, world)
    index = load_index(out / "index")
    cases = {c.user: c for c in build_eval_cases(world, "JustForYou", cfg.max_history)}
    if args.user not in cases:
        raise SystemExit(f"user {args.user} has no history to condition on")
    case = cases[args.user]
    constraints = tuple((g, int(v)) for g, v in (c.split(":") for c in args.constraint or ()))
    sample = type(case)(case.user, case.profile, case.history, args.task, constraints, case.target)
    res = generate(model, index, prompt_tokens(model, sample), _gen_config(cfg, args))
    sys.stdout.write(format_result(res))


def cmd_evaluate(args, cfg, out):
    world = _world(out)
    model = _model(out, world)
    index = load_index(out / "index")
    cases = ev.eval_cases(world, cfg)
    per_task, counts, acc = ev.evaluate_sigma(model, index, cases, _gen_config(cfg, args))
    rep = ev.MetricsReport(args.config_id, per_task, counts)
    reports = [rep]
    stages = ev.Stages(fixed={"world": world, "text": model.store.v_text, "sids": model.sids})
    for b in args.baseline or ():
        reports.append(ev.run_baseline(b, stages, cfg, cases))
    ev.write_metrics_csv(out / "metrics.csv", reports)
    print(f"prefix accuracy {acc:.4f}")
    for r in reports:
        print(f"{r.config_id}: " + " ".join(f"HR@{k}={x:.4f}" for k, x in zip(ev.KS, r.mean())))


def cmd_serve_sim(args, cfg, out):
    world = _world(out)
    model = _model(out, world)
    index = load_index(out / "index")
    if args.events:
        events = read_event_file(args.events)
    else:  # replay the tail of the log
        n = min(len(world.ev_item), args.replay)
        events = [BehaviorEvent(int(t), int(u), int(i), ACTIONS[int(a)]) for t, u, i, a in
                  zip(world.ev_time[-n:], world.ev_user[-n:], world.ev_item[-n:], world.ev_action[-n:])]
    profiles = {u: (int(world.age[u]), int(world.gender[u]), int(world.region[u])) for u in range(world.n_users)}
    sim = ServingSimulator(model, index, profiles, _gen_config(cfg, args), window=args.window,
                           shards=args.users_shards)
    rep = sim.run(events, args.minutes)
    print(f"minutes {rep.minutes}, inferences {rep.inferences}, rebuilds {rep.rebuilds}, rejected {rep.rejected}, "
          f"users in U2I {len(sim.u2i.users())}")
    if args.export_u2i:
        sim.u2i.export(args.export_u2i)
        print(f"U2I -> {args.export_u2i}")


def cmd_run_experiment(args, cfg, out):
    reports = ev.run_experiment(cfg, ablations=args.ablation or (), extra_prefix_lens=args.prefix_len or (),
                                baselines=args.baseline if args.baseline is not None else ("Popularity",),
                                out_dir=out)
    for r in reports:
        tail = f" FAILED {r.failed}" if r.failed else ""
        print(f"{r.config_id}: HR@10={r.hr(10):.4f} ({r.wall_seconds:.0f}s){tail}")
    print(f"metrics -> {out / 'metrics.csv'}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sigmarec", description="Generative recommendation on a synthetic catalogue.")
    p.add_argument("--config", help="key=value pipeline configuration file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default="out")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="generate the synthetic world")
    s = sub.add_parser("train-grounding", help="multi-view grounded item embeddings")
    s.add_argument("--untrained", action="store_true", help="keep the random-init encoder")
    sub.add_parser("fit-quantizer", help="RQ-VAE and semantic IDs")
    s = sub.add_parser("sft-train", help="train the sequence model")
    s.add_argument("--ablation", action="append", choices=("no_pretrained_emb", "fewer_negatives",
                                                            "global_negatives"))
    s.add_argument("--rebuild-data", action="store_true")
    s = sub.add_parser("build-index", help="prefix-bucket index over fused embeddings")
    s.add_argument("--approx-min-bucket", type=int, default=None)
    s = sub.add_parser("generate", help="recommend for one user")
    s.add_argument("--user", type=int, required=True)
    s.add_argument("--task", default="JustForYou")
    s.add_argument("--constraint", action="append", help="group:value, e.g. season:2")
    s.add_argument("--no-apf", action="store_true")
    s.add_argument("--ann-mode", choices=("exact", "approx"), default="exact")
    s = sub.add_parser("evaluate", help="HR@K on held-out last events")
    s.add_argument("--config-id", default="SIGMA")
    s.add_argument("--baseline", action="append", choices=("Popularity", "AutoregressiveID", "GR_SID", "GR_ID"))
    s.add_argument("--no-apf", action="store_true")
    s = sub.add_parser("serve-sim", help="replay events through nearline serving")
    s.add_argument("--events", help="tab-separated timestamp, user, item, action")
    s.add_argument("--replay", type=int, default=500, help="without --events, replay this many final log events")
    s.add_argument("--minutes", type=int, default=None)
    s.add_argument("--users-shards", type=int, default=1)
    s.add_argument("--window", type=int, default=50)
    s.add_argument("--export-u2i")
    s = sub.add_parser("run-experiment", help="full pipeline, ablations and baselines")
    s.add_argument("--ablation", action="append", choices=ev.ABLATIONS)
    s.add_argument("--prefix-len", action="append", type=int)
    s.add_argument("--baseline", action="append", choices=("Popularity", "AutoregressiveID", "GR_SID", "GR_ID"))
    return p


COMMANDS = {
    "gen-data": cmd_gen_data, "train-grounding": cmd_train_grounding, "fit-quantizer": cmd_fit_quantizer,
    "sft-train": cmd_sft_train, "build-index": cmd_build_index, "generate": cmd_generate,
    "evaluate": cmd_evaluate, "serve-sim": cmd_serve_sim, "run-experiment": cmd_run_experiment,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    cfg = _config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    COMMANDS[args.command](args, cfg, out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
