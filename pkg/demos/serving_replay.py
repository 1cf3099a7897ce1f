"""Replay the end of a synthetic log through nearline serving.

Trains a deliberately small model, then streams events minute by minute
and prints how often the KV cache was reused versus rebuilt.
"""
import time

from sigmarec import evaluation as ev
from sigmarec.generator import GenerationConfig
from sigmarec.serving import BehaviorEvent, ServingSimulator
from sigmarec.world import ACTIONS

cfg = ev.PipelineConfig(n_items=1000, n_users=200, n_events=12_000, pairs_semantic=2000, pairs_visual=500,
                        pairs_knowledge=500, pairs_collaborative=2000, grounding_steps=50, levels=2,
                        codebook_size=16, d_model=32, n_layers=1, sft_steps=60, mix_justforyou=800,
                        mix_query=200, mix_category=200, mix_longtail=100, mix_discover=100, mix_season=100,
                        mix_holiday=100)
stages = ev.Stages()
world = stages.world(cfg)
mcfg, scfg, gcfg = ev.model_configs(cfg, world)
model = stages.model(cfg, mcfg, scfg)
index = stages.index(model)

n = 1500
events = [BehaviorEvent(int(t), int(u), int(i), ACTIONS[int(a)]) for t, u, i, a in
          zip(world.ev_time[-n:], world.ev_user[-n:], world.ev_item[-n:], world.ev_action[-n:])]
profiles = {u: (int(world.age[u]), int(world.gender[u]), int(world.region[u])) for u in range(world.n_users)}
sim = ServingSimulator(model, index, profiles, GenerationConfig(beams=8, per_beam=20, top_n=20), window=10)
t0 = time.perf_counter()
rep = sim.run(events, lookups=[(float(world.ev_time[-1]), int(world.ev_user[-1]))])
wall = time.perf_counter() - t0

print(f"{len(events)} events over {rep.minutes} minute buckets -> {rep.inferences} inferences "
      f"({rep.rebuilds} cache rebuilds) in {wall:.1f}s")
user = int(world.ev_user[-1])
print(f"user {user} U2I list:", [(i, round(p, 4)) for i, p in sim.u2i.get(user)[:5]], "...")
