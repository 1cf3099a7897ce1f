"""Seven-task instruction dataset built from the synthetic log.

Each user's last event is held out for evaluation; training targets come
from earlier events only.  Constraint payloads are read off the generator's
ground-truth labels, so every constrained sample satisfies its predicate by
construction and ``satisfies_constraint`` can re-check it independently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numeric import make_rng
from .tokenizer import TASKS
from .world import World

CONSTRAINT_GROUP = {"Query": "query", "Category": "category", "Season": "season", "Holiday": "holiday"}


@dataclass(frozen=True)
class InstructionSample:
    user: int
    profile: tuple[int, int, int]  # age band, gender, region
    history: tuple[int, ...]  # item ids, most recent last
    task: str
    constraints: tuple[tuple[str, int], ...]
    target: int


@dataclass
class UserSplit:
    """Per-user time-ordered item ids; the final entry is the held-out target."""

    items: list[np.ndarray]
    times: list[np.ndarray]

    @classmethod
    def from_world(cls, world: World) -> UserSplit:
        ev = world.user_events()
        return cls([world.ev_item[e] for e in ev], [world.ev_time[e] for e in ev])


def longtail_items(world: World) -> np.ndarray:
    """Items in the bottom popularity quartile both by logged count and by generator weight.

    Each quartile is the first n/4 items when sorted ascending, ties by id.
    """
    mask = np.ones(world.n_items, dtype=bool)
    for score in (world.item_counts(), world.popularity):
        order = np.lexsort((np.arange(world.n_items), score))
        quart = np.zeros(world.n_items, dtype=bool)
        quart[order[: world.n_items // 4]] = True
        mask &= quart
    return mask


def satisfies_constraint(world: World, sample: InstructionSample, tail: np.ndarray | None = None) -> bool:
    t = sample.target
    if sample.task == "Longtail":
        tail = longtail_items(world) if tail is None else tail
        return bool(tail[t])
    if sample.task not in CONSTRAINT_GROUP:
        return True
    (group, value), = sample.constraints
    label = {"query": world.style, "category": world.sub, "season": world.season, "holiday": world.holiday}[group]
    return int(label[t]) == value


def _candidates(world: World, split: UserSplit, task: str, tail: np.ndarray, recent: int = 5):
    """All (user, position) pairs eligible as training targets for ``task``."""
    out_u, out_k = [], []
    for u, (items, times) in enumerate(zip(split.items, split.times)):
        n = len(items)
        if n < 3:
            continue
        ks = np.arange(1, n - 1)
        it = items[ks]
        if task in ("JustForYou", "Query", "Category"):
            ok = np.ones(len(ks), dtype=bool)
        elif task == "Longtail":
            ok = tail[it]
        elif task == "Season":
            ok = (world.season[it] >= 0) & (world.season[it] == world.season_at(times[ks]))
        elif task == "Holiday":
            ok = (world.holiday[it] >= 0) & (world.holiday[it] == world.holiday_at(times[ks]))
        elif task == "Discover":
            interests = set(world.interests[u].tolist())
            subs = world.sub[items]
            ok = np.array([int(subs[k]) in interests and int(subs[k]) not in set(subs[max(0, k - recent):k].tolist())
                           for k in ks], dtype=bool)
        else:
            raise ValueError(f"unknown task {task!r}")
        sel = ks[ok]
        out_u.append(np.full(len(sel), u, dtype=np.int64))
        out_k.append(sel)
    if not out_u:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    return np.concatenate(out_u), np.concatenate(out_k)


def _constraint(world: World, task: str, item: int) -> tuple[tuple[str, int], ...]:
    if task == "Query":
        return (("query", int(world.style[item])),)
    if task == "Category":
        return (("category", int(world.sub[item])),)
    if task == "Season":
        return (("season", int(world.season[item])),)
    if task == "Holiday":
        return (("holiday", int(world.holiday[item])),)
    return ()


def _sample(world: World, split: UserSplit, u: int, k: int, task: str, max_history: int) -> InstructionSample:
    items = split.items[u]
    target = int(items[k])
    hist = tuple(int(i) for i in items[max(0, k - max_history):k])
    profile = (int(world.age[u]), int(world.gender[u]), int(world.region[u]))
    return InstructionSample(u, profile, hist, task, _constraint(world, task, target), target)


def build_sft_dataset(world: World, task_mix: dict[str, int], seed: int = 0, max_history: int = 20,
                      split: UserSplit | None = None) -> list[InstructionSample]:
    """Draw ``task_mix[task]`` samples per task, uniformly over eligible targets.

    Draws are without replacement until a task's pool is exhausted, then
    the pool is reused.  Output order is shuffled with the same seed.
    """
    split = split or UserSplit.from_world(world)
    tail = longtail_items(world)
    out: list[InstructionSample] = []
    for task in TASKS:
        n = int(task_mix.get(task, 0))
        if n < 0:
            raise ValueError(f"negative count for {task}")
        if n == 0:
            continue
        users, ks = _candidates(world, split, task, tail)
        if len(users) == 0:
            raise ValueError(f"no qualifying (user, target) pair for task {task}")
        rng = make_rng(seed, "sft", task)
        reps = -(-n // len(users))
        pick = np.concatenate([rng.permutation(len(users)) for _ in range(reps)])[:n]
        out.extend(_sample(world, split, int(users[j]), int(ks[j]), task, max_history) for j in pick)
    unknown = set(task_mix) - set(TASKS)
    if unknown:
        raise ValueError(f"unknown tasks {sorted(unknown)}")
    order = make_rng(seed, "sft", "order").permutation(len(out))
    return [out[i] for i in order]


def build_eval_cases(world: World, task: str = "JustForYou", max_history: int = 20,
                     split: UserSplit | None = None, users=None) -> list[InstructionSample]:
    """One case per user: the held-out last event as target.

    Constrained tasks keep only users whose held-out item qualifies
    (seasonal item in season, and so on).
    """
    split = split or UserSplit.from_world(world)
    tail = longtail_items(world) if task == "Longtail" else None
    cases = []
    for u in (range(world.n_users) if users is None else users):
        items, times = split.items[u], split.times[u]
        if len(items) < 2:
            continue
        k = len(items) - 1
        it = int(items[k])
        if task == "Longtail" and not tail[it]:
            continue
        if task == "Season" and not (world.season[it] >= 0 and world.season[it] == world.season_at(times[k])):
            continue
        if task == "Holiday" and not (world.holiday[it] >= 0 and world.holiday[it] == world.holiday_at(times[k])):
            continue
        if task == "Discover":
            recent = set(world.sub[items[max(0, k - 5):k]].tolist())
            if world.sub[it] in recent or world.sub[it] not in set(world.interests[u].tolist()):
                continue
        cases.append(_sample(world, split, u, k, task, max_history))
    return cases


# --------------------------------------------------------------------------
# file format: user, profile, history, task, constraints, target (tab separated)

def write_dataset(path, samples: list[InstructionSample]) -> None:
    with open(path, "w") as fh:
        for s in samples:
            prof = f"age:{s.profile[0]},gender:{s.profile[1]},region:{s.profile[2]}"
            cons = ",".join(f"{g}:{v}" for g, v in s.constraints) or "-"
            hist = ",".join(map(str, s.history)) or "-"
            fh.write(f"{s.user}\t{prof}\t{hist}\t{s.task}\t{cons}\t{s.target}\n")


def read_dataset(path) -> list[InstructionSample]:
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            user, prof, hist, task, cons, target = line.rstrip("\n").split("\t")
            profile = tuple(int(p.split(":")[1]) for p in prof.split(","))
            history = () if hist == "-" else tuple(int(x) for x in hist.split(","))
            constraints = () if cons == "-" else tuple((c.split(":")[0], int(c.split(":")[1])) for c in cons.split(","))
            if task not in TASKS:
                raise ValueError(f"unknown task {task!r}")
            out.append(InstructionSample(int(user), profile, history, task, constraints, int(target)))
    return out
