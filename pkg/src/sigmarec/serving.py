"""Nearline serving simulator.

Events are grouped into (user, minute) buckets.  An inference lane drains the
buckets in time order: each user's cached context (profile plus history) is
extended with the new items, generation runs on top of it, and the result
replaces the user's U2I entry.  A serve lane answers lookups from the U2I
store only.  Time is simulated, so replays are deterministic.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .generator import GenerationConfig, GenerationResult, encode_prompt, generate
from .index import PrefixIndex, U2iIndex
from .seqmodel import SeqModel, context_tokens, forward, instruction_tokens, item_tokens
from .transformer import KvCache
from .world import ACTIONS

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BehaviorEvent:
    timestamp: int
    user: int
    item: int
    action: str = "click"

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise ValueError(f"unknown action {self.action!r}")


@dataclass
class Ingested:
    buckets: OrderedDict  # (user, minute) -> list[BehaviorEvent], keys in first-seen order
    rejected: int = 0


def ingest(events) -> Ingested:
    """Group a replay stream by (user, minute).  Per-user time must not go backwards."""
    buckets: OrderedDict = OrderedDict()
    last: dict[int, int] = {}
    rejected = 0
    for ev in events:
        if ev.timestamp < last.get(ev.user, -np.inf):
            rejected += 1
            continue
        last[ev.user] = ev.timestamp
        buckets.setdefault((ev.user, ev.timestamp // 60), []).append(ev)
    if rejected:
        log.warning("rejected %d out-of-order events", rejected)
    return Ingested(buckets, rejected)


def read_event_file(path) -> list[BehaviorEvent]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                t, u, i, a = line.rstrip("\n").split("\t")
                out.append(BehaviorEvent(int(t), int(u), int(i), a))
    return out


def write_event_file(path, events) -> None:
    with open(path, "w") as fh:
        for e in events:
            fh.write(f"{e.timestamp}\t{e.user}\t{e.item}\t{e.action}\n")


@dataclass
class UserSession:
    user: int
    profile: tuple[int, int, int]
    history: list[int] = field(default_factory=list)
    tokens: list[int] = field(default_factory=list)
    items: list[int] = field(default_factory=list)
    cache: KvCache | None = None
    last_minute: int = -1
    last_result: GenerationResult | None = None


def rebuild_session(model: SeqModel, session: UserSession) -> UserSession:
    """Cold-encode the session's context from its history."""
    toks, items = context_tokens(model, session.profile, session.history)
    _, _, cache = forward(model, [toks], [items], logits=False)
    session.tokens, session.items, session.cache = toks, items, cache
    return session


def _room(model: SeqModel, window: int, task_tokens: int) -> int:
    cfg = model.config
    per_item = cfg.history_prefix_len + int(cfg.history_item)
    fit = (cfg.max_len - 4 - task_tokens - cfg.prefix_len - 1) // max(per_item, 1)
    return min(window, fit)


def incremental_infer(session: UserSession, new_items, model: SeqModel, index: PrefixIndex,
                      config: GenerationConfig | None = None, *, window: int = 50, task: str = "JustForYou",
                      constraints=(), u2i: U2iIndex | None = None, timestamp: float = 0.0) -> GenerationResult:
    """Extend the cached context with ``new_items`` and regenerate.

    The history is a sliding window of the last ``window`` items; when the
    window slides, positions shift and the cache is rebuilt from scratch.
    """
    new_items = [int(i) for i in new_items]
    ins = instruction_tokens(model, task, constraints)
    room = _room(model, window, len(ins))
    if session.cache is not None and session.cache.length != len(session.tokens):
        log.warning("session %d cache length mismatch; rebuilding", session.user)
        session.cache = None
    if session.cache is not None and not new_items and session.last_result is not None:
        result = session.last_result
    else:
        history = session.history + new_items
        if session.cache is None or len(history) > room:
            session.history = history[-room:]
            rebuild_session(model, session)
        elif new_items:
            toks, items = [], []
            for it in new_items:
                t, i = item_tokens(model, it, model.config.history_prefix_len, model.config.history_item)
                toks += t
                items += i
            _, _, session.cache = forward(model, [toks], [items], session.cache, logits=False)
            session.history = history
            session.tokens = session.tokens + toks
            session.items = session.items + items
        state = encode_prompt(model, ins, None, session.cache)
        result = generate(model, index, state, config)
        session.last_result = result
    if u2i is not None:
        u2i.put(session.user, zip(result.items.tolist(), result.probs.tolist()), timestamp)
    return result


def cold_infer(model: SeqModel, index: PrefixIndex, profile, history, config: GenerationConfig | None = None,
               task: str = "JustForYou", constraints=(), window: int = 50) -> GenerationResult:
    """Reference path: build the whole prompt from scratch."""
    ins = instruction_tokens(model, task, constraints)
    history = list(history)[-_room(model, window, len(ins)):]
    toks, items = context_tokens(model, profile, history)
    state = encode_prompt(model, toks + ins, items + [-1] * len(ins))
    return generate(model, index, state, config)


def serve(u2i: U2iIndex, user: int) -> list[tuple[int, float]]:
    return u2i.get(user)


@dataclass
class SimReport:
    inferences: int = 0
    rebuilds: int = 0
    rejected: int = 0
    minutes: int = 0
    lookups: list[tuple[float, int, int]] = field(default_factory=list)  # time, user, result length


class ServingSimulator:
    """Two lanes over a simulated clock.

    Each minute bucket becomes visible to inference at the end of its minute
    and its result lands in the U2I store ``latency`` simulated seconds
    later.  Lookups scheduled in between see the previous snapshot.
    """

    def __init__(self, model: SeqModel, index: PrefixIndex, profiles: dict[int, tuple[int, int, int]],
                 config: GenerationConfig | None = None, *, window: int = 50, shards: int = 1,
                 latency: float = 5.0, u2i_size: int = 100):
        self.model = model
        self.index = index
        self.profiles = profiles
        self.config = config or GenerationConfig()
        self.window = window
        self.shards = max(1, shards)
        self.latency = latency
        self.u2i = U2iIndex(u2i_size)
        self.sessions: dict[int, UserSession] = {}

    def session(self, user: int) -> UserSession:
        s = self.sessions.get(user)
        if s is None:
            s = self.sessions[user] = UserSession(user, self.profiles[user])
        return s

    def run(self, events, minutes: int | None = None, lookups=()) -> SimReport:
        """Replay ``events``; ``lookups`` is a list of (sim_time, user) serve requests."""
        ing = ingest(events)
        report = SimReport(rejected=ing.rejected)
        by_minute: dict[int, list[tuple[int, list[BehaviorEvent]]]] = {}
        for (user, minute), evs in ing.buckets.items():
            by_minute.setdefault(minute, []).append((user, evs))
        order = sorted(by_minute)
        if minutes is not None:
            order = order[:minutes]
        report.minutes = len(order)
        pending = sorted(lookups)
        li = 0
        for minute in order:
            done_at = (minute + 1) * 60 + self.latency
            # lookups that happen before this minute's results land see the old snapshot
            while li < len(pending) and pending[li][0] < done_at:
                t, u = pending[li]
                report.lookups.append((t, u, len(serve(self.u2i, u))))
                li += 1
            # users are sharded; shards are drained in order, users within a shard by id
            jobs = sorted(by_minute[minute], key=lambda j: (j[0] % self.shards, j[0]))
            for user, evs in jobs:
                s = self.session(user)
                before = s.cache is None or len(s.history) + len(evs) > _room(self.model, self.window, 1)
                incremental_infer(s, [e.item for e in evs], self.model, self.index, self.config,
                                  window=self.window, u2i=self.u2i, timestamp=done_at)
                s.last_minute = minute
                report.inferences += 1
                report.rebuilds += int(before)
        while li < len(pending):
            t, u = pending[li]
            report.lookups.append((t, u, len(serve(self.u2i, u))))
            li += 1
        return report
