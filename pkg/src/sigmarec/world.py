"""Synthetic catalogue, users and interaction logs with planted ground truth.

Items live in a four-level hierarchy (top category -> subcategory -> style ->
item noise).  Users hold a few subcategory interests and browse in sessions
that mostly stay on one style; a calendar of seasons and holidays pulls some
events towards context-labelled styles.  Every label used to generate the
data is kept on the returned :class:`World` so tests can re-check it.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numeric import make_rng
from .tensorio import read_tensor, write_tensor

DAY = 86_400
YEAR = 364 * DAY
ACTIONS = ("click", "cart", "purchase")

# event kinds (ground-truth reason an item was picked)
BROWSE, SEASON_PULL, HOLIDAY_PULL, REPEAT = 0, 1, 2, 3


@dataclass(frozen=True)
class WorldConfig:
    n_items: int = 10_000
    n_users: int = 2_000
    n_events: int = 200_000
    n_top: int = 8
    n_sub: int = 4  # per top category
    n_style: int = 4  # per subcategory
    latent_dim: int = 32
    feature_dim: int = 48
    id_dim: int = 32
    img_dim: int = 16
    n_brands: int = 200
    brand_scale: float = 1.5
    popularity_exponent: float = 0.6
    n_seasons: int = 4
    n_holidays: int = 6
    holiday_days: int = 21
    season_style_frac: float = 0.4
    holiday_style_frac: float = 0.25
    img_missing_frac: float = 0.1
    n_age: int = 6
    n_gender: int = 2
    n_region: int = 8
    interests_per_user: int = 3
    stay_prob: float = 0.85
    repeat_prob: float = 0.1
    season_prob: float = 0.1
    holiday_prob: float = 0.25
    session_mean: float = 6.0

    @property
    def n_subcats(self) -> int:
        return self.n_top * self.n_sub

    @property
    def n_styles(self) -> int:
        return self.n_subcats * self.n_style

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, int) and v < 0:
                raise ValueError(f"{f.name} must be >= 0")
        if self.n_items < 1 or self.n_users < 1:
            raise ValueError("need at least one item and one user")
        if min(self.n_top, self.n_sub, self.n_style) < 1:
            raise ValueError("hierarchy fan-outs must be >= 1")
        if min(self.latent_dim, self.feature_dim, self.id_dim, self.img_dim) < 1:
            raise ValueError("embedding dims must be >= 1")
        if self.n_events < self.n_users and self.n_events != 0:
            # every user gets at least one event
            raise ValueError("n_events must be >= n_users")
        if self.n_seasons < 1:
            raise ValueError("n_seasons must be >= 1")


@dataclass
class World:
    config: WorldConfig
    seed: int
    # catalogue
    top: np.ndarray
    sub: np.ndarray
    style: np.ndarray
    brand: np.ndarray
    latent: np.ndarray
    features: np.ndarray
    teacher_id: np.ndarray
    visual: np.ndarray
    has_img: np.ndarray
    season: np.ndarray  # -1 = not seasonal
    holiday: np.ndarray  # -1 = no holiday theme
    popularity: np.ndarray  # planted sampling weight
    # users
    age: np.ndarray
    gender: np.ndarray
    region: np.ndarray
    interests: np.ndarray  # (n_users, interests_per_user) subcategory ids
    interest_weights: np.ndarray
    # calendar
    holiday_start: np.ndarray  # seconds into the year
    # log, sorted by (timestamp, user)
    ev_time: np.ndarray
    ev_user: np.ndarray
    ev_item: np.ndarray
    ev_action: np.ndarray
    ev_kind: np.ndarray

    @property
    def n_items(self) -> int:
        return len(self.top)

    @property
    def n_users(self) -> int:
        return len(self.age)

    def season_at(self, t) -> np.ndarray:
        t = np.asarray(t) % YEAR
        return (t * self.config.n_seasons // YEAR).astype(np.int64)

    def holiday_at(self, t) -> np.ndarray:
        t = np.asarray(t) % YEAR
        out = np.full(np.shape(t), -1, dtype=np.int64)
        for h, start in enumerate(self.holiday_start):
            inside = (t >= start) & (t < start + self.config.holiday_days * DAY)
            out = np.where(inside & (out < 0), h, out)
        return out

    def user_events(self) -> list[np.ndarray]:
        """Event indices per user, in time order."""
        order = np.lexsort((np.arange(len(self.ev_user)), self.ev_time, self.ev_user))
        bounds = np.searchsorted(self.ev_user[order], np.arange(self.n_users + 1))
        return [order[bounds[u]:bounds[u + 1]] for u in range(self.n_users)]

    def item_counts(self) -> np.ndarray:
        return np.bincount(self.ev_item, minlength=self.n_items)


def _hierarchy(cfg: WorldConfig, rng: np.random.Generator):
    n = cfg.n_items
    # uneven style sizes, every style non-empty when possible
    w = rng.dirichlet(np.full(cfg.n_styles, 3.0))
    style = rng.choice(cfg.n_styles, size=n, p=w)
    head = min(n, cfg.n_styles)
    style[:head] = rng.permutation(cfg.n_styles)[:head]
    style = rng.permutation(style)
    sub = style // cfg.n_style
    top = sub // cfg.n_sub
    return top.astype(np.int64), sub.astype(np.int64), style.astype(np.int64)


def generate_world(config: WorldConfig | None = None, seed: int = 42) -> World:
    cfg = config or WorldConfig()
    cfg.validate()
    n, d = cfg.n_items, cfg.latent_dim
    rng = make_rng(seed, "catalogue")
    top, sub, style = _hierarchy(cfg, rng)

    scale = 1.0 / np.sqrt(d)
    a_top = rng.normal(0, 1.0 * scale, (cfg.n_top, d))
    a_sub = rng.normal(0, 0.7 * scale, (cfg.n_subcats, d))
    a_style = rng.normal(0, 0.5 * scale, (cfg.n_styles, d))
    latent = a_top[top] + a_sub[sub] + a_style[style] + rng.normal(0, 0.25 * scale, (n, d))

    # metadata features: a mixed view of the latent plus a strong brand nuisance
    brand = rng.integers(0, cfg.n_brands, n)
    mix = rng.normal(0, 1.0, (d, cfg.feature_dim))
    brand_vec = rng.normal(0, cfg.brand_scale, (cfg.n_brands, cfg.feature_dim))
    features = latent @ mix + brand_vec[brand] + rng.normal(0, 0.3, (n, cfg.feature_dim))

    # behavioural teacher embedding and visual embedding
    q = rng.normal(0, 1.0, (d, cfg.id_dim))
    teacher_id = latent @ q + rng.normal(0, 0.15, (n, cfg.id_dim))
    style_vis = rng.normal(0, 1.0, (cfg.n_styles, cfg.img_dim))
    visual = style_vis[style] + rng.normal(0, 0.5, (n, cfg.img_dim))
    has_img = rng.random(n) >= cfg.img_missing_frac
    visual[~has_img] = 0.0

    style_season = np.where(rng.random(cfg.n_styles) < cfg.season_style_frac,
                            rng.integers(0, cfg.n_seasons, cfg.n_styles), -1)
    style_holiday = np.where(rng.random(cfg.n_styles) < cfg.holiday_style_frac,
                             rng.integers(0, max(cfg.n_holidays, 1), cfg.n_styles), -1)
    if cfg.n_holidays == 0:
        style_holiday[:] = -1
    season = style_season[style]
    holiday = style_holiday[style]

    ranks = rng.permutation(n) + 1
    popularity = ranks.astype(np.float64) ** (-cfg.popularity_exponent)

    # users
    urng = make_rng(seed, "users")
    u = cfg.n_users
    age = urng.integers(0, cfg.n_age, u)
    gender = urng.integers(0, cfg.n_gender, u)
    region = urng.integers(0, cfg.n_region, u)
    pref_age = urng.normal(0, 1.0, (cfg.n_age, cfg.n_top))
    pref_gender = urng.normal(0, 1.5, (cfg.n_gender, cfg.n_top))
    pref_region = urng.normal(0, 0.5, (cfg.n_region, cfg.n_top))
    k = min(cfg.interests_per_user, cfg.n_subcats)
    interests = np.zeros((u, k), dtype=np.int64)
    for i in range(u):
        logits = pref_age[age[i]] + pref_gender[gender[i]] + pref_region[region[i]]
        p_top = np.exp(logits - logits.max())
        p_sub = np.repeat(p_top / p_top.sum(), cfg.n_sub) / cfg.n_sub
        interests[i] = urng.choice(cfg.n_subcats, size=k, replace=False, p=p_sub)
    interest_weights = urng.dirichlet(np.full(k, 2.0), size=u)
    style_pref = urng.dirichlet(np.full(cfg.n_style, 1.0), size=(u, k))

    crng = make_rng(seed, "calendar")
    holiday_start = np.sort(crng.choice(YEAR // DAY - cfg.holiday_days, size=cfg.n_holidays, replace=False)) * DAY

    world = World(
        config=cfg, seed=seed, top=top, sub=sub, style=style, brand=brand, latent=latent,
        features=features, teacher_id=teacher_id, visual=visual, has_img=has_img,
        season=season, holiday=holiday, popularity=popularity, age=age, gender=gender,
        region=region, interests=interests, interest_weights=interest_weights,
        holiday_start=holiday_start.astype(np.int64),
        ev_time=np.zeros(0, np.int64), ev_user=np.zeros(0, np.int64), ev_item=np.zeros(0, np.int64),
        ev_action=np.zeros(0, np.int64), ev_kind=np.zeros(0, np.int64),
    )
    _simulate_events(world, style_pref, seed)
    return world


class _Sampler:
    """Popularity-weighted item draws restricted to a group of items."""

    def __init__(self, groups: np.ndarray, n_groups: int, weight: np.ndarray):
        order = np.lexsort((np.arange(len(groups)), groups))
        self.items = order
        self.bounds = np.searchsorted(groups[order], np.arange(n_groups + 1))
        w = weight[order]
        self.cum = np.zeros(len(order) + 1)
        np.cumsum(w, out=self.cum[1:])

    def size(self, g: int) -> int:
        return int(self.bounds[g + 1] - self.bounds[g])

    def draw(self, g: int, r: float) -> int:
        lo, hi = self.bounds[g], self.bounds[g + 1]
        a, b = self.cum[lo], self.cum[hi]
        j = int(np.searchsorted(self.cum, a + r * (b - a), side="right")) - 1
        return int(self.items[min(max(j, lo), hi - 1)])


def _simulate_events(world: World, style_pref: np.ndarray, seed: int) -> None:
    cfg = world.config
    rng = make_rng(seed, "events")
    n_users = world.n_users
    total = cfg.n_events
    if total == 0:
        return
    activity = rng.lognormal(0.0, 0.6, n_users)
    counts = np.ones(n_users, dtype=np.int64) + rng.multinomial(total - n_users, activity / activity.sum())

    # timestamps: sessions of geometric length, a few minutes between events
    user_of = np.repeat(np.arange(n_users), counts)
    first = np.concatenate([[True], user_of[1:] != user_of[:-1]])
    new_session = first | (rng.random(total) < 1.0 / cfg.session_mean)
    sess_id = np.cumsum(new_session) - 1
    n_sess = int(sess_id[-1]) + 1
    sess_start = rng.integers(0, YEAR - DAY, n_sess)
    # sessions of one user are laid out in increasing time
    sess_user = user_of[new_session]
    sess_start_sorted = np.empty_like(sess_start)
    bounds = np.searchsorted(sess_user, np.arange(n_users + 1))
    for u in range(n_users):
        sess_start_sorted[bounds[u]:bounds[u + 1]] = np.sort(sess_start[bounds[u]:bounds[u + 1]])
    gaps = rng.integers(20, 300, total)
    times = np.empty(total, dtype=np.int64)
    for e in range(total):
        if new_session[e]:
            t = int(sess_start_sorted[sess_id[e]])
            if not first[e]:
                t = max(t, int(times[e - 1]) + 1)
        else:
            t = int(times[e - 1]) + int(gaps[e])
        times[e] = t
    hol = world.holiday_at(times)
    sea = world.season_at(times)

    by_style = _Sampler(world.style, cfg.n_styles, world.popularity)
    nonempty = np.array([by_style.size(s) > 0 for s in range(cfg.n_styles)])
    season_styles = [np.flatnonzero(np.bincount(world.style[world.season == s], minlength=cfg.n_styles) > 0)
                     for s in range(cfg.n_seasons)]
    holiday_styles = [np.flatnonzero(np.bincount(world.style[world.holiday == h], minlength=cfg.n_styles) > 0)
                      for h in range(cfg.n_holidays)]
    style_top = np.arange(cfg.n_styles) // (cfg.n_style * cfg.n_sub)

    r = rng.random((total, 6))
    items = np.empty(total, dtype=np.int64)
    kinds = np.empty(total, dtype=np.int64)
    cur_style = -1
    recent: list[int] = []
    u_tops: set = set()
    for e in range(total):
        uid = int(user_of[e])
        if first[e]:
            recent = []
            cur_style = -1
            u_tops = set((world.interests[uid] // cfg.n_sub).tolist())
        h = int(hol[e])
        kind, item = BROWSE, -1
        if h >= 0 and r[e, 0] < cfg.holiday_prob and len(holiday_styles[h]):
            item = _context_pick(rng, by_style, holiday_styles[h], style_top, u_tops)
            kind = HOLIDAY_PULL
        elif r[e, 1] < cfg.season_prob and len(season_styles[sea[e]]):
            item = _context_pick(rng, by_style, season_styles[sea[e]], style_top, u_tops)
            kind = SEASON_PULL
        if item < 0 and recent and r[e, 2] < cfg.repeat_prob:
            item = recent[int(r[e, 5] * len(recent))]
            kind = REPEAT
        if item < 0:
            if cur_style < 0 or new_session[e] or r[e, 3] > cfg.stay_prob:
                cur_style = _interest_style(rng, world, style_pref[uid], uid, nonempty)
            item = by_style.draw(cur_style, r[e, 4])
        recent = (recent + [item])[-10:]
        items[e] = item
        kinds[e] = kind
    a = rng.random(total)
    actions = np.where(a < 0.8, 0, np.where(a < 0.92, 1, 2))
    order = np.lexsort((np.arange(total), user_of, times))
    world.ev_time = times[order]
    world.ev_user = user_of[order]
    world.ev_item = items[order]
    world.ev_action = actions[order]
    world.ev_kind = kinds[order]


def _interest_style(rng, world: World, style_pref: np.ndarray, uid: int, nonempty: np.ndarray) -> int:
    cfg = world.config
    for _ in range(32):
        k = int(rng.choice(len(world.interests[uid]), p=world.interest_weights[uid]))
        j = int(rng.choice(cfg.n_style, p=style_pref[k]))
        s = int(world.interests[uid, k]) * cfg.n_style + j
        if nonempty[s]:
            return s
    return int(rng.choice(np.flatnonzero(nonempty)))


def _context_pick(rng, sampler: _Sampler, styles: np.ndarray, style_top: np.ndarray, u_tops: set) -> int:
    w = np.array([(4.0 if style_top[s] in u_tops else 1.0) * sampler.size(s) for s in styles], dtype=np.float64)
    s = int(styles[int(rng.choice(len(styles), p=w / w.sum()))])
    return sampler.draw(s, rng.random())


# --------------------------------------------------------------------------
# persistence

_ITEM_COLS = ("top", "sub", "style", "brand", "has_img", "season", "holiday")
_USER_COLS = ("age", "gender", "region")


def save_world(world: World, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    cfg_lines = [f"{f.name}={getattr(world.config, f.name)}" for f in dataclasses.fields(world.config)]
    cfg_lines.append(f"seed={world.seed}")
    (d / "world.txt").write_text("\n".join(cfg_lines) + "\n")
    with open(d / "items.tsv", "w") as fh:
        fh.write("item_id\t" + "\t".join(_ITEM_COLS) + "\n")
        cols = [getattr(world, c).astype(np.int64) for c in _ITEM_COLS]
        for i in range(world.n_items):
            fh.write(f"{i}\t" + "\t".join(str(int(c[i])) for c in cols) + "\n")
    with open(d / "users.tsv", "w") as fh:
        fh.write("user_id\t" + "\t".join(_USER_COLS) + "\tinterests\tweights\n")
        for i in range(world.n_users):
            fh.write(f"{i}\t{world.age[i]}\t{world.gender[i]}\t{world.region[i]}\t"
                     + ",".join(map(str, world.interests[i])) + "\t"
                     + ",".join(repr(float(x)) for x in world.interest_weights[i]) + "\n")
    write_events(d / "events.tsv", world.ev_time, world.ev_user, world.ev_item, world.ev_action)
    np.savetxt(d / "event_kinds.txt", world.ev_kind, fmt="%d")
    np.savetxt(d / "holidays.txt", world.holiday_start, fmt="%d")
    for name in ("latent", "features", "teacher_id", "visual", "popularity"):
        write_tensor(d / f"{name}.sgma", getattr(world, name))


def load_world(directory) -> World:
    d = Path(directory)
    raw = dict(line.split("=", 1) for line in (d / "world.txt").read_text().splitlines() if line)
    seed = int(raw.pop("seed"))
    kwargs = {}
    for f in dataclasses.fields(WorldConfig):
        kwargs[f.name] = type(f.default)(raw[f.name]) if not isinstance(f.default, bool) else raw[f.name] == "True"
    cfg = WorldConfig(**kwargs)
    items = np.loadtxt(d / "items.tsv", dtype=np.int64, skiprows=1, ndmin=2)
    users = [line.split("\t") for line in (d / "users.tsv").read_text().splitlines()[1:]]
    t, u, i, a = read_events(d / "events.tsv")
    cat = {c: items[:, j + 1] for j, c in enumerate(_ITEM_COLS)}
    return World(
        config=cfg, seed=seed,
        top=cat["top"], sub=cat["sub"], style=cat["style"], brand=cat["brand"],
        latent=read_tensor(d / "latent.sgma"), features=read_tensor(d / "features.sgma"),
        teacher_id=read_tensor(d / "teacher_id.sgma"), visual=read_tensor(d / "visual.sgma"),
        has_img=cat["has_img"].astype(bool), season=cat["season"], holiday=cat["holiday"],
        popularity=read_tensor(d / "popularity.sgma"),
        age=np.array([int(r[1]) for r in users]), gender=np.array([int(r[2]) for r in users]),
        region=np.array([int(r[3]) for r in users]),
        interests=np.array([[int(x) for x in r[4].split(",")] for r in users]),
        interest_weights=np.array([[float(x) for x in r[5].split(",")] for r in users]),
        holiday_start=np.atleast_1d(np.loadtxt(d / "holidays.txt", dtype=np.int64)),
        ev_time=t, ev_user=u, ev_item=i, ev_action=a,
        ev_kind=np.atleast_1d(np.loadtxt(d / "event_kinds.txt", dtype=np.int64)),
    )


def write_events(path, times, users, items, actions) -> None:
    with open(path, "w") as fh:
        for t, u, i, a in zip(times, users, items, actions):
            fh.write(f"{int(t)}\t{int(u)}\t{int(i)}\t{ACTIONS[int(a)]}\n")


def read_events(path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    t, u, i, a = [], [], [], []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            ts, user, item, action = line.rstrip("\n").split("\t")
            t.append(int(ts))
            u.append(int(user))
            i.append(int(item))
            a.append(ACTIONS.index(action))
    return (np.array(t, dtype=np.int64), np.array(u, dtype=np.int64),
            np.array(i, dtype=np.int64), np.array(a, dtype=np.int64))
