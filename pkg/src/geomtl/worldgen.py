"""Synthetic multi-territory universe and day-wise interaction datasets.

A world holds a user population spread over territories with very unequal
viewership volume, a catalogue of global titles (available in several
territory groups) and local titles (one territory each), and a ground-truth
propensity model whose user-title affinity depends on the territory group.
The population's first-time discovery history is simulated once when the
world is built; datasets are views of that history for sampled users plus
uniformly drawn in-scope negatives.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

# Default volume profile: six ~1M territories, seven ~100k, three ~10k.
DEFAULT_PROFILE_16 = (150.0, 120.0, 100.0, 130.0, 110.0, 100.0, 15.0, 12.0,
                      10.0, 0.8, 1.0, 0.7, 14.0, 11.0, 10.0, 12.0)

CALIBRATION_USERS = 2000


class ConfigError(ValueError):
    """Invalid or infeasible generator configuration."""


def default_profile(n_territories: int) -> tuple[float, ...]:
    if n_territories == 16:
        return DEFAULT_PROFILE_16
    return tuple(float(x) for x in np.geomspace(150.0, 0.7, n_territories))


@dataclass
class DataConfig:
    n_territories: int = 16
    n_groups: int = 4  # production grouping also used 4
    n_titles: int = 200
    global_fraction: float = 0.4
    global_availability: float = 0.75
    population: int = 200_000
    n_random_users: int = 40_000
    n_active_upsample: int = 10_000
    n_test_users: int = 20_000
    min_test_users_per_territory: int = 500
    active_exponent: float = 0.0
    alpha: float = 3.0  # production ratio unpublished
    train_days: int = 7
    test_days: int = 3
    latent_dim: int = 8
    user_dim: int = 16  # production user vectors: 512-d
    title_dim: int = 16  # production title vectors: 768-d text encoder
    embedding_noise: float = 0.1
    territory_signal: float = 0.0
    locality_signal: float = 1.0
    imbalance_profile: tuple[float, ...] | None = None
    daily_positives: float = 6000.0
    population_exponent: float = 0.5
    group_map: tuple[int, ...] | None = None
    group_strength: float = 1.0
    min_group_distance: float = 0.5
    preference_scale: float = 1.5
    global_pop_mean: float = 0.5
    global_pop_sd: float = 0.5
    group_affinity_sd: float = 1.0
    local_pop_mean: float = 0.0
    local_pop_sd: float = 1.0
    local_preference_range: float = 2.0
    territory_pop_sd: float = 0.2
    engagement_sd: float = 0.5

    def __post_init__(self):
        if self.imbalance_profile is None:
            self.imbalance_profile = default_profile(self.n_territories)
        self.imbalance_profile = tuple(float(x) for x in self.imbalance_profile)
        if self.group_map is not None:
            self.group_map = tuple(int(g) for g in self.group_map)

    @property
    def horizon(self) -> int:
        return self.train_days + self.test_days

    @property
    def train_day_range(self) -> range:
        return range(0, self.train_days)

    @property
    def test_day_range(self) -> range:
        return range(self.train_days, self.horizon)

    @property
    def activity_window(self) -> range:
        return range(self.train_days - math.ceil(self.train_days / 2), self.train_days)

    def validate(self) -> None:
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if self.n_groups < 1:
            raise ConfigError("need at least one territory group")
        if self.n_territories < self.n_groups:
            raise ConfigError(f"{self.n_territories} territories cannot fill {self.n_groups} groups")
        if self.train_days < 1 or self.test_days < 1:
            raise ConfigError("train_days and test_days must both be >= 1")
        if len(self.imbalance_profile) != self.n_territories:
            raise ConfigError(
                f"imbalance_profile has {len(self.imbalance_profile)} entries for {self.n_territories} territories"
            )
        prof = np.asarray(self.imbalance_profile)
        if np.any(prof <= 0):
            raise ConfigError("imbalance_profile entries must be positive")
        if self.n_territories > 1 and prof.max() / prof.min() < 100.0:
            raise ConfigError("imbalance_profile must span at least two orders of magnitude")
        if self.group_map is not None:
            if len(self.group_map) != self.n_territories:
                raise ConfigError("group_map needs one entry per territory")
            if set(self.group_map) != set(range(self.n_groups)):
                raise ConfigError("group_map must use every group id 0..G-1")
        if self.n_groups > 1 and self.n_titles * self.global_fraction < 1:
            raise ConfigError("need at least one global title")
        n_local = self.n_titles - int(round(self.n_titles * self.global_fraction))
        if n_local < 0:
            raise ConfigError("global_fraction must be in [0, 1]")
        if min(self.user_dim, self.title_dim, self.latent_dim) < 1:
            raise ConfigError("embedding dims must be >= 1")
        if self.n_random_users + self.n_active_upsample + self.n_test_users > self.population:
            raise ConfigError("population too small for the requested user samples")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["imbalance_profile"] = list(self.imbalance_profile)
        d["group_map"] = None if self.group_map is None else list(self.group_map)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown world config keys: {sorted(unknown)}")
        return cls(**known)


def snake_groups(volume: np.ndarray, n_groups: int) -> np.ndarray:
    """Deal territories to groups in snake order of descending volume.

    Every group gets one of the G largest territories in the first round and
    smaller ones afterwards, which balances majors and minors per group.
    """
    order = np.argsort(-volume, kind="stable")
    groups = np.empty(volume.size, dtype=np.int64)
    for rank, terr in enumerate(order):
        rnd, pos = divmod(rank, n_groups)
        groups[terr] = pos if rnd % 2 == 0 else n_groups - 1 - pos
    return groups


@dataclass
class World:
    config: DataConfig
    seed: int
    volume: np.ndarray
    is_major: np.ndarray
    group_map: np.ndarray
    title_scope: np.ndarray  # (titles, territories) bool
    title_is_global: np.ndarray
    global_pop: np.ndarray
    local_pop: np.ndarray  # (titles, territories), NaN where out of scope
    group_transforms: np.ndarray  # (G, k, k)
    title_latents: np.ndarray
    title_embeddings: np.ndarray
    user_territory: np.ndarray
    user_latents: np.ndarray
    user_engagement: np.ndarray
    user_embeddings: np.ndarray
    territory_bias: np.ndarray
    history_user: np.ndarray = field(repr=False, default=None)
    history_title: np.ndarray = field(repr=False, default=None)
    history_day: np.ndarray = field(repr=False, default=None)
    active: np.ndarray = field(repr=False, default=None)

    @property
    def n_territories(self) -> int:
        return self.volume.size

    @property
    def n_groups(self) -> int:
        return self.group_transforms.shape[0]

    @property
    def n_users(self) -> int:
        return self.user_territory.size

    @property
    def popularity_weights(self) -> np.ndarray:
        return np.where(self.title_scope, np.exp(np.nan_to_num(self.local_pop)), 0.0)

    def titles_in_scope(self, territory: int) -> np.ndarray:
        return np.flatnonzero(self.title_scope[:, territory])

    def users_in(self, territory: int) -> np.ndarray:
        return np.flatnonzero(self.user_territory == territory)

    def positive_targets(self) -> np.ndarray:
        """Expected daily positives per territory for a random user sample."""
        w = self.volume / self.volume.sum()
        return self.config.daily_positives * w

    def logits(self, users: np.ndarray, titles: np.ndarray, include_bias: bool = True) -> np.ndarray:
        """Ground-truth logits for every (user, title) pair of the two index arrays (outer)."""
        users = np.asarray(users)
        titles = np.asarray(titles)
        terr = self.user_territory[users]
        if terr.size and np.any(terr != terr[0]):
            raise ValueError("logits() expects users from a single territory")
        k = int(terr[0]) if terr.size else 0
        g = self.group_map[k]
        pref = self.config.preference_scale * (self.user_latents[users] @ self.group_transforms[g] @ self.title_latents[titles].T)
        z = pref + self.local_pop[titles, k][None, :] + self.global_pop[titles][None, :] + self.user_engagement[users][:, None]
        if include_bias:
            z = z + self.territory_bias[k]
        return z


def _projection(rng: np.random.Generator, k: int, dim: int) -> np.ndarray:
    if dim >= k:
        q, _ = np.linalg.qr(rng.normal(size=(dim, k)))
        return q.T
    return rng.normal(size=(k, dim)) / np.sqrt(k)


def _calibrate_bias(z: np.ndarray, horizon: int, rate: float) -> float:
    # expected first-time positives per user-day over the horizon equals rate
    def excess(b):
        p = expit(z + b)
        return np.mean(np.sum(-np.expm1(horizon * np.log1p(-p)), axis=1)) / horizon - rate

    return float(brentq(excess, -40.0, 20.0, xtol=1e-10))


def build_world(config: DataConfig, seed: int) -> World:
    """Construct the synthetic universe and simulate its discovery history."""
    config.validate()
    c = config
    rng = np.random.default_rng([seed, 0])
    T, G, k = c.n_territories, c.n_groups, c.latent_dim
    volume = np.asarray(c.imbalance_profile, dtype=np.float64)
    is_major = volume >= 0.5 * volume.max()
    group_map = np.asarray(c.group_map, dtype=np.int64) if c.group_map is not None else snake_groups(volume, G)

    # group preference transforms, redrawn until pairwise distinct enough
    transforms = None
    for _ in range(100):
        cand = np.stack([np.eye(k) + c.group_strength * rng.normal(size=(k, k)) / np.sqrt(k) for _ in range(G)])
        if G == 1:
            transforms = cand
            break
        dist = min(np.linalg.norm(cand[a] - cand[b]) / np.sqrt(k) for a in range(G) for b in range(a + 1, G))
        if dist >= c.min_group_distance:
            transforms = cand
            break
    if transforms is None:
        raise ConfigError("could not draw group transforms meeting min_group_distance; raise group_strength")

    if G > 1 and is_major.sum() >= G and (~is_major).sum() >= G:
        for g in range(G):
            members = group_map == g
            if not (is_major[members].any() and (~is_major[members]).any()):
                raise ConfigError(f"group {g} must contain both major and minor territories")

    # catalogue
    n_global = int(round(c.n_titles * c.global_fraction)) if G > 1 or T > 1 else 0
    n_global = min(n_global, c.n_titles)
    scope = np.zeros((c.n_titles, T), dtype=bool)
    is_global = np.zeros(c.n_titles, dtype=bool)
    is_global[:n_global] = True
    for j in range(n_global):
        while True:
            avail = rng.random(T) < c.global_availability
            if len(set(group_map[avail].tolist())) >= min(2, G) and avail.sum() >= 2:
                break
        scope[j] = avail
    local_home = rng.permutation(np.arange(c.n_titles - n_global) % T)
    scope[np.arange(n_global, c.n_titles), local_home] = True

    global_pop = np.zeros(c.n_titles)
    global_pop[:n_global] = rng.normal(c.global_pop_mean, c.global_pop_sd, n_global)
    local_pop = np.full((c.n_titles, T), np.nan)
    affinity = rng.normal(0.0, c.group_affinity_sd, size=(n_global, G))
    jitter = rng.normal(0.0, c.territory_pop_sd, size=(c.n_titles, T))
    local_pop[:n_global] = affinity[:, group_map] + jitter[:n_global]
    local_pop[n_global:, :] = (rng.normal(c.local_pop_mean, c.local_pop_sd, c.n_titles - n_global)[:, None]
                               + jitter[n_global:])
    # groups differ in how strongly they favour home-grown content: evenly
    # spaced offsets in [-range, range], dealt to groups at random
    local_pref = np.linspace(-c.local_preference_range, c.local_preference_range, G)[rng.permutation(G)] if G > 1 else np.zeros(1)
    local_pop[n_global:, :] += local_pref[group_map][None, :]
    local_pop[~scope] = np.nan

    title_latents = rng.normal(0.0, 1.0 / np.sqrt(k), size=(c.n_titles, k))
    q_title = _projection(rng, k, c.title_dim)
    title_emb = title_latents @ q_title + rng.normal(0.0, c.embedding_noise, size=(c.n_titles, c.title_dim))
    # title encoders know whether a title is a local production
    locality = rng.normal(size=c.title_dim)
    title_emb[~is_global] += c.locality_signal * locality / np.linalg.norm(locality)

    # population, less skewed than volume so minor territories have users to spare
    share = volume ** c.population_exponent
    pop = np.maximum(1, np.floor(c.population * share / share.sum()).astype(np.int64))
    pop[np.argmax(pop)] += c.population - pop.sum()
    user_territory = np.repeat(np.arange(T), pop)
    q_user = _projection(rng, k, c.user_dim)
    # upstream user encoders see the territory; expose it as a fixed offset
    origin = c.territory_signal * (rng.normal(0.0, 1.0 / np.sqrt(c.user_dim), size=(G, c.user_dim))[group_map]
                                   + 0.5 * rng.normal(0.0, 1.0 / np.sqrt(c.user_dim), size=(T, c.user_dim)))
    n = user_territory.size
    user_latents = np.empty((n, k))
    user_eng = np.empty(n)
    user_emb = np.empty((n, c.user_dim))
    bias = np.zeros(T)

    world = World(
        config=c, seed=seed, volume=volume, is_major=is_major, group_map=group_map,
        title_scope=scope, title_is_global=is_global, global_pop=global_pop, local_pop=local_pop,
        group_transforms=transforms, title_latents=title_latents, title_embeddings=title_emb,
        user_territory=user_territory, user_latents=user_latents, user_engagement=user_eng,
        user_embeddings=user_emb, territory_bias=bias,
    )

    targets = world.positive_targets()
    expected_users = c.n_random_users * volume / volume.sum()
    hist_u, hist_t, hist_d = [], [], []
    for terr in range(T):
        # independent per-territory stream: output does not depend on processing order
        trng = np.random.default_rng([seed, 1, terr])
        users = world.users_in(terr)
        user_latents[users] = trng.normal(0.0, 1.0 / np.sqrt(k), size=(users.size, k))
        user_eng[users] = trng.normal(0.0, c.engagement_sd, size=users.size)
        user_emb[users] = (user_latents[users] @ q_user + origin[terr]
                           + trng.normal(0.0, c.embedding_noise, size=(users.size, c.user_dim)))
        titles = world.titles_in_scope(terr)
        z = world.logits(users, titles, include_bias=False)
        calib = z
        if users.size > CALIBRATION_USERS:
            calib = z[trng.choice(users.size, CALIBRATION_USERS, replace=False)]
        rate = targets[terr] / max(expected_users[terr], 1e-12)
        bias[terr] = _calibrate_bias(calib, c.horizon, rate)
        p = expit(z + bias[terr])
        # day of the first discovery: geometric number of failed days before the first success
        u01 = trng.random(p.shape)
        with np.errstate(divide="ignore"):
            first = np.floor(np.log(u01) / np.log1p(-p))
        ui, tj = np.nonzero(first < c.horizon)
        hist_u.append(users[ui])
        hist_t.append(titles[tj])
        hist_d.append(first[ui, tj].astype(np.int64))

    hu, ht, hd = np.concatenate(hist_u), np.concatenate(hist_t), np.concatenate(hist_d)
    order = np.lexsort((ht, hu, hd, user_territory[hu]))
    world.history_user, world.history_title, world.history_day = hu[order], ht[order], hd[order]
    window = np.isin(world.history_day, np.asarray(c.activity_window))
    world.active = np.zeros(n, dtype=bool)
    world.active[world.history_user[window]] = True
    return world


def label_probability(world: World, user: int, title: int) -> float:
    """Ground-truth probability that ``user`` discovers ``title`` on a given day."""
    terr = int(world.user_territory[user])
    if not world.title_scope[title, terr]:
        raise ValueError(f"title {title} is not available in territory {terr} (user {user})")
    return float(expit(world.logits(np.array([user]), np.array([title]))[0, 0]))


def sample_labels(world: World, users: np.ndarray, titles: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Bernoulli labels for (user, title) pairs; returns (labels, probabilities)."""
    probs = np.array([label_probability(world, int(u), int(t)) for u, t in zip(users, titles)])
    return (rng.random(probs.size) < probs).astype(np.int64), probs


@dataclass
class UserSample:
    random_ids: np.ndarray
    active_ids: np.ndarray

    @property
    def all_ids(self) -> np.ndarray:
        return np.sort(np.concatenate([self.random_ids, self.active_ids]))


def _largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    raw = total * weights / weights.sum()
    out = np.floor(raw).astype(np.int64)
    rest = total - out.sum()
    if rest:
        out[np.argsort(-(raw - out), kind="stable")[:rest]] += 1
    return out


def allocate(total: int, weights, lower=None, upper=None) -> np.ndarray:
    """Integer split of ``total`` proportional to ``weights`` within bounds.

    Territories pushed outside ``[lower, upper]`` are pinned at the bound and
    the remainder is re-split over the rest until nothing moves.
    """
    weights = np.asarray(weights, dtype=np.float64)
    n = weights.size
    lower = np.zeros(n, dtype=np.int64) if lower is None else np.broadcast_to(np.asarray(lower, dtype=np.int64), (n,))
    upper = np.full(n, max(total, 0)) if upper is None else np.asarray(upper, dtype=np.int64)
    lower = np.minimum(lower, upper)
    if total < lower.sum() or total > upper.sum():
        raise ConfigError(f"cannot place {total} users within per-territory bounds [{lower.sum()}, {upper.sum()}]")
    pinned = np.full(n, -1, dtype=np.int64)
    while True:
        free = pinned < 0
        rest = total - pinned[~free].sum()
        out = pinned.copy()
        out[free] = _largest_remainder(rest, weights[free]) if free.any() else 0
        low, high = free & (out < lower), free & (out > upper)
        if not (low.any() or high.any()):
            return out
        pinned[low] = lower[low]
        pinned[high] = upper[high]


def sample_users(world: World, n_random: int, n_active: int, seed: int = 0, exclude=None,
                 min_per_territory: int = 0, active_exponent: float = 0.0) -> UserSample:
    """Volume-weighted random users, then a disjoint draw of active users.

    The random part is allocated to territories in proportion to their
    volume (largest-remainder rounding, optionally floored at
    ``min_per_territory``) and drawn uniformly inside each territory. The
    active part comes only from active users not already chosen; territory
    quotas follow ``volume ** active_exponent`` (0 = equal quotas), capped by
    what each territory has available.
    """
    rng = np.random.default_rng([seed, 2])
    taken = np.zeros(world.n_users, dtype=bool)
    if exclude is not None:
        taken[np.asarray(exclude, dtype=np.int64)] = True
    free = np.array([np.count_nonzero(~taken[world.users_in(t)]) for t in range(world.n_territories)])
    if n_random > free.sum():
        raise ConfigError(f"requested {n_random} users but only {free.sum()} are free")
    alloc = allocate(n_random, world.volume, lower=min_per_territory, upper=free)
    chosen = []
    for terr in range(world.n_territories):
        pool = world.users_in(terr)
        pool = pool[~taken[pool]]
        chosen.append(rng.choice(pool, size=alloc[terr], replace=False))
    random_ids = np.sort(np.concatenate(chosen)) if chosen else np.zeros(0, dtype=np.int64)
    taken[random_ids] = True
    active_ids = np.zeros(0, dtype=np.int64)
    if n_active:
        pools = [u[world.active[u] & ~taken[u]] for u in (world.users_in(t) for t in range(world.n_territories))]
        avail = np.array([p.size for p in pools])
        if n_active > avail.sum():
            raise ConfigError(f"only {avail.sum()} active users available, {n_active} requested")
        quota = allocate(n_active, world.volume ** active_exponent, upper=avail)
        active_ids = np.sort(np.concatenate([rng.choice(p, size=q, replace=False) for p, q in zip(pools, quota)]))
    return UserSample(random_ids.astype(np.int64), active_ids.astype(np.int64))


INTERACTION_FIELDS = ("user_id", "title_id", "territory", "day", "label")


@dataclass
class Interactions:
    user_id: np.ndarray
    title_id: np.ndarray
    territory: np.ndarray
    day: np.ndarray
    label: np.ndarray

    def __post_init__(self):
        for f in INTERACTION_FIELDS:
            setattr(self, f, np.asarray(getattr(self, f), dtype=np.int64).reshape(-1))
        if len({getattr(self, f).size for f in INTERACTION_FIELDS}) != 1:
            raise ValueError("interaction columns differ in length")

    def __len__(self) -> int:
        return self.label.size

    @classmethod
    def empty(cls) -> "Interactions":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, z)

    def select(self, mask) -> "Interactions":
        return Interactions(*(getattr(self, f)[mask] for f in INTERACTION_FIELDS))

    @classmethod
    def concat(cls, parts) -> "Interactions":
        parts = list(parts)
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in INTERACTION_FIELDS))

    def canonical(self) -> "Interactions":
        order = np.lexsort((self.label, self.title_id, self.user_id, self.day, self.territory))
        return self.select(order)

    def positives(self) -> "Interactions":
        return self.select(self.label == 1)

    def to_csv_text(self, meta: dict) -> str:
        buf = io.StringIO()
        buf.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(INTERACTION_FIELDS)
        w.writerows(zip(*(getattr(self, f).tolist() for f in INTERACTION_FIELDS)))
        return buf.getvalue()

    def save(self, path, meta: dict) -> None:
        Path(path).write_text(self.to_csv_text(meta))

    @classmethod
    def load(cls, path) -> tuple["Interactions", dict]:
        with open(path) as fh:
            first = fh.readline()
            if not first.startswith("# "):
                raise ValueError(f"{path}: missing JSON header line")
            meta = json.loads(first[2:])
            header = fh.readline().strip().split(",")
            if tuple(header) != INTERACTION_FIELDS:
                raise ValueError(f"{path}: unexpected columns {header}")
            data = np.loadtxt(fh, delimiter=",", dtype=np.int64, ndmin=2)
        if data.size == 0:
            return cls.empty(), meta
        return cls(*(data[:, i] for i in range(len(INTERACTION_FIELDS)))), meta


def generate_interactions(world: World, users, days, alpha: float, seed: int = 0) -> Interactions:
    """Positives from the simulated history plus alpha-ratio uniform negatives.

    For every (territory, day) slice, ``round(alpha * positives)`` negatives
    are drawn without replacement from pairs of (slice user, in-scope title)
    that the user has not discovered on or before that day.
    """
    if alpha <= 0:
        raise ConfigError(f"alpha must be > 0, got {alpha}")
    days = sorted(set(int(d) for d in days))
    if not days:
        raise ConfigError("days must be non-empty")
    users = np.unique(np.asarray(users, dtype=np.int64))
    in_set = np.zeros(world.n_users, dtype=bool)
    in_set[users] = True
    hmask = in_set[world.history_user]
    hu, ht, hd = world.history_user[hmask], world.history_title[hmask], world.history_day[hmask]
    parts = []
    for terr in range(world.n_territories):
        rng = np.random.default_rng([seed, 3, terr])
        t_users = users[world.user_territory[users] == terr]
        titles = world.titles_in_scope(terr)
        tmask = world.user_territory[hu] == terr
        tu, tt, td = hu[tmask], ht[tmask], hd[tmask]
        u_pos = np.searchsorted(t_users, tu)
        j_pos = np.searchsorted(titles, tt)
        pair_code = u_pos * titles.size + j_pos
        n_pairs = t_users.size * titles.size
        for day in days:
            today = td == day
            n_pos = int(today.sum())
            pos = Interactions(tu[today], tt[today], np.full(n_pos, terr), np.full(n_pos, day), np.ones(n_pos))
            need = int(round(alpha * n_pos))
            seen = np.unique(pair_code[td <= day])
            if need > n_pairs - seen.size:
                raise ConfigError(
                    f"alpha={alpha} needs {need} negatives in territory {terr} day {day} "
                    f"but only {n_pairs - seen.size} unseen pairs exist"
                )
            if need:
                draw = rng.choice(n_pairs, size=min(n_pairs, need + seen.size), replace=False)
                draw = draw[~np.isin(draw, seen)][:need]
                neg = Interactions(t_users[draw // titles.size], titles[draw % titles.size],
                                   np.full(need, terr), np.full(need, day), np.zeros(need))
                parts.extend([pos, neg])
            else:
                parts.append(pos)
    return Interactions.concat(parts).canonical()


@dataclass
class Split:
    train: Interactions
    tests: dict[int, Interactions]
    incremental: dict[int, Interactions]


def split_days(train_source: Interactions, test_source: Interactions, train_days, test_days) -> Split:
    """Partition by day: one train set, one test set per test day.

    ``train_source`` holds the training users' interactions over the whole
    horizon; its test-day slices become the incremental fine-tuning data.
    ``test_source`` holds interactions of a disjoint user sample.
    """
    train_days = sorted(set(int(d) for d in train_days))
    test_days = sorted(set(int(d) for d in test_days))
    if not test_days:
        raise ConfigError("test day range is empty")
    if not train_days:
        raise ConfigError("train day range is empty")
    if set(train_days) & set(test_days):
        raise ConfigError(f"train days {train_days} overlap test days {test_days}")
    if min(test_days) <= max(train_days):
        raise ConfigError("test days must come after all train days")
    shared = np.intersect1d(np.unique(train_source.user_id), np.unique(test_source.user_id))
    if shared.size:
        raise ConfigError(f"{shared.size} users appear in both train and test sources (e.g. {shared[0]})")
    train = train_source.select(np.isin(train_source.day, train_days))
    tests = {d: test_source.select(test_source.day == d) for d in test_days}
    incremental = {d: train_source.select(train_source.day == d) for d in test_days}
    return Split(train, tests, incremental)


@dataclass
class DatasetBundle:
    """Everything the trainer needs for the three model variants."""

    world: World
    users_random: UserSample
    users_test: UserSample
    random_split: Split
    upsampled_split: Split

    def variant(self, name: str) -> Split:
        if name == "random":
            return self.random_split
        if name == "upsampled":
            return self.upsampled_split
        raise KeyError(name)


def build_datasets(world: World, seed: int) -> DatasetBundle:
    c = world.config
    users = sample_users(world, c.n_random_users, c.n_active_upsample, seed=seed,
                         active_exponent=c.active_exponent)
    test_users = sample_users(world, c.n_test_users, 0, seed=seed + 1_000_003, exclude=users.all_ids,
                              min_per_territory=c.min_test_users_per_territory)
    horizon = range(c.horizon)
    inter_random = generate_interactions(world, users.random_ids, horizon, c.alpha, seed=seed)
    inter_up = generate_interactions(world, users.all_ids, horizon, c.alpha, seed=seed + 1)
    inter_test = generate_interactions(world, test_users.random_ids, c.test_day_range, c.alpha, seed=seed + 2)
    return DatasetBundle(
        world=world,
        users_random=users,
        users_test=test_users,
        random_split=split_days(inter_random, inter_test, c.train_day_range, c.test_day_range),
        upsampled_split=split_days(inter_up, inter_test, c.train_day_range, c.test_day_range),
    )


class EmbeddingTable:
    """Row lookup of embeddings by integer id."""

    def __init__(self, ids: np.ndarray, matrix: np.ndarray):
        order = np.argsort(ids, kind="stable")
        self.ids = np.asarray(ids, dtype=np.int64)[order]
        self.matrix = np.asarray(matrix, dtype=np.float64)[order]

    def lookup(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        pos = np.searchsorted(self.ids, ids)
        pos_c = np.minimum(pos, self.ids.size - 1)
        bad = (pos >= self.ids.size) | (self.ids[pos_c] != ids)
        if np.any(bad):
            raise KeyError(f"no embedding for id {int(ids[np.flatnonzero(bad)[0]])}")
        return self.matrix[pos_c]

    def __contains__(self, i) -> bool:
        pos = np.searchsorted(self.ids, i)
        return pos < self.ids.size and self.ids[pos] == i

    def save(self, path) -> None:
        # npy carries its own dtype/shape header; ids in column 0
        np.save(path, np.column_stack([self.ids.astype(np.float64), self.matrix]), allow_pickle=False)

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        arr = np.load(path, allow_pickle=False)
        return cls(arr[:, 0].astype(np.int64), arr[:, 1:])
