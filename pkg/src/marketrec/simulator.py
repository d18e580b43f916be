"""Synthetic marketplace with known ground truth.

Users and items live in a shared latent space; click probability at a feed
slot is a logistic affinity model under a 1/log2(position + 2) attention
decay.  The generator plants the structures the stack is supposed to
exploit, so every capability has a measurable target:

* item latents cluster by category, and titles draw on per-category
  vocabularies, so text carries category signal;
* image features are a fixed linear projection of the item latent plus
  noise, so images carry latent signal beyond the title;
* user tastes drift as a random walk on the sphere, pre-computed per day so
  parallel arms of an experiment see identical drift;
* items live inside an active window: cold items activate only after the
  warmup window, every item expires after its drawn lifespan, and a few
  "viral" items click well for nearly everyone while their personalization
  signal is damped;
* user activity is bimodal: a heavy minority browses daily, the light
  majority drops in rarely, so per-user behavioral confidence varies wildly.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from marketrec.bandit import FeedContext, ImpressionRecord
from marketrec.content import ItemContent
from marketrec.events import SECONDS_PER_DAY, Event, EventLog

DEVICES = ("android", "ios", "web")
DEVICE_EFFECT = {"android": 0.0, "ios": 0.1, "web": -0.15}
N_COMMON_WORDS = 40
CATEGORY_VOCAB_SIZE = 8
CATEGORY_WORDS_PER_ITEM = 7
COMMON_WORD_PROB = 0.07


@dataclass(frozen=True, slots=True)
class MarketConfig:
    n_users: int = 150
    n_items: int = 200
    n_categories: int = 6
    n_postcodes: int = 8
    latent_dim: int = 8
    image_dim: int = 12
    image_noise: float = 0.1
    warmup_days: int = 20
    sim_days: int = 10
    cold_fraction: float = 0.1
    viral_fraction: float = 0.03
    mean_lifespan_days: float = 365.0
    temperature: float = 1.0
    drift_step: float = 0.05
    heavy_fraction: float = 0.3
    heavy_sessions_per_day: float = 3.0
    light_sessions_per_day: float = 0.4
    organic_exposure: int = 12
    feed_slots: int = 10
    conversion_prob: float = 0.1
    base_logit: float = -2.2
    affinity_weight: float = 2.5
    postcode_bonus: float = 0.6
    viral_boost: float = 1.2
    viral_damping: float = 0.15
    viral_half_life_days: float = math.inf
    t0: int = 1_600_000_000

    def __post_init__(self):
        if self.n_users < 2 or self.n_items < 2:
            raise ValueError("need at least 2 users and 2 items")
        if self.n_categories < 2:
            raise ValueError("need at least 2 categories")
        if not (0.0 <= self.cold_fraction < 1.0):
            raise ValueError(f"cold_fraction must lie in [0, 1), got {self.cold_fraction}")
        if not (0.0 <= self.viral_fraction < 1.0):
            raise ValueError(f"viral_fraction must lie in [0, 1), got {self.viral_fraction}")
        if not (0.0 < self.heavy_fraction < 1.0):
            raise ValueError(f"heavy_fraction must lie in (0, 1), got {self.heavy_fraction}")
        if self.warmup_days < 1 or self.sim_days < 1:
            raise ValueError("warmup_days and sim_days must be >= 1")
        if self.drift_step < 0.0:
            raise ValueError(f"drift_step must be >= 0, got {self.drift_step}")
        if self.mean_lifespan_days <= 0.0:
            raise ValueError(f"mean_lifespan_days must be > 0, got {self.mean_lifespan_days}")
        if self.temperature <= 0.0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.viral_half_life_days <= 0.0:
            raise ValueError(
                f"viral_half_life_days must be > 0, got {self.viral_half_life_days}"
            )
        if not (0.0 <= self.conversion_prob <= 1.0):
            raise ValueError(f"conversion_prob must lie in [0, 1], got {self.conversion_prob}")
        if self.feed_slots < 1 or self.organic_exposure < 1:
            raise ValueError("feed_slots and organic_exposure must be >= 1")


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return v / n


@dataclass
class Market:
    """Generated marketplace state, including per-day drifted user tastes."""

    config: MarketConfig
    seed: int
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]
    categories: tuple[str, ...]
    item_category: dict[str, str]
    item_postcode: dict[str, str]
    user_postcode: dict[str, str]
    user_device: dict[str, str]
    user_favorite_category: dict[str, str]
    heavy_users: frozenset[str]
    cold_items: frozenset[str]
    viral_items: frozenset[str]
    active_from: dict[str, int]
    active_until: dict[str, int]
    item_latent: np.ndarray          # (I, latent_dim)
    user_paths: np.ndarray           # (U, total_days + 1, latent_dim)
    image_map: np.ndarray            # (image_dim, latent_dim)
    image_features: dict[str, np.ndarray]
    titles: dict[str, str]
    descriptions: dict[str, str]
    _user_index: dict[str, int] = field(default_factory=dict)
    _item_index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self._user_index = {u: k for k, u in enumerate(self.user_ids)}
        self._item_index = {i: k for k, i in enumerate(self.item_ids)}

    @property
    def sim_start(self) -> int:
        return self.config.t0 + self.config.warmup_days * SECONDS_PER_DAY

    @property
    def sim_end(self) -> int:
        return self.sim_start + self.config.sim_days * SECONDS_PER_DAY

    @property
    def total_days(self) -> int:
        return self.config.warmup_days + self.config.sim_days

    def day_index(self, timestamp: int) -> int:
        """Whole days since market birth, clamped to the generated horizon."""
        d = (timestamp - self.config.t0) // SECONDS_PER_DAY
        return int(min(max(d, 0), self.total_days))

    def user_vector(self, user_id: str, timestamp: int) -> np.ndarray:
        return self.user_paths[self._user_index[user_id], self.day_index(timestamp)]

    def active_items(self, timestamp: int) -> tuple[str, ...]:
        return tuple(
            i
            for i in self.item_ids
            if self.active_from[i] <= timestamp < self.active_until[i]
        )

    def click_probability(
        self,
        user_id: str,
        item_id: str,
        timestamp: int,
        position: int,
        device: str,
    ) -> float:
        """Planted ground truth: logistic affinity times positional attention.

        The whole logit divides by the noise temperature, so as temperature
        grows every slot converges to the same coin and clicks stop carrying
        taste information.  A finite viral half life makes fads fade: the
        boost halves every that-many days after the item goes live, so an
        item can be a feed magnet during warmup yet a dud by test time.
        """
        cfg = self.config
        u = self.user_vector(user_id, timestamp)
        i = self.item_latent[self._item_index[item_id]]
        personal = cfg.affinity_weight * float(u @ i)
        logit = cfg.base_logit + DEVICE_EFFECT[device]
        if item_id in self.viral_items:
            age_days = max(timestamp - self.active_from[item_id], 0) / SECONDS_PER_DAY
            boost = cfg.viral_boost * 0.5 ** (age_days / cfg.viral_half_life_days)
            logit += boost + cfg.viral_damping * personal
        else:
            logit += personal
        if self.user_postcode[user_id] == self.item_postcode[item_id]:
            logit += cfg.postcode_bonus
        attention = 1.0 / np.log2(position + 2.0)
        return float(attention / (1.0 + np.exp(-logit / cfg.temperature)))

    def item_content(self, item_id: str) -> ItemContent:
        return ItemContent(
            item_id=item_id,
            category=self.item_category[item_id],
            postcode=self.item_postcode[item_id],
            title=self.titles[item_id],
            description=self.descriptions[item_id],
            image_feature=self.image_features[item_id],
        )

    def catalog(self) -> list[ItemContent]:
        return [self.item_content(i) for i in self.item_ids]


def generate_market(config: MarketConfig, seed: int = 0) -> Market:
    """Deterministically build a market from a config and a seed."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA11CE]))
    cfg = config
    user_ids = tuple(f"u{k:04d}" for k in range(cfg.n_users))
    item_ids = tuple(f"i{k:04d}" for k in range(cfg.n_items))
    categories = tuple(f"cat{k:02d}" for k in range(cfg.n_categories))
    postcodes = tuple(f"pc{k:02d}" for k in range(cfg.n_postcodes))

    centers = np.stack([_unit(rng.normal(size=cfg.latent_dim)) for _ in categories])

    item_category = {}
    item_postcode = {}
    item_latent = np.zeros((cfg.n_items, cfg.latent_dim))
    for k, item in enumerate(item_ids):
        ci = int(rng.integers(cfg.n_categories))
        item_category[item] = categories[ci]
        item_postcode[item] = postcodes[int(rng.integers(cfg.n_postcodes))]
        item_latent[k] = _unit(centers[ci] + 0.4 * rng.normal(size=cfg.latent_dim))

    user_postcode = {}
    user_device = {}
    user_favorite = {}
    total_days = cfg.warmup_days + cfg.sim_days
    user_paths = np.zeros((cfg.n_users, total_days + 1, cfg.latent_dim))
    for k, user in enumerate(user_ids):
        user_postcode[user] = postcodes[int(rng.integers(cfg.n_postcodes))]
        user_device[user] = DEVICES[int(rng.integers(len(DEVICES)))]
        ci = int(rng.integers(cfg.n_categories))
        user_favorite[user] = categories[ci]
        v = _unit(centers[ci] + 0.6 * rng.normal(size=cfg.latent_dim))
        user_paths[k, 0] = v
        for d in range(1, total_days + 1):
            v = _unit(v + cfg.drift_step * rng.normal(size=cfg.latent_dim))
            user_paths[k, d] = v

    n_heavy = round(cfg.heavy_fraction * cfg.n_users)
    heavy = frozenset(rng.choice(cfg.n_users, size=n_heavy, replace=False).tolist())
    heavy_users = frozenset(user_ids[k] for k in heavy)

    n_cold = round(cfg.cold_fraction * cfg.n_items)
    cold_idx = frozenset(rng.choice(cfg.n_items, size=n_cold, replace=False).tolist())
    cold_items = frozenset(item_ids[k] for k in cold_idx)
    sim_start = cfg.t0 + cfg.warmup_days * SECONDS_PER_DAY
    sim_end = sim_start + cfg.sim_days * SECONDS_PER_DAY
    active_from = {
        item: (sim_start if item in cold_items else cfg.t0) for item in item_ids
    }
    # lifespans spread over [0.5, 1.5] x the mean; windows are clipped to the
    # horizon so nothing outlives the simulation
    active_until = {
        item: min(
            active_from[item]
            + int(round(cfg.mean_lifespan_days * float(rng.uniform(0.5, 1.5)) * SECONDS_PER_DAY)),
            sim_end,
        )
        for item in item_ids
    }

    warm = [i for i in item_ids if i not in cold_items]
    n_viral = round(cfg.viral_fraction * cfg.n_items)
    viral_items = frozenset(
        warm[k] for k in rng.choice(len(warm), size=min(n_viral, len(warm)), replace=False)
    )

    image_map = rng.normal(size=(cfg.image_dim, cfg.latent_dim)) / np.sqrt(cfg.latent_dim)
    image_features = {
        item: image_map @ item_latent[k] + cfg.image_noise * rng.normal(size=cfg.image_dim)
        for k, item in enumerate(item_ids)
    }

    common_words = [f"common{k:02d}" for k in range(N_COMMON_WORDS)]
    cat_vocab = {
        c: [f"{c}w{k}" for k in range(CATEGORY_VOCAB_SIZE)] for c in categories
    }
    titles = {}
    descriptions = {}
    for item in item_ids:
        vocab = cat_vocab[item_category[item]]
        picks = rng.choice(CATEGORY_VOCAB_SIZE, size=CATEGORY_WORDS_PER_ITEM, replace=False)
        words = [vocab[j] for j in picks]
        extras = [w for w in common_words if rng.random() < COMMON_WORD_PROB]
        titles[item] = " ".join(words[:4])
        descriptions[item] = " ".join(words[4:] + extras)

    return Market(
        config=cfg,
        seed=seed,
        user_ids=user_ids,
        item_ids=item_ids,
        categories=categories,
        item_category=item_category,
        item_postcode=item_postcode,
        user_postcode=user_postcode,
        user_device=user_device,
        user_favorite_category=user_favorite,
        heavy_users=heavy_users,
        cold_items=cold_items,
        viral_items=viral_items,
        active_from=active_from,
        active_until=active_until,
        item_latent=item_latent,
        user_paths=user_paths,
        image_map=image_map,
        image_features=image_features,
        titles=titles,
        descriptions=descriptions,
    )


# --- session machinery ------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class ServedSlot:
    """One feed slot as a policy chose it: provenance plus normalized score."""

    item_id: str
    submodel: str
    score: float


class FeedPolicy(Protocol):
    def serve(
        self,
        user_id: str,
        context: FeedContext,
        active_items: Sequence[str],
        history: tuple[str, ...],
        slots: int,
        day: int,
        rng: np.random.Generator,
    ) -> list[ServedSlot]: ...


def _session_context(market: Market, user_id: str, rng: np.random.Generator) -> tuple[int, str, str]:
    """Hour, device, and landing for one session."""
    hour = int(np.clip(round(rng.normal(19.0, 3.0)), 0, 23))
    if rng.random() < 0.8:
        device = market.user_device[user_id]
    else:
        device = DEVICES[int(rng.integers(len(DEVICES)))]
    landing = "main_front" if rng.random() < 0.7 else "category_front"
    return hour, device, landing


def _session_counts(market: Market, rng: np.random.Generator, n_days: int) -> np.ndarray:
    """(n_days, n_users) session counts, heavy users browsing far more often."""
    cfg = market.config
    rates = np.array(
        [
            cfg.heavy_sessions_per_day if u in market.heavy_users else cfg.light_sessions_per_day
            for u in market.user_ids
        ]
    )
    return rng.poisson(rates, size=(n_days, len(market.user_ids)))


def simulate_organic(market: Market, seed: int = 0) -> EventLog:
    """Warmup browsing without any recommender: random exposure, real clicks.

    This is the training corpus: users see a random slice of the active
    catalog each session and click by ground-truth affinity, with the same
    position decay a feed would have.
    """
    cfg = market.config
    rng = np.random.default_rng(np.random.SeedSequence([market.seed, seed, 0x0B5E55]))
    counts = _session_counts(market, rng, cfg.warmup_days)
    events: list[Event] = []
    for day in range(cfg.warmup_days):
        day_start = cfg.t0 + day * SECONDS_PER_DAY
        active = market.active_items(day_start)
        for uk, user in enumerate(market.user_ids):
            for _ in range(int(counts[day, uk])):
                hour, device, _ = _session_context(market, user, rng)
                ts = day_start + hour * 3600 + int(rng.integers(3600))
                n_seen = min(cfg.organic_exposure, len(active))
                shown = rng.choice(len(active), size=n_seen, replace=False)
                for pos, ai in enumerate(shown):
                    item = active[int(ai)]
                    p = market.click_probability(user, item, ts, pos, device)
                    if rng.random() < p:
                        click_ts = ts + pos
                        events.append(Event(user, item, click_ts, "click"))
                        if rng.random() < cfg.conversion_prob:
                            events.append(Event(user, item, click_ts + 1, "conversion"))
    return EventLog(events)


def simulate_sessions(
    market: Market,
    policy: FeedPolicy,
    start_day: int,
    end_day: int,
    seed: int = 0,
    user_ids: Sequence[str] | None = None,
    history: dict[str, list[str]] | None = None,
) -> tuple[list[ImpressionRecord], EventLog]:
    """Serve feeds with a policy over sim-window days [start_day, end_day).

    Days are relative to the end of warmup.  ``history`` (clicked items per
    user, oldest first, repeats kept) is consulted and updated live, so a
    caller can thread state across several simulation calls and sequence
    models keep their click order.  Policies must only serve active items.
    """
    cfg = market.config
    if not (0 <= start_day < end_day <= cfg.sim_days):
        raise ValueError(
            f"need 0 <= start_day < end_day <= {cfg.sim_days}, got [{start_day}, {end_day})"
        )
    rng = np.random.default_rng(np.random.SeedSequence([market.seed, seed, 0xFEED]))
    users = tuple(user_ids) if user_ids is not None else market.user_ids
    history = history if history is not None else {}
    counts = _session_counts(market, rng, end_day - start_day)
    impressions: list[ImpressionRecord] = []
    events: list[Event] = []
    user_pos = {u: k for k, u in enumerate(market.user_ids)}
    for d, day in enumerate(range(start_day, end_day)):
        day_start = market.sim_start + day * SECONDS_PER_DAY
        active = market.active_items(day_start)
        active_set = frozenset(active)
        weekday = (day_start // SECONDS_PER_DAY) % 7
        for user in users:
            for _ in range(int(counts[d, user_pos[user]])):
                hour, device, landing = _session_context(market, user, rng)
                ts = day_start + hour * 3600 + int(rng.integers(3600))
                ctx = FeedContext(
                    device=device,
                    hour=hour,
                    weekday=int(weekday),
                    landing=landing,
                    location=market.user_postcode[user],
                )
                seen = tuple(history.get(user, ()))
                served = policy.serve(user, ctx, active, seen, cfg.feed_slots, day, rng)
                if len(served) > cfg.feed_slots:
                    raise ValueError(
                        f"policy served {len(served)} slots, feed has {cfg.feed_slots}"
                    )
                ids = [s.item_id for s in served]
                if len(set(ids)) != len(ids):
                    raise ValueError(f"policy served duplicate items: {ids}")
                for s in served:
                    if s.item_id not in active_set:
                        raise ValueError(
                            f"policy served inactive item {s.item_id!r} on day {day} "
                            "(expired, not yet live, or unknown)"
                        )
                for pos, s in enumerate(served):
                    p = market.click_probability(user, s.item_id, ts, pos, device)
                    clicked = bool(rng.random() < p)
                    impressions.append(
                        ImpressionRecord(
                            timestamp=ts + pos,
                            user_id=user,
                            item_id=s.item_id,
                            submodel=s.submodel,
                            score=s.score,
                            position=pos,
                            device=device,
                            hour=hour,
                            weekday=int(weekday),
                            landing=landing,
                            clicked=clicked,
                            location=market.user_postcode[user],
                        )
                    )
                    if clicked:
                        events.append(Event(user, s.item_id, ts + pos, "click"))
                        history.setdefault(user, []).append(s.item_id)
                        if rng.random() < cfg.conversion_prob:
                            events.append(Event(user, s.item_id, ts + pos + 1, "conversion"))
    return impressions, EventLog(events)


# --- experiment orchestration -------------------------------------------------------


def assign_arm(user_id: str, salt: int, fraction: float) -> bool:
    """True when the user belongs to the treatment arm at this ramp fraction.

    The assignment hashes only (salt, user), so it is stable across days and
    monotone in the fraction: once a user enters treatment they stay as the
    ramp grows.
    """
    if not (0.0 <= fraction <= 1.0):
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    digest = hashlib.sha1(f"{salt}:{user_id}".encode()).digest()
    value = int.from_bytes(digest[:8], "big") / 2**64
    return value < fraction


def run_ab_simulation(
    market: Market,
    policy_a: FeedPolicy,
    policy_b: FeedPolicy,
    fraction: float = 0.5,
    start_day: int = 0,
    end_day: int | None = None,
    seed: int = 0,
    ramp=None,
    history: dict[str, list[str]] | None = None,
) -> tuple[list[ImpressionRecord], list[ImpressionRecord]]:
    """Split users over two policies and simulate both arms day by day.

    Both arms run inside one market with shared pre-computed drift, so the
    only difference between them is the policy.  With ``ramp`` given, the
    treatment share follows the plan's fraction for each successive day and
    ``fraction`` is ignored.  ``history`` seeds per-user click history (users
    normally enter an experiment with a past) and is updated live.
    """
    cfg = market.config
    end_day = cfg.sim_days if end_day is None else end_day
    history = {} if history is None else history
    imps_a: list[ImpressionRecord] = []
    imps_b: list[ImpressionRecord] = []
    for day in range(start_day, end_day):
        f = ramp.fraction_on_day(day - start_day) if ramp is not None else fraction
        arm_b_users = [u for u in market.user_ids if assign_arm(u, seed, f)]
        arm_a_users = [u for u in market.user_ids if not assign_arm(u, seed, f)]
        day_a, _ = simulate_sessions(
            market, policy_a, day, day + 1, seed=seed, user_ids=arm_a_users, history=history
        )
        day_b, _ = simulate_sessions(
            market, policy_b, day, day + 1, seed=seed + 1, user_ids=arm_b_users, history=history
        )
        imps_a.extend(day_a)
        imps_b.extend(day_b)
    return imps_a, imps_b


def breakpoint_impressions(n: int, theta: float = 0.8, seed: int = 0) -> list[ImpressionRecord]:
    """Synthetic log where CTR rises with score, then collapses above theta.

    Stale or clickbait inventory shows this shape: the top of the score range
    underdelivers.  Click rate is 0.05 + 0.45 * score below the breakpoint
    and falls linearly toward 0.1 above it.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not (0.0 < theta < 1.0):
        raise ValueError(f"theta must lie in (0, 1), got {theta}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB4EA4]))
    out = []
    devices = ("android", "ios", "web")
    landings = ("main_front", "category_front")
    top = 0.05 + 0.45 * theta
    for k in range(n):
        score = float(rng.random())
        position = int(rng.integers(10))
        if score <= theta:
            p = 0.05 + 0.45 * score
        else:
            p = top - (top - 0.1) * (score - theta) / (1.0 - theta)
        p *= 1.0 / np.log2(position + 2.0)
        out.append(
            ImpressionRecord(
                timestamp=1000 + k,
                user_id=f"u{int(rng.integers(50))}",
                item_id=f"i{int(rng.integers(500))}",
                submodel="mf",
                score=score,
                position=position,
                device=devices[int(rng.integers(3))],
                hour=int(rng.integers(24)),
                weekday=int(rng.integers(7)),
                landing=landings[int(rng.integers(2))],
                clicked=bool(rng.random() < p),
            )
        )
    return out
