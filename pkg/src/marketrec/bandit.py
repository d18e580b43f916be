"""Feed assembly: submodel proposal pooling, value models, and re-ranking.

Several recommenders each propose scored items for a user's feed.  The
baseline lays the proposals out row by row per submodel.  The two value
models instead predict the click probability of (proposal, position, context)
and let a single ranking compete across submodels:

* a ridge regression on one-hot context features plus a hinge-transformed
  score, fit in closed form from logged impressions;
* a small neural network with batch-normalized continuous inputs and an
  optional per-user embedding block.

An epsilon-greedy re-ranker turns values into feed slots with a measurable
exploration rate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from marketrec.nn import BatchNorm, Dense, sgd_step, weighted_bce

LANDINGS = ("category_front", "main_front")
OTHER = "__other__"
IMPRESSION_HEADER = (
    "timestamp\tuser_id\titem_id\tsubmodel\tscore\tposition\tdevice\thour\tweekday\tlanding\tclicked"
)


@dataclass(frozen=True, slots=True)
class SubmodelProposal:
    """One candidate item from one recommender, score normalized to [0, 1]."""

    submodel: str
    item_id: str
    score: float

    def __post_init__(self):
        if not self.submodel or not self.item_id:
            raise ValueError("submodel and item_id must be non-empty")
        if not (0.0 <= self.score <= 1.0) or not np.isfinite(self.score):
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


@dataclass(frozen=True, slots=True)
class FeedContext:
    """Request-side features available when a feed is assembled."""

    device: str
    hour: int
    weekday: int
    landing: str
    location: str = "na"
    user_vector: np.ndarray | None = None

    def __post_init__(self):
        if not self.device:
            raise ValueError("device must be non-empty")
        if not (0 <= self.hour <= 23):
            raise ValueError(f"hour must be in 0..23, got {self.hour}")
        if not (0 <= self.weekday <= 6):
            raise ValueError(f"weekday must be in 0..6, got {self.weekday}")
        if self.landing not in LANDINGS:
            raise ValueError(f"landing must be one of {LANDINGS}, got {self.landing!r}")
        if not self.location:
            raise ValueError("location must be non-empty (use 'na' when unknown)")


@dataclass(frozen=True, slots=True)
class ImpressionRecord:
    """One served slot and whether it was clicked.

    ``location`` is carried in memory for value models but is not a column of
    the impression file; records loaded from disk default it to "na".
    """

    timestamp: int
    user_id: str
    item_id: str
    submodel: str
    score: float
    position: int
    device: str
    hour: int
    weekday: int
    landing: str
    clicked: bool
    location: str = "na"

    def __post_init__(self):
        if self.timestamp < 0:
            raise ValueError(f"timestamp must be >= 0, got {self.timestamp}")
        if not self.user_id or not self.item_id or not self.submodel:
            raise ValueError("user_id, item_id, and submodel must be non-empty")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must lie in [0, 1], got {self.score}")
        if self.position < 0:
            raise ValueError(f"position must be >= 0, got {self.position}")
        if not (0 <= self.hour <= 23):
            raise ValueError(f"hour must be in 0..23, got {self.hour}")
        if not (0 <= self.weekday <= 6):
            raise ValueError(f"weekday must be in 0..6, got {self.weekday}")
        if self.landing not in LANDINGS:
            raise ValueError(f"landing must be one of {LANDINGS}, got {self.landing!r}")

    def context(self) -> FeedContext:
        return FeedContext(self.device, self.hour, self.weekday, self.landing, self.location)


def save_impressions(path: str, impressions: Iterable[ImpressionRecord]) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(IMPRESSION_HEADER + "\n")
        for r in impressions:
            fh.write(
                f"{r.timestamp}\t{r.user_id}\t{r.item_id}\t{r.submodel}\t{r.score:.17g}\t"
                f"{r.position}\t{r.device}\t{r.hour}\t{r.weekday}\t{r.landing}\t{int(r.clicked)}\n"
            )


def load_impressions(path: str) -> list[ImpressionRecord]:
    out = []
    with open(path, newline="") as fh:
        header = fh.readline().rstrip("\n")
        if header != IMPRESSION_HEADER:
            raise ValueError(f"{path}: unexpected impression header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 11:
                raise ValueError(f"{path}:{lineno}: expected 11 fields, got {len(parts)}")
            try:
                out.append(
                    ImpressionRecord(
                        timestamp=int(parts[0]),
                        user_id=parts[1],
                        item_id=parts[2],
                        submodel=parts[3],
                        score=float(parts[4]),
                        position=int(parts[5]),
                        device=parts[6],
                        hour=int(parts[7]),
                        weekday=int(parts[8]),
                        landing=parts[9],
                        clicked=bool(int(parts[10])),
                    )
                )
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out


# --- proposal pooling ---------------------------------------------------------


def collect_proposals(
    proposals: Iterable[SubmodelProposal],
    active_items: frozenset[str] | set[str] | None = None,
    history: frozenset[str] | set[str] | None = None,
) -> list[SubmodelProposal]:
    """Pool submodel candidates into one deduplicated list.

    An item proposed by several submodels keeps its highest-scoring proposal
    (ties to the lexicographically first submodel, so pooling is order
    independent).  Items outside ``active_items`` or inside ``history`` drop.
    """
    best: dict[str, SubmodelProposal] = {}
    for p in proposals:
        if active_items is not None and p.item_id not in active_items:
            continue
        if history is not None and p.item_id in history:
            continue
        cur = best.get(p.item_id)
        if cur is None or (-p.score, p.submodel) < (-cur.score, cur.submodel):
            best[p.item_id] = p
    return sorted(best.values(), key=lambda p: (-p.score, p.item_id))


def rank_row_separated(proposals: Sequence[SubmodelProposal]) -> list[str]:
    """Baseline layout: one row per submodel, submodels in name order.

    Within a row items sort by descending score (ties by id); rows are
    concatenated, so the first submodel alphabetically owns the top of the
    feed no matter how good its items are.  That bluntness is the point: it
    is the reference a learned value model has to beat.
    """
    seen: set[str] = set()
    for p in proposals:
        if p.item_id in seen:
            raise ValueError(f"duplicate item {p.item_id!r}; pool proposals first")
        seen.add(p.item_id)
    ordered = sorted(proposals, key=lambda p: (p.submodel, -p.score, p.item_id))
    return [p.item_id for p in ordered]


# --- epsilon-greedy slot filling ------------------------------------------------


@dataclass(frozen=True, slots=True)
class FeedResult:
    slots: tuple[str, ...]
    explored: tuple[bool, ...]


def explore_slots(
    ranked: Sequence[str],
    slots: int,
    epsilon: float,
    rng: np.random.Generator,
) -> FeedResult:
    """Fill feed slots from a ranked pool with per-slot epsilon exploration.

    Each slot flips one coin: with probability epsilon it is an exploration
    slot served uniformly from everything still unserved, otherwise it takes
    the best remaining candidate.  The explored flags record the coin, which
    makes the realized exploration rate directly measurable downstream.
    """
    if slots < 1:
        raise ValueError(f"slots must be >= 1, got {slots}")
    if not (0.0 <= epsilon <= 1.0):
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    remaining = list(ranked)
    out: list[str] = []
    flags: list[bool] = []
    while remaining and len(out) < slots:
        if rng.random() < epsilon:
            j = int(rng.integers(len(remaining)))
            out.append(remaining.pop(j))
            flags.append(True)
        else:
            out.append(remaining.pop(0))
            flags.append(False)
    return FeedResult(slots=tuple(out), explored=tuple(flags))


def rerank(
    valued: Sequence[tuple[str, float]],
    slots: int,
    epsilon: float = 0.05,
    rng: np.random.Generator | None = None,
) -> FeedResult:
    """Order candidates by predicted value and fill slots with exploration.

    Ties break by ascending item id so equal-value feeds are reproducible.
    """
    ids = [item for item, _ in valued]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate items in valued candidates")
    ranked = [item for item, _ in sorted(valued, key=lambda t: (-t[1], t[0]))]
    rng = rng if rng is not None else np.random.default_rng(0)
    return explore_slots(ranked, slots, epsilon, rng)


# --- shared feature vocabulary ---------------------------------------------------


def _vocab(values: Iterable[str]) -> tuple[str, ...]:
    return tuple(sorted(set(values))) + (OTHER,)


def _one_hot(vocab: Sequence[str], value: str) -> np.ndarray:
    v = np.zeros(len(vocab))
    try:
        v[vocab.index(value)] = 1.0
    except ValueError:
        v[len(vocab) - 1] = 1.0
    return v


def bin_score(score: float, n_buckets: int = 10) -> int:
    """Bucket index of a [0, 1] score; the top bucket absorbs score == 1."""
    if not (0.0 <= score <= 1.0):
        raise ValueError(f"score must lie in [0, 1], got {score}")
    if n_buckets < 1:
        raise ValueError(f"n_buckets must be >= 1, got {n_buckets}")
    return min(int(score * n_buckets), n_buckets - 1)


class BanditFeatureEncoder:
    """Feature map for the closed-form regression value model.

    Layout: hinge pair (min(score, theta), max(score - theta, 0)), score
    bucket one-hot, position one-hot capped at max_position, hour one-hot
    (24), then submodel / device / weekday / landing one-hots, each with an
    ``__other__`` bucket for values unseen at fit time.  The hinge pair sums
    back to the raw score, so the model can express a slope change at theta
    without losing the linear term.
    """

    def __init__(
        self,
        submodels: Sequence[str],
        devices: Sequence[str],
        weekdays: Sequence[str],
        landings: Sequence[str],
        theta: float = 0.8,
        n_buckets: int = 10,
        max_position: int = 50,
    ):
        if not (0.0 < theta < 1.0):
            raise ValueError(f"theta must lie in (0, 1), got {theta}")
        if n_buckets < 1 or max_position < 1:
            raise ValueError("n_buckets and max_position must be >= 1")
        self.submodels = tuple(submodels)
        self.devices = tuple(devices)
        self.weekdays = tuple(weekdays)
        self.landings = tuple(landings)
        for name, vocab in (
            ("submodels", self.submodels),
            ("devices", self.devices),
            ("weekdays", self.weekdays),
            ("landings", self.landings),
        ):
            if vocab[-1:] != (OTHER,):
                raise ValueError(f"{name} vocabulary must end with {OTHER!r}")
        self.theta = theta
        self.n_buckets = n_buckets
        self.max_position = max_position
        self.n_features = (
            2
            + n_buckets
            + max_position
            + 24
            + len(self.submodels)
            + len(self.devices)
            + len(self.weekdays)
            + len(self.landings)
        )

    @classmethod
    def from_impressions(
        cls,
        impressions: Sequence[ImpressionRecord],
        theta: float = 0.8,
        n_buckets: int = 10,
        max_position: int = 50,
    ) -> "BanditFeatureEncoder":
        return cls(
            submodels=_vocab(r.submodel for r in impressions),
            devices=_vocab(r.device for r in impressions),
            weekdays=_vocab(str(r.weekday) for r in impressions),
            landings=_vocab(r.landing for r in impressions),
            theta=theta,
            n_buckets=n_buckets,
            max_position=max_position,
        )

    def encode(
        self,
        submodel: str,
        score: float,
        position: int,
        device: str,
        hour: int,
        weekday: int,
        landing: str,
    ) -> np.ndarray:
        if not (0.0 <= score <= 1.0):
            raise ValueError(f"score must lie in [0, 1], got {score}")
        hinge = np.array([min(score, self.theta), max(score - self.theta, 0.0)])
        bucket = np.zeros(self.n_buckets)
        bucket[bin_score(score, self.n_buckets)] = 1.0
        pos = np.zeros(self.max_position)
        pos[min(max(position, 0), self.max_position - 1)] = 1.0
        hour_oh = np.zeros(24)
        hour_oh[hour] = 1.0
        return np.concatenate(
            [
                hinge,
                bucket,
                pos,
                hour_oh,
                _one_hot(self.submodels, submodel),
                _one_hot(self.devices, device),
                _one_hot(self.weekdays, str(weekday)),
                _one_hot(self.landings, landing),
            ]
        )

    def encode_impression(self, r: ImpressionRecord) -> np.ndarray:
        return self.encode(r.submodel, r.score, r.position, r.device, r.hour, r.weekday, r.landing)


@dataclass
class RegressionBandit:
    """Closed-form linear value model: click probability ~ w . features + b."""

    weights: np.ndarray
    encoder: BanditFeatureEncoder
    ridge_lambda: float
    theta: float

    def value(self, submodel: str, score: float, position: int, context: FeedContext) -> float:
        x = self.encoder.encode(
            submodel, score, position, context.device, context.hour, context.weekday, context.landing
        )
        return float(x @ self.weights[:-1] + self.weights[-1])

    def candidate_values(
        self,
        proposals: Sequence[SubmodelProposal],
        context: FeedContext,
        position: int = 0,
    ) -> np.ndarray:
        return np.array([self.value(p.submodel, p.score, position, context) for p in proposals])


@dataclass(frozen=True)
class RowLayout:
    """Fitted artifact of the row-separated baseline: its submodel rows.

    The baseline has no learned parameters; fitting records the distinct
    submodels seen in the log, in the name order the layout serves them.
    """

    submodels: tuple[str, ...]

    def __post_init__(self):
        if not self.submodels:
            raise ValueError("need at least one submodel")
        if list(self.submodels) != sorted(set(self.submodels)):
            raise ValueError(f"submodels must be unique and name-ordered, got {self.submodels}")


def fit_row_layout(impressions: Sequence[ImpressionRecord]) -> RowLayout:
    if not impressions:
        raise ValueError("no impressions to fit on")
    return RowLayout(tuple(sorted({r.submodel for r in impressions})))


def fit_regression_bandit(
    impressions: Sequence[ImpressionRecord],
    theta: float = 0.8,
    ridge_lambda: float = 1.0,
    n_buckets: int = 10,
    max_position: int = 50,
) -> RegressionBandit:
    """Ridge regression of click outcomes on encoded impression features.

    Identical feature rows are grouped and weighted by their count, which
    leaves the normal equations unchanged while shrinking the solve to the
    number of distinct contexts.  The intercept is excluded from the ridge
    penalty so a uniform click rate is recovered exactly.
    """
    if not impressions:
        raise ValueError("no impressions to fit on")
    if ridge_lambda <= 0.0:
        raise ValueError(f"ridge_lambda must be > 0, got {ridge_lambda}")
    enc = BanditFeatureEncoder.from_impressions(impressions, theta, n_buckets, max_position)
    groups: dict[bytes, list[float]] = {}
    rows: dict[bytes, np.ndarray] = {}
    for r in impressions:
        x = enc.encode_impression(r)
        key = x.tobytes()
        rows[key] = x
        groups.setdefault(key, []).append(1.0 if r.clicked else 0.0)
    F = enc.n_features
    A = np.zeros((F + 1, F + 1))
    b = np.zeros(F + 1)
    for key, ys in groups.items():
        x_aug = np.concatenate([rows[key], [1.0]])
        w = float(len(ys))
        A += w * np.outer(x_aug, x_aug)
        b += w * np.mean(ys) * x_aug
    penalty = np.ones(F + 1) * ridge_lambda
    penalty[-1] = 0.0  # free intercept
    A += np.diag(penalty)
    weights = np.linalg.solve(A, b)
    return RegressionBandit(weights=weights, encoder=enc, ridge_lambda=ridge_lambda, theta=theta)


# --- deep value model -------------------------------------------------------------


class DeepFeatureEncoder:
    """Feature map for the neural value model.

    Continuous block (score, position, hour) is batch-normalized inside the
    model; categorical blocks are one-hots with ``__other__`` buckets, and an
    optional user embedding block rides along untouched.
    """

    N_CONTINUOUS = 3

    def __init__(
        self,
        submodels: Sequence[str],
        devices: Sequence[str],
        weekdays: Sequence[str],
        landings: Sequence[str],
        locations: Sequence[str],
        user_dim: int = 0,
    ):
        self.submodels = tuple(submodels)
        self.devices = tuple(devices)
        self.weekdays = tuple(weekdays)
        self.landings = tuple(landings)
        self.locations = tuple(locations)
        for name, vocab in (
            ("submodels", self.submodels),
            ("devices", self.devices),
            ("weekdays", self.weekdays),
            ("landings", self.landings),
            ("locations", self.locations),
        ):
            if vocab[-1:] != (OTHER,):
                raise ValueError(f"{name} vocabulary must end with {OTHER!r}")
        if user_dim < 0:
            raise ValueError(f"user_dim must be >= 0, got {user_dim}")
        self.user_dim = user_dim
        self.cat_dim = (
            len(self.submodels)
            + len(self.devices)
            + len(self.weekdays)
            + len(self.landings)
            + len(self.locations)
        )
        self.in_dim = self.N_CONTINUOUS + self.cat_dim + user_dim

    @classmethod
    def from_impressions(
        cls,
        impressions: Sequence[ImpressionRecord],
        user_dim: int = 0,
    ) -> "DeepFeatureEncoder":
        return cls(
            submodels=_vocab(r.submodel for r in impressions),
            devices=_vocab(r.device for r in impressions),
            weekdays=_vocab(str(r.weekday) for r in impressions),
            landings=_vocab(r.landing for r in impressions),
            locations=_vocab(r.location for r in impressions),
            user_dim=user_dim,
        )

    def encode_batch(
        self,
        rows: Sequence[tuple[str, float, int, FeedContext]],
        user_vectors: Sequence[np.ndarray | None] | None = None,
    ) -> tuple[np.ndarray, np.ndarray]:
        """(continuous (N, 3), static (N, cat+user)) for submodel/score/position/context rows."""
        n = len(rows)
        cont = np.zeros((n, self.N_CONTINUOUS))
        static = np.zeros((n, self.cat_dim + self.user_dim))
        for i, (submodel, score, position, ctx) in enumerate(rows):
            if not (0.0 <= score <= 1.0):
                raise ValueError(f"score must lie in [0, 1], got {score}")
            cont[i] = (score, float(position), float(ctx.hour))
            cat = np.concatenate(
                [
                    _one_hot(self.submodels, submodel),
                    _one_hot(self.devices, ctx.device),
                    _one_hot(self.weekdays, str(ctx.weekday)),
                    _one_hot(self.landings, ctx.landing),
                    _one_hot(self.locations, ctx.location),
                ]
            )
            static[i, : self.cat_dim] = cat
            if self.user_dim:
                vec = None if user_vectors is None else user_vectors[i]
                if vec is not None:
                    v = np.asarray(vec, dtype=np.float64)
                    if v.shape != (self.user_dim,):
                        raise ValueError(
                            f"user vector has shape {v.shape}, expected ({self.user_dim},)"
                        )
                    static[i, self.cat_dim :] = v
        return cont, static


class DeepBandit:
    """Click-probability network over normalized continuous + one-hot features."""

    def __init__(
        self,
        encoder: DeepFeatureEncoder,
        bn: BatchNorm,
        tower: list[Dense],
    ):
        self.encoder = encoder
        self.bn = bn
        self.tower = tower
        self.w_pos = 1.0
        self.w_neg = 1.0
        self.training_loss: tuple[float, ...] = ()

    @property
    def user_dim(self) -> int:
        return self.encoder.user_dim

    @classmethod
    def build(
        cls,
        encoder: DeepFeatureEncoder,
        hidden: Sequence[int] = (64, 32),
        seed: int = 0,
    ) -> "DeepBandit":
        if any(h < 1 for h in hidden):
            raise ValueError(f"hidden widths must be >= 1, got {hidden}")
        rng = np.random.default_rng(seed)
        widths = [encoder.in_dim, *hidden, 1]
        tower = [
            Dense(widths[i], widths[i + 1], "relu" if i < len(widths) - 2 else "sigmoid", rng)
            for i in range(len(widths) - 1)
        ]
        return cls(encoder=encoder, bn=BatchNorm(DeepFeatureEncoder.N_CONTINUOUS), tower=tower)

    def _forward(self, cont: np.ndarray, static: np.ndarray, train: bool) -> np.ndarray:
        z = self.bn.forward(cont, train=train)
        x = np.concatenate([z, static], axis=1)
        for layer in self.tower:
            x = layer.forward(x)
        return x[:, 0]

    def _backward(self, grad_probs: np.ndarray) -> None:
        g = grad_probs[:, None]
        for layer in reversed(self.tower):
            g = layer.backward(g)
        self.bn.backward(g[:, : DeepFeatureEncoder.N_CONTINUOUS])

    def _zero_grads(self) -> None:
        self.bn.zero_grads()
        for layer in self.tower:
            layer.zero_grads()

    def _sgd(self, lr: float, l2: float) -> None:
        sgd_step(self.bn.params, self.bn.grads, lr, l2)
        for layer in self.tower:
            sgd_step(layer.params, layer.grads, lr, l2)

    def predict(
        self,
        rows: Sequence[tuple[str, float, int, FeedContext]],
        user_vectors: Sequence[np.ndarray | None] | None = None,
    ) -> np.ndarray:
        """Click probabilities in inference mode (frozen normalization stats)."""
        cont, static = self.encoder.encode_batch(rows, user_vectors)
        return self._forward(cont, static, train=False)

    def candidate_values(
        self,
        proposals: Sequence[SubmodelProposal],
        context: FeedContext,
        position: int = 0,
    ) -> np.ndarray:
        rows = [(p.submodel, p.score, position, context) for p in proposals]
        users = None
        if self.encoder.user_dim:
            users = [context.user_vector] * len(proposals)
        return self.predict(rows, users)


def fit_deep_bandit(
    impressions: Sequence[ImpressionRecord],
    user_vectors: Mapping[str, np.ndarray] | None = None,
    hidden: Sequence[int] = (64, 32),
    epochs: int = 6,
    lr: float = 0.05,
    l2: float = 1e-5,
    batch_size: int = 64,
    seed: int = 0,
) -> DeepBandit:
    """Minibatch SGD on class-weighted cross-entropy of click outcomes.

    The positive class weight is the negative/positive count ratio, so rare
    clicks are not drowned out.  Requires both outcomes to be present and at
    least two impressions (batch normalization needs a batch).
    """
    if len(impressions) < 2:
        raise ValueError("need at least 2 impressions")
    y = np.array([1.0 if r.clicked else 0.0 for r in impressions])
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError(
            f"need both clicked and unclicked impressions, got {n_pos} positive / {n_neg} negative"
        )
    user_dim = 0
    if user_vectors:
        user_dim = len(next(iter(user_vectors.values())))
    enc = DeepFeatureEncoder.from_impressions(impressions, user_dim=user_dim)
    model = DeepBandit.build(enc, hidden=hidden, seed=seed)
    model.w_pos = n_neg / n_pos
    model.w_neg = 1.0

    rows = [(r.submodel, r.score, r.position, r.context()) for r in impressions]
    users = None
    if user_dim:
        users = [user_vectors.get(r.user_id) for r in impressions]
    cont, static = enc.encode_batch(rows, users)

    rng = np.random.default_rng(seed)
    order = np.arange(len(impressions))
    losses = []
    for _ in range(epochs):
        rng.shuffle(order)
        total, seen = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            if idx.size < 2:
                continue  # normalization is undefined on a single row
            model._zero_grads()
            probs = model._forward(cont[idx], static[idx], train=True)
            loss, grad = weighted_bce(probs, y[idx], model.w_pos, model.w_neg)
            model._backward(grad)
            model._sgd(lr, l2)
            total += loss * idx.size
            seen += idx.size
        losses.append(total / seen)
    model.training_loss = tuple(losses)
    return model
