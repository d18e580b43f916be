"""Short-horizon sequence recommendation over click streams.

A GRU reads the embeddings of a user's recent clicks and a linear head emits
one predicted embedding per future step.  Training minimizes mean cosine
distance between predicted and actual next-item embeddings, so ranking at
serve time is nearest-neighbour search against the catalog.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from marketrec.events import EventKind, EventLog
from marketrec.nn import GRU, Dense, cosine_contrastive, sgd_step


@dataclass(frozen=True, slots=True)
class SequenceExample:
    user_id: str
    history: tuple[str, ...]
    future: tuple[str, ...]


def build_sequences(log: EventLog, lookback: int = 15, horizon: int = 5) -> list[SequenceExample]:
    """Sliding click windows per user: >= 2 history items, >= 1 future item.

    Conversions are excluded; they are sparse enough that click order carries
    the session signal.  History is capped at ``lookback`` most recent clicks
    and the future at ``horizon`` upcoming ones.
    """
    if lookback < 2:
        raise ValueError(f"lookback must be >= 2, got {lookback}")
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    out: list[SequenceExample] = []
    for user, events in log.by_user(kind=EventKind.CLICK).items():
        clicks = [e.item_id for e in events]
        for t in range(2, len(clicks)):
            out.append(
                SequenceExample(
                    user_id=user,
                    history=tuple(clicks[max(0, t - lookback) : t]),
                    future=tuple(clicks[t : t + horizon]),
                )
            )
    return out


class SequenceModel:
    """GRU encoder plus a linear head emitting ``horizon`` embedding slots."""

    def __init__(
        self,
        lookback: int,
        horizon: int,
        emb_dim: int,
        hidden_dim: int = 64,
        rng: np.random.Generator | None = None,
    ):
        if lookback < 2 or horizon < 1 or emb_dim < 1 or hidden_dim < 1:
            raise ValueError(
                f"bad dimensions: lookback={lookback} horizon={horizon} "
                f"emb_dim={emb_dim} hidden_dim={hidden_dim}"
            )
        rng = rng if rng is not None else np.random.default_rng(0)
        self.lookback = lookback
        self.horizon = horizon
        self.emb_dim = emb_dim
        self.hidden_dim = hidden_dim
        self.gru = GRU(emb_dim, hidden_dim, rng=rng)
        self.proj = Dense(hidden_dim, horizon * emb_dim, "identity", rng)
        self.training_loss: tuple[float, ...] = ()

    def forward(self, history_vectors: np.ndarray) -> np.ndarray:
        """(T, emb) history -> (horizon, emb) predicted embeddings."""
        hist = np.asarray(history_vectors, dtype=np.float64)
        if hist.ndim != 2 or hist.shape[1] != self.emb_dim:
            raise ValueError(f"history must be (T, {self.emb_dim}), got {hist.shape}")
        if hist.shape[0] > self.lookback:
            hist = hist[-self.lookback :]
        hs = self.gru.forward(hist)
        out = self.proj.forward(hs[-1])
        self._last_T = hs.shape[0]
        return out.reshape(self.horizon, self.emb_dim)

    def _backward(self, grad_preds: np.ndarray) -> None:
        dh_last = self.proj.backward(grad_preds.reshape(-1))
        grad_hs = np.zeros((self._last_T, self.hidden_dim))
        grad_hs[-1] = dh_last
        self.gru.backward(grad_hs)

    def _zero_grads(self) -> None:
        self.gru.zero_grads()
        self.proj.zero_grads()

    def _sgd(self, lr: float, l2: float) -> None:
        sgd_step(self.gru.params, self.gru.grads, lr, l2)
        sgd_step(self.proj.params, self.proj.grads, lr, l2)


def _embed_items(items: Sequence[str], table: Mapping[str, np.ndarray]) -> np.ndarray:
    rows = []
    for item in items:
        if item not in table:
            raise KeyError(f"no embedding for item {item!r}")
        rows.append(np.asarray(table[item], dtype=np.float64))
    return np.stack(rows)


def example_loss(
    model: SequenceModel,
    history_vectors: np.ndarray,
    future_vectors: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Mean cosine distance over the aligned future steps.

    Returns the loss and its gradient w.r.t. the (horizon, emb) predictions;
    slots beyond the available future get zero gradient.
    """
    preds = model.forward(history_vectors)
    n_aligned = min(future_vectors.shape[0], model.horizon)
    if n_aligned == 0:
        raise ValueError("future must contain at least one item")
    total = 0.0
    grad = np.zeros_like(preds)
    for j in range(n_aligned):
        loss_j, g_pred, _ = cosine_contrastive(preds[j], future_vectors[j], similar=True)
        total += loss_j
        grad[j] = g_pred
    return total / n_aligned, grad / n_aligned


def train_sequence(
    examples: Sequence[SequenceExample],
    embeddings: Mapping[str, np.ndarray],
    lookback: int = 15,
    horizon: int = 5,
    hidden_dim: int = 64,
    epochs: int = 5,
    lr: float = 0.05,
    l2: float = 0.0,
    seed: int = 0,
) -> SequenceModel:
    """Fit the sequence model by per-example SGD."""
    if not examples:
        raise ValueError("no training examples")
    emb_dim = len(next(iter(embeddings.values())))
    rng = np.random.default_rng(seed)
    model = SequenceModel(lookback, horizon, emb_dim, hidden_dim, rng=rng)
    cached = [
        (_embed_items(ex.history, embeddings), _embed_items(ex.future, embeddings))
        for ex in examples
    ]
    order = np.arange(len(examples))
    losses = []
    for _ in range(epochs):
        rng.shuffle(order)
        total = 0.0
        for idx in order:
            hist, fut = cached[idx]
            model._zero_grads()
            loss, grad_preds = example_loss(model, hist, fut)
            model._backward(grad_preds)
            model._sgd(lr, l2)
            total += loss
        losses.append(total / len(examples))
    model.training_loss = tuple(losses)
    return model


def predict_next(
    model: SequenceModel,
    embeddings: Mapping[str, np.ndarray],
    history: Sequence[str],
) -> np.ndarray:
    """(horizon, emb) predicted embeddings for the upcoming clicks."""
    if len(history) < 2:
        raise ValueError(f"history must hold at least 2 items, got {len(history)}")
    return model.forward(_embed_items(history, embeddings))


def seq_recommend(
    model: SequenceModel,
    embeddings: Mapping[str, np.ndarray],
    history: Sequence[str],
    top_n: int = 10,
    exclude: frozenset[str] | None = None,
) -> list[tuple[str, float]]:
    """Rank the catalog by best cosine against any predicted future slot.

    History items are always excluded; ``exclude`` adds to that.  Ties break
    by ascending item id.
    """
    preds = predict_next(model, embeddings, history)
    norms = np.linalg.norm(preds, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("model produced a zero prediction vector")
    unit_preds = preds / norms[:, None]
    banned = set(history) | (set(exclude) if exclude else set())
    scored = []
    for item, vec in embeddings.items():
        if item in banned:
            continue
        v = np.asarray(vec, dtype=np.float64)
        n = np.linalg.norm(v)
        score = 0.0 if n == 0.0 else float(np.max(unit_preds @ v) / n)
        scored.append((item, score))
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored[:top_n]


def seq_accuracy(
    model: SequenceModel,
    embeddings: Mapping[str, np.ndarray],
    examples: Sequence[SequenceExample],
    top_n: int = 10,
) -> float:
    """Fraction of examples whose top-n list contains a true future item."""
    if not examples:
        raise ValueError("no evaluation examples")
    hits = 0
    for ex in examples:
        recs = seq_recommend(model, embeddings, ex.history, top_n)
        rec_ids = {item for item, _ in recs}
        if rec_ids & set(ex.future):
            hits += 1
    return hits / len(examples)
