"""Fused item embeddings from behavioral, text, image, and location sources.

A gated encoder concatenates whatever per-source vectors an item has (missing
sources are masked out of the softmax gate) and compresses the result through
a small dense tower.  Training is Siamese: pairs of items converted by the
same user on the same day pull together under a cosine contrastive loss,
random cross-category pairs push apart.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from marketrec.events import SECONDS_PER_DAY, EventKind, EventLog
from marketrec.nn import AttentionGate, Dense, cosine_contrastive, sgd_step

SOURCE_ORDER = ("behavioral", "text", "image", "location")


@dataclass(frozen=True, slots=True)
class TrainingPair:
    item_a: str
    item_b: str
    similar: bool


class ItemRepresentationSet:
    """Per-source item vectors with a fixed dimension per source.

    Sources are the canonical four; any subset may be supplied.  An item may
    appear in some sources and not others, which is the normal condition the
    gate is there to absorb.
    """

    def __init__(self, by_source: Mapping[str, Mapping[str, np.ndarray]]):
        unknown = set(by_source) - set(SOURCE_ORDER)
        if unknown:
            raise ValueError(f"unknown sources {sorted(unknown)}; expected subset of {SOURCE_ORDER}")
        self.sources = tuple(s for s in SOURCE_ORDER if s in by_source and by_source[s])
        if not self.sources:
            raise ValueError("need at least one non-empty source")
        self._vectors: dict[str, dict[str, np.ndarray]] = {}
        self.dims: dict[str, int] = {}
        for source in self.sources:
            table = {}
            for item_id, vec in by_source[source].items():
                v = np.asarray(vec, dtype=np.float64)
                if v.ndim != 1:
                    raise ValueError(f"{source} vector for {item_id!r} must be 1-D, got shape {v.shape}")
                dim = self.dims.setdefault(source, v.shape[0])
                if v.shape[0] != dim:
                    raise ValueError(
                        f"{source} vectors disagree on dimension: {item_id!r} has {v.shape[0]}, expected {dim}"
                    )
                table[item_id] = v
            self._vectors[source] = table

    @property
    def items(self) -> tuple[str, ...]:
        """Sorted union of item ids across sources."""
        all_ids: set[str] = set()
        for table in self._vectors.values():
            all_ids.update(table)
        return tuple(sorted(all_ids))

    def blocks(self, item_id: str) -> list[np.ndarray | None]:
        """This item's vector per source, None where the source lacks it."""
        return [self._vectors[s].get(item_id) for s in self.sources]

    def coverage(self, item_id: str) -> tuple[str, ...]:
        return tuple(s for s in self.sources if item_id in self._vectors[s])


def mine_co_converted_pairs(log: EventLog) -> list[TrainingPair]:
    """Similar pairs: two distinct items converted by one user within one day.

    Days are aligned calendar buckets (timestamp // 86400), so a conversion at
    23:59 and one at 00:01 land in different buckets; the harness cares about
    a cheap, reproducible grouping rather than a sliding window.  Pairs are
    deduplicated and returned sorted with item_a < item_b.
    """
    by_bucket: dict[tuple[str, int], set[str]] = {}
    for ev in log:
        if ev.kind is EventKind.CONVERSION:
            by_bucket.setdefault((ev.user_id, ev.timestamp // SECONDS_PER_DAY), set()).add(ev.item_id)
    pairs: set[tuple[str, str]] = set()
    for items in by_bucket.values():
        if len(items) < 2:
            continue
        for a, b in itertools.combinations(sorted(items), 2):
            pairs.add((a, b))
    return [TrainingPair(a, b, similar=True) for a, b in sorted(pairs)]


def sample_negative_pairs(
    positives: Sequence[TrainingPair],
    item_categories: Mapping[str, str],
    ratio: int = 4,
    seed: int = 0,
) -> list[TrainingPair]:
    """Dissimilar pairs: uniform random item pairs from different categories.

    Draws ratio * len(positives) pairs, skipping same-category draws, exact
    duplicates, and anything that is a known positive.  Bounded retries so a
    degenerate catalog fails loudly instead of spinning.
    """
    if ratio < 1:
        raise ValueError(f"ratio must be >= 1, got {ratio}")
    catalog = sorted(item_categories)
    if len(set(item_categories.values())) < 2:
        raise ValueError("negative sampling needs at least two categories")
    rng = np.random.default_rng(seed)
    needed = ratio * len(positives)
    taken: set[tuple[str, str]] = {(p.item_a, p.item_b) for p in positives}
    out: list[TrainingPair] = []
    attempts = 0
    max_attempts = 200 * max(needed, 1)
    while len(out) < needed:
        attempts += 1
        if attempts > max_attempts:
            raise ValueError(
                f"could not sample {needed} cross-category pairs after {max_attempts} tries; "
                "catalog lacks category diversity"
            )
        i, j = rng.choice(len(catalog), size=2, replace=False)
        a, b = sorted((catalog[i], catalog[j]))
        if item_categories[a] == item_categories[b] or (a, b) in taken:
            continue
        taken.add((a, b))
        out.append(TrainingPair(a, b, similar=False))
    return out


class HybridEncoder:
    """Attention gate over source blocks followed by a dense tower."""

    def __init__(
        self,
        dims: Mapping[str, int],
        tower_widths: Sequence[int] = (256,),
        out_dim: int = 100,
        rng: np.random.Generator | None = None,
    ):
        unknown = set(dims) - set(SOURCE_ORDER)
        if unknown:
            raise ValueError(f"unknown sources {sorted(unknown)}; expected subset of {SOURCE_ORDER}")
        if not dims:
            raise ValueError("need at least one source dimension")
        if out_dim < 1 or any(w < 1 for w in tower_widths):
            raise ValueError("tower widths and out_dim must be >= 1")
        self.sources = tuple(s for s in SOURCE_ORDER if s in dims)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.gate = AttentionGate([dims[s] for s in self.sources], rng=rng)
        widths = [self.gate.total_dim, *tower_widths, out_dim]
        self.tower = [
            Dense(widths[i], widths[i + 1], "relu" if i < len(widths) - 2 else "identity", rng)
            for i in range(len(widths) - 1)
        ]
        self.out_dim = out_dim
        self.training_loss: tuple[float, ...] = ()

    def embed_blocks(self, blocks: list[np.ndarray | None]) -> np.ndarray:
        x = self.gate.forward(blocks)
        for layer in self.tower:
            x = layer.forward(x)
        return x

    def embed(self, reps: ItemRepresentationSet, item_id: str) -> np.ndarray:
        if reps.sources != self.sources:
            raise ValueError(
                f"representation sources {reps.sources} do not match encoder sources {self.sources}"
            )
        return self.embed_blocks(reps.blocks(item_id))

    def _zero_grads(self) -> None:
        self.gate.zero_grads()
        for layer in self.tower:
            layer.zero_grads()

    def _backward(self, grad_out: np.ndarray) -> list[np.ndarray | None]:
        g = grad_out
        for layer in reversed(self.tower):
            g = layer.backward(g)
        return self.gate.backward(g)

    def _sgd(self, lr: float, l2: float) -> None:
        sgd_step(self.gate.params, self.gate.grads, lr, l2)
        for layer in self.tower:
            sgd_step(layer.params, layer.grads, lr, l2)

    def _pair_step_loss(self, blocks_a, blocks_b, similar: bool, margin: float) -> float:
        """One Siamese step: gradients for both branches accumulate in place.

        The branches share parameters and each layer keeps only its latest
        forward cache, so the second branch is re-run forward before its
        backward pass.
        """
        emb_a = self.embed_blocks(blocks_a)
        emb_b = self.embed_blocks(blocks_b)
        loss, grad_a, grad_b = cosine_contrastive(emb_a, emb_b, similar, margin)
        self._backward(grad_b)
        self.embed_blocks(blocks_a)
        self._backward(grad_a)
        return loss


def train_hybrid(
    reps: ItemRepresentationSet,
    pairs: Sequence[TrainingPair],
    tower_widths: Sequence[int] = (256,),
    out_dim: int = 100,
    epochs: int = 10,
    lr: float = 0.05,
    l2: float = 0.0,
    margin: float = 0.2,
    seed: int = 0,
) -> HybridEncoder:
    """Fit the fused encoder on similar/dissimilar item pairs."""
    if not pairs:
        raise ValueError("no training pairs")
    known = set(reps.items)
    for p in pairs:
        missing = {p.item_a, p.item_b} - known
        if missing:
            raise ValueError(f"pair references items with no representations: {sorted(missing)}")
    rng = np.random.default_rng(seed)
    enc = HybridEncoder(reps.dims, tower_widths, out_dim, rng=rng)
    block_cache = {item: reps.blocks(item) for item in known}
    order = np.arange(len(pairs))
    losses = []
    for _ in range(epochs):
        rng.shuffle(order)
        total = 0.0
        for idx in order:
            p = pairs[idx]
            enc._zero_grads()
            total += enc._pair_step_loss(
                block_cache[p.item_a], block_cache[p.item_b], p.similar, margin
            )
            enc._sgd(lr, l2)
        losses.append(total / len(pairs))
    enc.training_loss = tuple(losses)
    return enc


def embed_catalog(enc: HybridEncoder, reps: ItemRepresentationSet) -> dict[str, np.ndarray]:
    """Fused embedding for every item in the representation set."""
    return {item: enc.embed(reps, item) for item in reps.items}


def similar_items(
    embeddings: Mapping[str, np.ndarray],
    item_id: str,
    top_n: int = 10,
) -> list[tuple[str, float]]:
    """Nearest neighbours by cosine, best first, ties broken by ascending id."""
    if item_id not in embeddings:
        raise KeyError(f"unknown item {item_id!r}")
    query = np.asarray(embeddings[item_id], dtype=np.float64)
    qn = np.linalg.norm(query)
    if qn == 0.0:
        raise ValueError(f"item {item_id!r} has a zero embedding")
    scored = []
    for other, vec in embeddings.items():
        if other == item_id:
            continue
        v = np.asarray(vec, dtype=np.float64)
        norm = np.linalg.norm(v)
        cos = 0.0 if norm == 0.0 else float(query @ v / (qn * norm))
        scored.append((other, cos))
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored[:top_n]
