"""Feed policies: submodel proposal generators and slot-filling strategies.

A submodel turns one recommender into a stream of scored proposals with a
shared [0, 1] score convention.  Policies pool those proposals and fill feed
slots, either row-by-row per submodel (the baseline) or by a learned value
model comparing candidates across submodels.
"""

from __future__ import annotations

import dataclasses
import zlib
from typing import Mapping, Sequence

import numpy as np

from marketrec.als import FactorModel
from marketrec.bandit import (
    FeedContext,
    SubmodelProposal,
    collect_proposals,
    explore_slots,
    rank_row_separated,
    rerank,
)
from marketrec.sequence import SequenceModel, seq_recommend
from marketrec.simulator import ServedSlot


def minmax_scores(raw: Mapping[str, float]) -> dict[str, float]:
    """Map raw scores onto [0, 1]; a constant batch collapses to 0.5."""
    if not raw:
        return {}
    values = np.array(list(raw.values()), dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    if hi - lo < 1e-12:
        return {item: 0.5 for item in raw}
    return {item: (score - lo) / (hi - lo) for item, score in raw.items()}


class Submodel:
    """Base proposal generator; subclasses fill in _raw_scores."""

    name = "base"

    def _raw_scores(
        self,
        user_id: str,
        context: FeedContext,
        candidates: Sequence[str],
        history: tuple[str, ...],
    ) -> dict[str, float]:
        raise NotImplementedError

    def propose(
        self,
        user_id: str,
        context: FeedContext,
        active_items: Sequence[str],
        history: tuple[str, ...],
        n: int,
    ) -> list[SubmodelProposal]:
        seen = set(history)
        candidates = [i for i in active_items if i not in seen]
        if not candidates:
            return []
        scored = minmax_scores(self._raw_scores(user_id, context, candidates, history))
        ranked = sorted(scored.items(), key=lambda t: (-t[1], t[0]))[:n]
        return [SubmodelProposal(self.name, item, score) for item, score in ranked]


class MFSubmodel(Submodel):
    """Matrix-factorization affinity; silent for users unseen at training."""

    name = "mf"

    def __init__(self, model: FactorModel):
        self.model = model

    def _raw_scores(self, user_id, context, candidates, history):
        idx = self.model.row_index.get(user_id)
        if idx is None:
            return {}
        u = self.model.row_factors[idx]
        col_index = self.model.col_index
        out = {}
        for item in candidates:
            j = col_index.get(item)
            if j is not None:
                out[item] = float(u @ self.model.col_factors[j])
        return out


class SeqSubmodel(Submodel):
    """Sequence continuation; needs at least two embedded history clicks."""

    name = "seq"

    def __init__(self, model: SequenceModel, embeddings: Mapping[str, np.ndarray]):
        self.model = model
        self.embeddings = embeddings

    def propose(self, user_id, context, active_items, history, n):
        known_hist = [i for i in history if i in self.embeddings]
        if len(known_hist) < 2:
            return []
        seen = set(history)
        candidate_emb = {
            i: self.embeddings[i] for i in active_items if i in self.embeddings and i not in seen
        }
        if not candidate_emb:
            return []
        # history vectors ride along only so predict_next can read them;
        # exclude bans every one of them from the ranked output, not just
        # the lookback slice seq_recommend bans on its own
        ranked = seq_recommend(self.model, {**candidate_emb, **{h: self.embeddings[h] for h in known_hist}},
                               known_hist[-self.model.lookback :], top_n=n,
                               exclude=frozenset(known_hist))
        # cosine sits in [-1, 1]; keep the absolute scale rather than min-max
        # so a weak continuation signal stays visibly weak
        return [
            SubmodelProposal(self.name, item, min(max((c + 1.0) / 2.0, 0.0), 1.0))
            for item, c in ranked
        ]

    def _raw_scores(self, user_id, context, candidates, history):
        raise NotImplementedError("SeqSubmodel overrides propose directly")


class PopularitySubmodel(Submodel):
    """Global click counts from the training window."""

    name = "pop"

    def __init__(self, click_counts: Mapping[str, int]):
        self.click_counts = dict(click_counts)

    def _raw_scores(self, user_id, context, candidates, history):
        return {i: float(self.click_counts.get(i, 0)) for i in candidates}


class RecencySubmodel(Submodel):
    """Fresher activation time scores higher; the cold-item advocate."""

    name = "recency"

    def __init__(self, active_from: Mapping[str, int]):
        self.active_from = dict(active_from)

    def _raw_scores(self, user_id, context, candidates, history):
        return {i: float(self.active_from.get(i, 0)) for i in candidates}


class CategorySubmodel(Submodel):
    """Popularity restricted to the user's dominant clicked category."""

    name = "category"

    def __init__(self, item_category: Mapping[str, str], click_counts: Mapping[str, int]):
        self.item_category = dict(item_category)
        self.click_counts = dict(click_counts)

    def _raw_scores(self, user_id, context, candidates, history):
        cats = [self.item_category[i] for i in history if i in self.item_category]
        if not cats:
            return {}
        # ties break toward the alphabetically first category
        fav = min(sorted(set(cats)), key=lambda c: (-cats.count(c), c))
        return {
            i: float(self.click_counts.get(i, 0))
            for i in candidates
            if self.item_category.get(i) == fav
        }


class RandomSubmodel(Submodel):
    """Uniform scores; pure exploration pressure."""

    name = "random"

    def __init__(self, seed: int = 0):
        self.seed = seed

    def _raw_scores(self, user_id, context, candidates, history):
        # crc32, not hash(): string hashing is salted per process and would
        # break bit-reproducible reruns
        rng = np.random.default_rng(
            np.random.SeedSequence([self.seed, zlib.crc32(user_id.encode())])
        )
        return {i: float(rng.random()) for i in candidates}


def _pool(
    submodels: Sequence[Submodel],
    user_id: str,
    context: FeedContext,
    active_items: Sequence[str],
    history: tuple[str, ...],
    per_submodel: int,
) -> list[SubmodelProposal]:
    proposals = []
    for sub in submodels:
        proposals.extend(sub.propose(user_id, context, active_items, history, per_submodel))
    return collect_proposals(proposals, active_items=set(active_items), history=set(history))


class RowSeparatedPolicy:
    """Baseline feed: one row per submodel, epsilon exploration on top."""

    def __init__(self, submodels: Sequence[Submodel], epsilon: float = 0.05):
        if not submodels:
            raise ValueError("need at least one submodel")
        self.submodels = list(submodels)
        self.epsilon = epsilon

    def serve(self, user_id, context, active_items, history, slots, day, rng):
        pooled = _pool(self.submodels, user_id, context, active_items, history, slots)
        if not pooled:
            return []
        by_item = {p.item_id: p for p in pooled}
        ranked = rank_row_separated(pooled)
        result = explore_slots(ranked, slots, self.epsilon, rng)
        return [
            ServedSlot(item, by_item[item].submodel, by_item[item].score)
            for item in result.slots
        ]


class BanditPolicy:
    """Value-model feed: one ranking across submodels by predicted click rate.

    Every candidate is valued as if it sat at the top slot, so the comparison
    is about the item and its provenance, not the position it happens to get.
    A ``user_vectors`` mapping enriches the request context for value models
    with a personalization block; users missing from it are valued without.
    """

    def __init__(
        self,
        submodels: Sequence[Submodel],
        value_model,
        epsilon: float = 0.05,
        user_vectors: Mapping[str, np.ndarray] | None = None,
    ):
        if not submodels:
            raise ValueError("need at least one submodel")
        if not hasattr(value_model, "candidate_values"):
            raise TypeError("value_model must expose candidate_values(...)")
        self.submodels = list(submodels)
        self.value_model = value_model
        self.epsilon = epsilon
        self.user_vectors = user_vectors

    def serve(self, user_id, context, active_items, history, slots, day, rng):
        pooled = _pool(self.submodels, user_id, context, active_items, history, slots)
        if not pooled:
            return []
        if self.user_vectors is not None:
            context = dataclasses.replace(context, user_vector=self.user_vectors.get(user_id))
        values = self.value_model.candidate_values(pooled, context, position=0)
        valued = [(p.item_id, float(v)) for p, v in zip(pooled, values)]
        by_item = {p.item_id: p for p in pooled}
        result = rerank(valued, slots, self.epsilon, rng)
        return [
            ServedSlot(item, by_item[item].submodel, by_item[item].score)
            for item in result.slots
        ]


class StaticPolicy:
    """Fixed global ranking; both arms of an A/A test can share one of these."""

    def __init__(self, ranking: Sequence[str]):
        if len(set(ranking)) != len(ranking):
            raise ValueError("static ranking contains duplicates")
        self.ranking = list(ranking)

    def serve(self, user_id, context, active_items, history, slots, day, rng):
        active = set(active_items)
        seen = set(history)
        feed = [i for i in self.ranking if i in active and i not in seen][:slots]
        n = max(len(feed) - 1, 1)
        return [
            ServedSlot(item, "static", 1.0 - k / n if len(feed) > 1 else 1.0)
            for k, item in enumerate(feed)
        ]


class OraclePolicy:
    """Ranks by the simulator's true click probability; the ceiling policy.

    ``noise`` perturbs the true values to dial the ceiling down; epsilon adds
    exploration like any production policy.
    """

    def __init__(self, market, noise: float = 0.0, epsilon: float = 0.0, seed: int = 0):
        if noise < 0.0:
            raise ValueError(f"noise must be >= 0, got {noise}")
        self.market = market
        self.noise = noise
        self.epsilon = epsilon
        self._rng = np.random.default_rng(np.random.SeedSequence([seed, 0x04AC1E]))

    def serve(self, user_id, context, active_items, history, slots, day, rng):
        ts = self.market.sim_start + day * 86_400
        seen = set(history)
        valued = []
        for item in active_items:
            if item in seen:
                continue
            p = self.market.click_probability(user_id, item, ts, 0, context.device)
            if self.noise:
                p += self.noise * float(self._rng.normal())
            valued.append((item, p))
        if not valued:
            return []
        result = rerank(valued, slots, self.epsilon, rng)
        truth = dict(valued)
        return [
            ServedSlot(item, "oracle", min(max(truth[item], 0.0), 1.0))
            for item in result.slots
        ]
