"""Implicit-feedback ALS oracle tests.

The half-step solver is compared against a direct dense ridge solve over all
columns (no Gram shortcut), and the fast objective against a literal dense
double sum.  Both oracles are written independently of the implementation.
"""

import numpy as np
import pytest
import scipy.sparse as sp

from marketrec.als import (
    FactorModel,
    als_fit,
    behavioral_item_embeddings,
    implicit_objective,
    location_embeddings,
    mf_recommend,
    solve_half_step,
)
from marketrec.events import Event, EventKind, EventLog, build_interaction_matrix

ORACLE_TOL = 1e-8


def dense_objective_oracle(X, Y, dense_w, alpha, reg):
    """Literal confidence-weighted sum over every user-item cell."""
    total = 0.0
    for u in range(X.shape[0]):
        for i in range(Y.shape[0]):
            w = dense_w[u, i]
            conf = 1.0 + alpha * w
            pref = 1.0 if w > 0 else 0.0
            err = pref - float(X[u] @ Y[i])
            total += conf * err * err
    total += reg * (float(np.sum(X * X)) + float(np.sum(Y * Y)))
    return total


def dense_half_step_oracle(dense_w, Y, alpha, reg):
    """Row-wise ridge solve with the full confidence diagonal over all columns."""
    n_rows, dim = dense_w.shape[0], Y.shape[1]
    X = np.zeros((n_rows, dim))
    for u in range(n_rows):
        if not np.any(dense_w[u] > 0):
            continue
        conf = 1.0 + alpha * dense_w[u]
        pref = (dense_w[u] > 0).astype(np.float64)
        A = Y.T @ np.diag(conf) @ Y + reg * np.eye(dim)
        b = Y.T @ (conf * pref)
        X[u] = np.linalg.solve(A, b)
    return X


def random_weight_matrix(rng, shape=(8, 6), density=0.4):
    dense = np.where(rng.random(shape) < density, rng.integers(1, 6, size=shape), 0).astype(
        np.float64
    )
    if dense.sum() == 0:
        dense[0, 0] = 3.0
    return dense


class TestHalfStepOracle:
    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
    def test_matches_dense_ridge_solve(self, seed):
        rng = np.random.default_rng(seed)
        dense = random_weight_matrix(rng, shape=(9, 7))
        Y = rng.normal(size=(7, 4))
        alpha, reg = 40.0, 0.1
        fast = solve_half_step(sp.csr_matrix(dense), Y, alpha, reg)
        oracle = dense_half_step_oracle(dense, Y, alpha, reg)
        assert np.max(np.abs(fast - oracle)) <= ORACLE_TOL

    def test_empty_rows_get_zero_vectors(self):
        dense = np.zeros((3, 4))
        dense[1, 2] = 2.0
        Y = np.random.default_rng(7).normal(size=(4, 3))
        X = solve_half_step(sp.csr_matrix(dense), Y, 40.0, 0.1)
        np.testing.assert_allclose(X[0], 0.0)
        np.testing.assert_allclose(X[2], 0.0)
        assert np.linalg.norm(X[1]) > 0


class TestObjectiveOracle:
    @pytest.mark.parametrize("seed", [10, 11, 12])
    def test_gram_shortcut_matches_literal_sum(self, seed):
        rng = np.random.default_rng(seed)
        dense = random_weight_matrix(rng, shape=(6, 5))
        X = rng.normal(size=(6, 3))
        Y = rng.normal(size=(5, 3))
        fast = implicit_objective(X, Y, sp.csr_matrix(dense), alpha=40.0, reg=0.1)
        oracle = dense_objective_oracle(X, Y, dense, alpha=40.0, reg=0.1)
        assert fast == pytest.approx(oracle, rel=1e-10)


class TestAlsFit:
    def make_interactions(self, seed=0, shape=(12, 9)):
        rng = np.random.default_rng(seed)
        events = []
        t = 0
        for u in range(shape[0]):
            for i in rng.choice(shape[1], size=4, replace=False):
                kind = "conversion" if rng.random() < 0.2 else "click"
                events.append(Event(f"u{u:02d}", f"i{i:02d}", t, EventKind(kind)))
                t += 1
        return build_interaction_matrix(EventLog(events))

    def test_objective_never_increases(self):
        model = als_fit(self.make_interactions(), dim=4, iterations=8, seed=3)
        hist = model.objective_history
        assert len(hist) == 1 + 2 * 8
        for prev, cur in zip(hist, hist[1:]):
            assert cur <= prev + 1e-9 * abs(prev)

    def test_single_interaction_predicts_preference(self):
        events = [Event("u0", "i0", 0, EventKind.CLICK)]
        # a second disconnected pair keeps both items in the catalog
        events.append(Event("u1", "i1", 1, EventKind.CLICK))
        model = als_fit(build_interaction_matrix(EventLog(events)), dim=2, iterations=10, seed=0)
        u0 = model.row_factors[model.row_index["u0"]]
        i0 = model.col_factors[model.col_index["i0"]]
        i1 = model.col_factors[model.col_index["i1"]]
        assert u0 @ i0 > u0 @ i1

    def test_deterministic_per_seed(self):
        inter = self.make_interactions(seed=5)
        a = als_fit(inter, dim=3, iterations=4, seed=42)
        b = als_fit(inter, dim=3, iterations=4, seed=42)
        np.testing.assert_array_equal(a.row_factors, b.row_factors)
        np.testing.assert_array_equal(a.col_factors, b.col_factors)

    def test_user_permutation_equivariance(self):
        """Permuting matrix rows (with the init permuted the same way) permutes
        the fitted row factors identically and leaves column factors unchanged."""
        from marketrec.als import _als

        rng = np.random.default_rng(21)
        dense = random_weight_matrix(rng, shape=(7, 5))
        perm = rng.permutation(7)
        init_rows = rng.normal(size=(7, 3)) * 0.01
        init_cols = rng.normal(size=(5, 3)) * 0.01
        ids_r = tuple(f"u{k}" for k in range(7))
        ids_c = tuple(f"i{k}" for k in range(5))
        base = _als(
            sp.csr_matrix(dense), ids_r, ids_c, 3, 0.1, 40.0, 3, 0,
            init_rows=init_rows, init_cols=init_cols,
        )
        permuted = _als(
            sp.csr_matrix(dense[perm]), tuple(ids_r[p] for p in perm), ids_c, 3, 0.1, 40.0, 3, 0,
            init_rows=init_rows[perm], init_cols=init_cols,
        )
        np.testing.assert_allclose(permuted.row_factors, base.row_factors[perm], atol=1e-10)
        np.testing.assert_allclose(permuted.col_factors, base.col_factors, atol=1e-10)

    def test_rejects_empty_matrix(self):
        from marketrec.events import InteractionMatrix

        empty = InteractionMatrix(sp.csr_matrix((2, 2)), ("u0", "u1"), ("i0", "i1"), 1.0, 5.0)
        with pytest.raises(ValueError, match="empty"):
            als_fit(empty)

    def test_rejects_bad_hyperparams(self):
        inter = self.make_interactions()
        with pytest.raises(ValueError):
            als_fit(inter, dim=0)
        with pytest.raises(ValueError):
            als_fit(inter, reg=0.0)
        with pytest.raises(ValueError):
            als_fit(inter, alpha=-1.0)
        with pytest.raises(ValueError):
            als_fit(inter, iterations=0)


class TestEmbeddingsAndRecommend:
    def test_behavioral_embeddings_keyed_by_item(self):
        events = [Event(f"u{k}", f"i{k % 3}", k, EventKind.CLICK) for k in range(9)]
        model = als_fit(build_interaction_matrix(EventLog(events)), dim=2, iterations=3)
        emb = behavioral_item_embeddings(model)
        assert set(emb) == {"i0", "i1", "i2"}
        np.testing.assert_array_equal(emb["i1"], model.col_factors[model.col_index["i1"]])

    def test_mf_recommend_matches_brute_force(self):
        rng = np.random.default_rng(31)
        model = FactorModel(
            row_ids=("u0", "u1"),
            col_ids=tuple(f"i{k:03d}" for k in range(50)),
            row_factors=rng.normal(size=(2, 4)),
            col_factors=rng.normal(size=(50, 4)),
            dim=4,
            reg=0.1,
            alpha=40.0,
        )
        got = mf_recommend(model, "u0", exclude={"i004"}, top_n=10)
        u = model.row_factors[0]
        brute = sorted(
            ((it, float(u @ model.col_factors[k])) for k, it in enumerate(model.col_ids) if it != "i004"),
            key=lambda p: (-p[1], p[0]),
        )[:10]
        assert [it for it, _ in got] == [it for it, _ in brute]
        np.testing.assert_allclose([s for _, s in got], [s for _, s in brute], rtol=1e-12)

    def test_mf_recommend_tie_break_ascending_id(self):
        model = FactorModel(
            row_ids=("u0",),
            col_ids=("b", "a", "c"),
            row_factors=np.array([[1.0]]),
            col_factors=np.array([[0.5], [0.5], [0.1]]),
            dim=1,
            reg=0.1,
            alpha=1.0,
        )
        got = [it for it, _ in mf_recommend(model, "u0", top_n=3)]
        assert got == ["a", "b", "c"]

    def test_mf_recommend_unknown_user(self):
        model = FactorModel(("u0",), ("i0",), np.ones((1, 1)), np.ones((1, 1)), 1, 0.1, 1.0)
        with pytest.raises(ValueError, match="unknown user"):
            mf_recommend(model, "nobody")


class TestLocationEmbeddings:
    def make_log(self):
        events = []
        # users 0-3 browse postcode A items, users 4-7 postcode B items
        for u in range(8):
            pc_items = ["iA0", "iA1"] if u < 4 else ["iB0", "iB1"]
            for k, it in enumerate(pc_items * 3):
                events.append(Event(f"u{u}", it, u * 100 + k, EventKind.CLICK))
        return EventLog(events)

    def test_groups_by_postcode(self):
        log = self.make_log()
        postcodes = {"iA0": "0150", "iA1": "0150", "iB0": "5003", "iB1": "5003"}
        emb = location_embeddings(log, postcodes, dim=3, iterations=5, seed=1)
        assert set(emb) == {"0150", "5003"}
        assert emb["0150"].shape == (3,)

    def test_missing_postcode_is_an_error(self):
        log = self.make_log()
        with pytest.raises(ValueError, match="iB0"):
            location_embeddings(log, {"iA0": "0150", "iA1": "0150", "iB1": "5003"})

    def test_empty_log_is_an_error(self):
        with pytest.raises(ValueError, match="empty"):
            location_embeddings(EventLog([]), {})
