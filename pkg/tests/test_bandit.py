"""Feed assembly tests: pooling, ranking, value models with solve oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from marketrec.bandit import (
    IMPRESSION_HEADER,
    BanditFeatureEncoder,
    DeepBandit,
    DeepFeatureEncoder,
    FeedContext,
    ImpressionRecord,
    RowLayout,
    SubmodelProposal,
    bin_score,
    collect_proposals,
    explore_slots,
    fit_deep_bandit,
    fit_regression_bandit,
    fit_row_layout,
    load_impressions,
    rank_row_separated,
    rerank,
    save_impressions,
)
from marketrec.checkpoint import load_model, save_model
from marketrec.nn import check_gradients, weighted_bce

CTX = FeedContext(device="ios", hour=14, weekday=2, landing="main_front")


# --- record validation -----------------------------------------------------------


def test_proposal_validation():
    SubmodelProposal("mf", "i1", 0.5)
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        SubmodelProposal("mf", "i1", 1.5)
    with pytest.raises(ValueError, match="non-empty"):
        SubmodelProposal("", "i1", 0.5)


def test_context_validation():
    with pytest.raises(ValueError, match="hour"):
        FeedContext("ios", 24, 2, "main_front")
    with pytest.raises(ValueError, match="weekday"):
        FeedContext("ios", 10, 7, "main_front")
    with pytest.raises(ValueError, match="landing"):
        FeedContext("ios", 10, 2, "checkout")


def _imp(**kw) -> ImpressionRecord:
    base = dict(
        timestamp=1000,
        user_id="u1",
        item_id="i1",
        submodel="mf",
        score=0.5,
        position=0,
        device="ios",
        hour=14,
        weekday=2,
        landing="main_front",
        clicked=False,
    )
    base.update(kw)
    return ImpressionRecord(**base)


def test_impression_round_trip(tmp_path):
    imps = [
        _imp(),
        _imp(item_id="i2", score=1.0 / 3.0, position=7, clicked=True, hour=0),
        _imp(user_id="u2", submodel="seq", landing="category_front", weekday=6),
    ]
    path = str(tmp_path / "imps.tsv")
    save_impressions(path, imps)
    first = open(path).readline().rstrip("\n")
    assert first == IMPRESSION_HEADER
    back = load_impressions(path)
    # location is not a column, so it comes back as the "na" default
    assert back == [i for i in imps]
    assert back[1].score == imps[1].score  # %.17g keeps float64 exact


def test_impression_load_errors(tmp_path):
    path = str(tmp_path / "bad.tsv")
    with open(path, "w") as fh:
        fh.write("wrong\theader\n")
    with pytest.raises(ValueError, match="unexpected impression header"):
        load_impressions(path)
    with open(path, "w") as fh:
        fh.write(IMPRESSION_HEADER + "\n")
        fh.write("10\tu1\ti1\tmf\t0.5\t0\tios\t14\t2\tmain_front\n")
    with pytest.raises(ValueError, match=r"bad\.tsv:2"):
        load_impressions(path)


# --- pooling and the row baseline --------------------------------------------------


def test_collect_keeps_best_proposal_per_item():
    got = collect_proposals(
        [
            SubmodelProposal("mf", "i1", 0.4),
            SubmodelProposal("seq", "i1", 0.9),
            SubmodelProposal("pop", "i2", 0.6),
            SubmodelProposal("aaa", "i1", 0.9),
        ]
    )
    assert got == [
        SubmodelProposal("aaa", "i1", 0.9),  # score tie -> first submodel name
        SubmodelProposal("pop", "i2", 0.6),
    ]


def test_collect_is_order_independent():
    props = [
        SubmodelProposal("mf", "i1", 0.4),
        SubmodelProposal("seq", "i1", 0.9),
        SubmodelProposal("pop", "i2", 0.6),
    ]
    assert collect_proposals(props) == collect_proposals(props[::-1])


def test_collect_filters_inactive_and_history():
    props = [
        SubmodelProposal("mf", "i1", 0.9),
        SubmodelProposal("mf", "i2", 0.8),
        SubmodelProposal("mf", "i3", 0.7),
    ]
    got = collect_proposals(props, active_items={"i1", "i2"}, history={"i1"})
    assert [p.item_id for p in got] == ["i2"]


def test_row_separated_blocks_by_submodel_name():
    props = [
        SubmodelProposal("seq", "s_hi", 0.95),
        SubmodelProposal("mf", "m_lo", 0.10),
        SubmodelProposal("mf", "m_hi", 0.80),
        SubmodelProposal("pop", "p_mid", 0.50),
    ]
    # mf row first despite seq holding the best item overall
    assert rank_row_separated(props) == ["m_hi", "m_lo", "p_mid", "s_hi"]


def test_row_separated_rejects_duplicates():
    with pytest.raises(ValueError, match="duplicate item"):
        rank_row_separated([SubmodelProposal("a", "i1", 0.5), SubmodelProposal("b", "i1", 0.4)])


# --- epsilon exploration ------------------------------------------------------------


def test_epsilon_zero_is_pure_ranking():
    got = rerank([("b", 0.5), ("a", 0.9), ("c", 0.1)], slots=3, epsilon=0.0)
    assert got.slots == ("a", "b", "c")
    assert got.explored == (False, False, False)


def test_rerank_tie_break_ascending_id():
    got = rerank([("z", 0.5), ("a", 0.5), ("m", 0.5)], slots=3, epsilon=0.0)
    assert got.slots == ("a", "m", "z")


def test_epsilon_one_is_unbiased_shuffle():
    """Every item must be able to reach slot 0 under full exploration."""
    ranked = ["a", "b", "c", "d"]
    seen_first = set()
    rng = np.random.default_rng(0)
    for _ in range(200):
        seen_first.add(explore_slots(ranked, 4, 1.0, rng).slots[0])
    assert seen_first == set(ranked)


def test_explore_slots_never_duplicates():
    rng = np.random.default_rng(1)
    for _ in range(50):
        res = explore_slots([f"i{k}" for k in range(12)], 8, 0.3, rng)
        assert len(set(res.slots)) == len(res.slots) == 8
        assert len(res.explored) == 8


def test_measured_exploration_rate_matches_epsilon():
    rng = np.random.default_rng(2)
    pool = [f"i{k}" for k in range(30)]
    flags = []
    for _ in range(2000):
        flags.extend(explore_slots(pool, 10, 0.05, rng).explored)
    rate = np.mean(flags)
    assert 0.04 < rate < 0.06


def test_short_pool_truncates():
    got = explore_slots(["a", "b"], 5, 0.0, np.random.default_rng(0))
    assert got.slots == ("a", "b")


def test_exploration_parameter_validation():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="epsilon"):
        explore_slots(["a"], 1, 1.5, rng)
    with pytest.raises(ValueError, match="slots"):
        explore_slots(["a"], 0, 0.1, rng)
    with pytest.raises(ValueError, match="duplicate"):
        rerank([("a", 0.1), ("a", 0.2)], 1)


# --- score binning and hinge ---------------------------------------------------------


def test_bin_score_worked_examples():
    assert bin_score(0.0) == 0
    assert bin_score(0.09) == 0
    assert bin_score(0.10) == 1
    assert bin_score(0.95) == 9
    assert bin_score(1.0) == 9
    with pytest.raises(ValueError):
        bin_score(1.2)


@given(st.floats(min_value=0.0, max_value=1.0, allow_nan=False))
def test_hinge_pair_sums_to_score(score):
    enc = BanditFeatureEncoder(("mf", "__other__"), ("ios", "__other__"), ("2", "__other__"), ("main_front", "__other__"))
    x = enc.encode("mf", score, 0, "ios", 14, 2, "main_front")
    assert x[0] + x[1] == pytest.approx(score, abs=1e-12)
    assert x[0] <= enc.theta and x[1] >= 0.0


def test_encoder_other_bucket_for_unseen_values():
    enc = BanditFeatureEncoder(("mf", "__other__"), ("ios", "__other__"), ("2", "__other__"), ("main_front", "__other__"))
    known = enc.encode("mf", 0.5, 0, "ios", 14, 2, "main_front")
    unseen = enc.encode("martian", 0.5, 0, "android", 14, 5, "category_front")
    n = enc.n_features
    assert known.shape == (n,) and unseen.shape == (n,)
    # each categorical block still sums to one
    hot_start = 2 + enc.n_buckets + enc.max_position + 24
    assert unseen[hot_start:].sum() == 4.0


def test_position_caps_at_max():
    enc = BanditFeatureEncoder.from_impressions([_imp()], max_position=5)
    far = enc.encode("mf", 0.5, 99, "ios", 14, 2, "main_front")
    edge = enc.encode("mf", 0.5, 4, "ios", 14, 2, "main_front")
    assert np.array_equal(far, edge)


# --- regression value model -----------------------------------------------------------


def _random_impressions(n, seed, click_rule=None):
    rng = np.random.default_rng(seed)
    submodels = ["mf", "seq", "pop"]
    devices = ["ios", "android", "web"]
    landings = ["main_front", "category_front"]
    out = []
    for k in range(n):
        score = float(rng.integers(0, 11)) / 10.0
        position = int(rng.integers(0, 6))
        r = _imp(
            item_id=f"i{k}",
            submodel=submodels[int(rng.integers(3))],
            score=score,
            position=position,
            device=devices[int(rng.integers(3))],
            hour=int(rng.integers(24)),
            weekday=int(rng.integers(7)),
            landing=landings[int(rng.integers(2))],
            clicked=bool(rng.random() < (click_rule(score, position) if click_rule else 0.3)),
        )
        out.append(r)
    return out


def test_regression_matches_dense_ridge_oracle():
    """Grouped weighted solve must equal the literal per-impression system."""
    imps = _random_impressions(80, seed=3)
    lam = 1.0
    model = fit_regression_bandit(imps, ridge_lambda=lam, max_position=8)

    enc = model.encoder
    X = np.stack([np.concatenate([enc.encode_impression(r), [1.0]]) for r in imps])
    y = np.array([1.0 if r.clicked else 0.0 for r in imps])
    D = np.eye(enc.n_features + 1) * lam
    D[-1, -1] = 0.0
    oracle = np.linalg.solve(X.T @ X + D, X.T @ y)
    assert np.max(np.abs(model.weights - oracle)) < 1e-8


def test_regression_single_context_recovers_rate_exactly():
    """With one distinct context the unpenalized intercept absorbs the CTR."""
    imps = [_imp(item_id=f"i{k}", clicked=(k < 3)) for k in range(10)]
    model = fit_regression_bandit(imps)
    assert model.value("mf", 0.5, 0, CTX) == pytest.approx(0.3, abs=1e-9)


def test_regression_learns_score_monotonicity():
    imps = _random_impressions(4000, seed=5, click_rule=lambda s, p: 0.05 + 0.5 * s)
    model = fit_regression_bandit(imps)
    lo = model.value("mf", 0.1, 0, CTX)
    hi = model.value("mf", 0.9, 0, CTX)
    assert hi > lo + 0.2


def test_regression_learns_position_decay():
    imps = _random_impressions(4000, seed=6, click_rule=lambda s, p: 0.45 - 0.07 * p)
    model = fit_regression_bandit(imps)
    top = model.value("mf", 0.5, 0, CTX)
    low = model.value("mf", 0.5, 5, CTX)
    assert top > low + 0.2


def test_regression_candidate_values_align_with_value():
    imps = _random_impressions(50, seed=7)
    model = fit_regression_bandit(imps)
    props = [SubmodelProposal("mf", "a", 0.9), SubmodelProposal("seq", "b", 0.4)]
    vals = model.candidate_values(props, CTX)
    assert vals[0] == pytest.approx(model.value("mf", 0.9, 0, CTX))
    assert vals[1] == pytest.approx(model.value("seq", 0.4, 0, CTX))


def test_regression_requires_impressions():
    with pytest.raises(ValueError, match="no impressions"):
        fit_regression_bandit([])


def test_regression_checkpoint_round_trip(tmp_path):
    imps = _random_impressions(60, seed=8)
    model = fit_regression_bandit(imps, max_position=6)
    path = str(tmp_path / "reg.mrsys")
    save_model(path, model)
    back = load_model(path)
    assert np.array_equal(back.weights, model.weights)
    assert back.encoder.submodels == model.encoder.submodels
    for s in (0.0, 0.35, 0.8, 1.0):
        assert back.value("seq", s, 2, CTX) == model.value("seq", s, 2, CTX)


# --- deep value model -------------------------------------------------------------------


def test_deep_bandit_gradient_check():
    """Finite differences through normalization, tower, and weighted loss."""
    rng = np.random.default_rng(4)
    enc = DeepFeatureEncoder(
        ("mf", "__other__"),
        ("ios", "__other__"),
        ("2", "__other__"),
        ("main_front", "__other__"),
        ("na", "__other__"),
        user_dim=2,
    )
    model = DeepBandit.build(enc, hidden=(5, 4), seed=1)
    n = 6
    cont = rng.normal(loc=(0.5, 2.0, 12.0), scale=(0.2, 1.0, 3.0), size=(n, 3))
    static = rng.normal(size=(n, enc.cat_dim + 2)) * 0.5
    y = np.array([1.0, 0.0, 1.0, 0.0, 0.0, 1.0])

    params = {"bn_gamma": model.bn.params["gamma"], "bn_beta": model.bn.params["beta"]}
    for k, layer in enumerate(model.tower):
        params[f"t{k}_W"] = layer.params["W"]
        params[f"t{k}_b"] = layer.params["b"]

    def loss_and_grads():
        model._zero_grads()
        probs = model._forward(cont, static, train=True)
        loss, grad = weighted_bce(probs, y, 2.0, 1.0)
        model._backward(grad)
        grads = {"bn_gamma": model.bn.grads["gamma"].copy(), "bn_beta": model.bn.grads["beta"].copy()}
        for k, layer in enumerate(model.tower):
            grads[f"t{k}_W"] = layer.grads["W"].copy()
            grads[f"t{k}_b"] = layer.grads["b"].copy()
        return loss, grads

    # relu kink safety on the hidden layers
    model._forward(cont, static, train=True)
    for layer in model.tower[:-1]:
        assert np.min(np.abs(layer._cache["z"])) > 1e-3
    assert check_gradients(loss_and_grads, params) < 1e-5


def test_deep_bandit_learns_score_signal():
    imps = _random_impressions(3000, seed=9, click_rule=lambda s, p: 0.05 + 0.6 * s)
    model = fit_deep_bandit(imps, epochs=8, seed=0)
    assert model.training_loss[-1] < model.training_loss[0]
    lo = model.predict([("mf", 0.05, 0, CTX)] * 2)[0]
    hi = model.predict([("mf", 0.95, 0, CTX)] * 2)[0]
    assert hi > lo + 0.2


def test_deep_bandit_class_weight_is_imbalance_ratio():
    imps = [_imp(item_id=f"i{k}", clicked=(k % 5 == 0)) for k in range(50)]
    model = fit_deep_bandit(imps, epochs=1, seed=0)
    assert model.w_pos == pytest.approx(40 / 10)
    assert model.w_neg == 1.0


def test_deep_bandit_requires_both_classes():
    imps = [_imp(item_id=f"i{k}", clicked=False) for k in range(10)]
    with pytest.raises(ValueError, match="both clicked and unclicked"):
        fit_deep_bandit(imps)


def test_deep_bandit_uses_user_vectors():
    """Clicks are decided purely by a user trait; the net must pick it up."""
    rng = np.random.default_rng(10)
    user_vectors = {f"u{k}": np.array([1.0 if k % 2 == 0 else -1.0, 0.5]) for k in range(20)}
    imps = []
    for k in range(3000):
        u = f"u{rng.integers(20)}"
        clicked = user_vectors[u][0] > 0 and rng.random() < 0.8 or rng.random() < 0.05
        imps.append(_imp(user_id=u, item_id=f"i{k}", clicked=bool(clicked)))
    model = fit_deep_bandit(imps, user_vectors=user_vectors, epochs=6, seed=1)
    pos_ctx = FeedContext("ios", 14, 2, "main_front", user_vector=np.array([1.0, 0.5]))
    neg_ctx = FeedContext("ios", 14, 2, "main_front", user_vector=np.array([-1.0, 0.5]))
    props = [SubmodelProposal("mf", "i1", 0.5)]
    assert model.candidate_values(props, pos_ctx)[0] > model.candidate_values(props, neg_ctx)[0] + 0.3


def test_deep_bandit_inference_is_deterministic():
    imps = _random_impressions(200, seed=11)
    model = fit_deep_bandit(imps, epochs=2, seed=2)
    rows = [("mf", 0.5, 1, CTX), ("seq", 0.2, 3, CTX)]
    assert np.array_equal(model.predict(rows), model.predict(rows))


def test_deep_bandit_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(12)
    user_vectors = {f"u{k}": rng.normal(size=3) for k in range(10)}
    imps = [
        _imp(user_id=f"u{int(rng.integers(10))}", item_id=f"i{k}", clicked=bool(rng.random() < 0.3))
        for k in range(100)
    ]
    model = fit_deep_bandit(imps, user_vectors=user_vectors, epochs=2, seed=3)
    path = str(tmp_path / "deep.mrsys")
    save_model(path, model)
    back = load_model(path)
    ctx = FeedContext("android", 9, 4, "category_front", user_vector=user_vectors["u3"])
    props = [SubmodelProposal("mf", "a", 0.7), SubmodelProposal("pop", "b", 0.1)]
    assert np.array_equal(back.candidate_values(props, ctx), model.candidate_values(props, ctx))
    assert back.w_pos == model.w_pos
    assert back.training_loss == pytest.approx(model.training_loss)


def test_row_layout_records_sorted_submodels(tmp_path):
    imps = [_imp(submodel=s) for s in ("pop", "mf", "pop", "seq")]
    layout = fit_row_layout(imps)
    assert layout.submodels == ("mf", "pop", "seq")
    path = str(tmp_path / "row.mrsys")
    save_model(path, layout)
    assert load_model(path) == layout
    with pytest.raises(ValueError, match="no impressions"):
        fit_row_layout([])
    with pytest.raises(ValueError, match="name-ordered"):
        RowLayout(("pop", "mf"))
    with pytest.raises(ValueError, match="at least one"):
        RowLayout(())
