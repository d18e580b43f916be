"""Pipeline stages gluing the library into file-based artifacts.

Every stage reads and writes files inside one output directory, derives its
randomness from the config's root seed via a named fan-out, and is
idempotent: identical config and seed produce byte-identical artifacts.
Missing prerequisite artifacts raise ValueError naming the stage to run.
"""

from __future__ import annotations

import os
from collections import Counter
from typing import Mapping, Sequence

import numpy as np

from marketrec.als import (
    als_fit,
    behavioral_item_embeddings,
    location_embeddings,
    mf_recommend,
)
from marketrec.bandit import (
    ImpressionRecord,
    fit_deep_bandit,
    fit_regression_bandit,
    fit_row_layout,
    load_impressions,
    save_impressions,
)
from marketrec.checkpoint import load_model, save_model
from marketrec.config import ConfigValue, market_config, parse_int_list, stage_seed
from marketrec.content import (
    ItemContent,
    image_representation,
    text_representation,
    train_category_classifier,
    train_image_tower,
    train_word_embeddings,
)
from marketrec.events import (
    SECONDS_PER_DAY,
    EventKind,
    EventLog,
    build_interaction_matrix,
    load_events,
    lookback_filter,
    save_events,
    temporal_split,
)
from marketrec.experiment import build_report, format_report, hit_rate_at_n, write_report
from marketrec.hybrid import (
    ItemRepresentationSet,
    embed_catalog,
    mine_co_converted_pairs,
    sample_negative_pairs,
    train_hybrid,
)
from marketrec.policies import (
    BanditPolicy,
    CategorySubmodel,
    MFSubmodel,
    OraclePolicy,
    PopularitySubmodel,
    RandomSubmodel,
    RecencySubmodel,
    RowSeparatedPolicy,
    SeqSubmodel,
    StaticPolicy,
    Submodel,
)
from marketrec.sequence import build_sequences, seq_recommend, train_sequence
from marketrec.simulator import Market, generate_market, run_ab_simulation, simulate_organic, simulate_sessions

EVENTS_FILE = "events.tsv"
ITEMS_FILE = "items.tsv"
IMAGE_FEATURES_FILE = "image_features.tsv"
ALS_FILE = "als.mrsys"
ITEM_EMBEDDINGS_FILE = "item_embeddings.tsv"
POSTCODE_EMBEDDINGS_FILE = "postcode_embeddings.tsv"
TEXT_FILE = "text.mrsys"
IMAGE_FILE = "image.mrsys"
HYBRID_FILE = "hybrid.mrsys"
HYBRID_EMBEDDINGS_FILE = "hybrid_embeddings.tsv"
SEQ_FILE = "seq.mrsys"
IMPRESSIONS_FILE = "impressions.tsv"
BANDIT_FILES = {
    "row": "bandit_row.mrsys",
    "regression": "bandit_regression.mrsys",
    "deep": "bandit_deep.mrsys",
}
IMPRESSIONS_A_FILE = "impressions_a.tsv"
IMPRESSIONS_B_FILE = "impressions_b.tsv"
HR_FILE = "hr.tsv"
REPORT_FILE = "report.tsv"

ITEMS_HEADER = "item_id\tcategory\tpostcode\tactive_from\tactive_until\ttitle\tdescription"
ARM_CHOICES = ("row", "regression", "deep", "static", "oracle")

Config = Mapping[str, ConfigValue]


def _path(out_dir: str, name: str) -> str:
    return os.path.join(out_dir, name)


def _require(out_dir: str, name: str, producer: str) -> str:
    path = _path(out_dir, name)
    if not os.path.exists(path):
        raise ValueError(f"missing {path}; run `marketrec {producer}` first")
    return path


# --- small TSV helpers --------------------------------------------------------------


def save_embeddings(path: str, vectors: Mapping[str, np.ndarray]) -> None:
    """One `id \\t v0 \\t v1 ...` row per key, sorted by id, %.17g floats."""
    if not vectors:
        raise ValueError("refusing to write an empty embedding table")
    dims = {len(v) for v in vectors.values()}
    if len(dims) != 1:
        raise ValueError(f"inconsistent embedding dimensions: {sorted(dims)}")
    with open(path, "w", newline="\n") as fh:
        for key in sorted(vectors):
            values = "\t".join(f"{float(x):.17g}" for x in vectors[key])
            fh.write(f"{key}\t{values}\n")


def load_embeddings(path: str) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    dim = None
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 2:
                raise ValueError(f"{path}:{lineno}: expected id and at least one value")
            vec = np.array([float(x) for x in parts[1:]])
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise ValueError(f"{path}:{lineno}: dimension {len(vec)} != {dim}")
            out[parts[0]] = vec
    if not out:
        raise ValueError(f"{path}: empty embedding table")
    return out


def save_items(path: str, market: Market) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(ITEMS_HEADER + "\n")
        for item in market.item_ids:
            fh.write(
                f"{item}\t{market.item_category[item]}\t{market.item_postcode[item]}\t"
                f"{market.active_from[item]}\t{market.active_until[item]}\t"
                f"{market.titles[item]}\t{market.descriptions[item]}\n"
            )


def load_items(path: str) -> tuple[list[ItemContent], dict[str, int], dict[str, int]]:
    """Catalog rows (without image features) plus the active windows."""
    items: list[ItemContent] = []
    active_from: dict[str, int] = {}
    active_until: dict[str, int] = {}
    with open(path, newline="") as fh:
        header = fh.readline().rstrip("\n")
        if header != ITEMS_HEADER:
            raise ValueError(f"{path}: unexpected items header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 7:
                raise ValueError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
            item_id, category, postcode, frm, until, title, description = parts
            items.append(ItemContent(item_id, category, postcode, title, description))
            active_from[item_id] = int(frm)
            active_until[item_id] = int(until)
    return items, active_from, active_until


def load_catalog(out_dir: str) -> tuple[list[ItemContent], dict[str, int], dict[str, int]]:
    """Items joined with their image features."""
    items, active_from, active_until = load_items(_require(out_dir, ITEMS_FILE, "generate"))
    features = load_embeddings(_require(out_dir, IMAGE_FEATURES_FILE, "generate"))
    joined = []
    for it in items:
        feature = features.get(it.item_id)
        if feature is None:
            raise ValueError(f"item {it.item_id} has no image feature row")
        joined.append(
            ItemContent(it.item_id, it.category, it.postcode, it.title, it.description, feature)
        )
    return joined, active_from, active_until


# --- shared stage plumbing ----------------------------------------------------------


def market_from_config(cfg: Config) -> Market:
    return generate_market(market_config(cfg), seed=stage_seed(int(cfg["seed"]), "market"))


def split_time(cfg: Config) -> int:
    """Warmup events before this timestamp train models; the rest evaluate them."""
    train_days = int(cfg["market.warmup_days"]) - int(cfg["eval.test_days"])
    return int(cfg["market.t0"]) + train_days * SECONDS_PER_DAY


def _train_log(cfg: Config, out_dir: str) -> EventLog:
    log = load_events(_require(out_dir, EVENTS_FILE, "generate"))
    return temporal_split(log, split_time(cfg)).train


def _behavioral_window(cfg: Config, out_dir: str) -> EventLog:
    return lookback_filter(
        _train_log(cfg, out_dir), now=split_time(cfg), days=int(cfg["als.lookback_days"])
    )


# --- stages -------------------------------------------------------------------------


def stage_generate(cfg: Config, out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    market = market_from_config(cfg)
    events = simulate_organic(market, seed=stage_seed(int(cfg["seed"]), "organic"))
    save_events(_path(out_dir, EVENTS_FILE), events)
    save_items(_path(out_dir, ITEMS_FILE), market)
    save_embeddings(_path(out_dir, IMAGE_FEATURES_FILE), market.image_features)
    return (
        f"generated {len(market.user_ids)} users, {len(market.item_ids)} items, "
        f"{len(events)} warmup events -> {EVENTS_FILE}, {ITEMS_FILE}, {IMAGE_FEATURES_FILE}"
    )


def stage_train_als(cfg: Config, out_dir: str) -> str:
    window = _behavioral_window(cfg, out_dir)
    matrix = build_interaction_matrix(
        window, w_click=float(cfg["als.w_click"]), w_conv=float(cfg["als.w_conv"])
    )
    model = als_fit(
        matrix,
        dim=int(cfg["als.dim"]),
        reg=float(cfg["als.reg"]),
        alpha=float(cfg["als.alpha"]),
        iterations=int(cfg["als.iterations"]),
        seed=stage_seed(int(cfg["seed"]), "als"),
    )
    save_model(_path(out_dir, ALS_FILE), model)
    save_embeddings(_path(out_dir, ITEM_EMBEDDINGS_FILE), behavioral_item_embeddings(model))
    return (
        f"factorized {len(model.row_ids)} users x {len(model.col_ids)} items "
        f"at d={model.dim} -> {ALS_FILE}, {ITEM_EMBEDDINGS_FILE}"
    )


def stage_train_location(cfg: Config, out_dir: str) -> str:
    window = _behavioral_window(cfg, out_dir)
    items, _, _ = load_items(_require(out_dir, ITEMS_FILE, "generate"))
    postcodes = location_embeddings(
        window,
        {it.item_id: it.postcode for it in items},
        dim=int(cfg["location.dim"]),
        reg=float(cfg["location.reg"]),
        alpha=float(cfg["location.alpha"]),
        iterations=int(cfg["location.iterations"]),
        seed=stage_seed(int(cfg["seed"]), "location"),
    )
    save_embeddings(_path(out_dir, POSTCODE_EMBEDDINGS_FILE), postcodes)
    return f"embedded {len(postcodes)} postcodes -> {POSTCODE_EMBEDDINGS_FILE}"


def stage_train_text(cfg: Config, out_dir: str) -> str:
    catalog, _, _ = load_catalog(out_dir)
    corpus = [it.tokens() for it in catalog]
    words = train_word_embeddings(
        corpus,
        dim=int(cfg["text.word_dim"]),
        window=int(cfg["text.window"]),
        negatives=int(cfg["text.negatives"]),
        epochs=int(cfg["text.word_epochs"]),
        lr=float(cfg["text.word_lr"]),
        min_count=int(cfg["text.min_count"]),
        seed=stage_seed(int(cfg["seed"]), "word2vec"),
    )
    encoder = train_category_classifier(
        catalog,
        words,
        widths=parse_int_list(str(cfg["text.widths"]), "text.widths"),
        n_filters=int(cfg["text.n_filters"]),
        repr_dim=int(cfg["text.repr_dim"]),
        epochs=int(cfg["text.epochs"]),
        lr=float(cfg["text.lr"]),
        seed=stage_seed(int(cfg["seed"]), "text"),
    )
    save_model(_path(out_dir, TEXT_FILE), encoder)
    return (
        f"trained word vectors ({len(words.vocab)} tokens) and a "
        f"{len(encoder.categories)}-way classifier -> {TEXT_FILE}"
    )


def stage_train_image(cfg: Config, out_dir: str) -> str:
    catalog, _, _ = load_catalog(out_dir)
    text_encoder = load_model(_require(out_dir, TEXT_FILE, "train-text"))
    tower = train_image_tower(
        catalog,
        text_encoder.embeddings,
        hidden_dim=int(cfg["image.hidden_dim"]),
        epochs=int(cfg["image.epochs"]),
        lr=float(cfg["image.lr"]),
        batch_size=int(cfg["image.batch_size"]),
        seed=stage_seed(int(cfg["seed"]), "image"),
    )
    save_model(_path(out_dir, IMAGE_FILE), tower)
    return f"trained the image tower on {len(catalog)} items -> {IMAGE_FILE}"


def item_representations(cfg: Config, out_dir: str) -> ItemRepresentationSet:
    """All four per-item sources from the trained artifacts."""
    catalog, _, _ = load_catalog(out_dir)
    factor = load_model(_require(out_dir, ALS_FILE, "train-als"))
    text_encoder = load_model(_require(out_dir, TEXT_FILE, "train-text"))
    image_encoder = load_model(_require(out_dir, IMAGE_FILE, "train-image"))
    postcodes = load_embeddings(_require(out_dir, POSTCODE_EMBEDDINGS_FILE, "train-location"))
    image_vecs = {}
    for it in catalog:
        vec = image_representation(it, image_encoder)
        if vec is not None:
            image_vecs[it.item_id] = vec
    return ItemRepresentationSet(
        {
            "behavioral": behavioral_item_embeddings(factor),
            "text": {it.item_id: text_representation(it, text_encoder) for it in catalog},
            "image": image_vecs,
            "location": {
                it.item_id: postcodes[it.postcode] for it in catalog if it.postcode in postcodes
            },
        }
    )


def stage_train_hybrid(cfg: Config, out_dir: str) -> str:
    reps = item_representations(cfg, out_dir)
    catalog, _, _ = load_catalog(out_dir)
    train = _train_log(cfg, out_dir)
    positives = mine_co_converted_pairs(train)
    if not positives:
        raise ValueError(
            "no co-converted item pairs in the training window; "
            "grow the market or the warmup period"
        )
    negatives = sample_negative_pairs(
        positives,
        {it.item_id: it.category for it in catalog},
        ratio=int(cfg["hybrid.negative_ratio"]),
        seed=stage_seed(int(cfg["seed"]), "hybrid_negatives"),
    )
    encoder = train_hybrid(
        reps,
        positives + negatives,
        tower_widths=(int(cfg["hybrid.tower_width"]),),
        out_dim=int(cfg["hybrid.out_dim"]),
        epochs=int(cfg["hybrid.epochs"]),
        lr=float(cfg["hybrid.lr"]),
        margin=float(cfg["hybrid.margin"]),
        seed=stage_seed(int(cfg["seed"]), "hybrid"),
    )
    save_model(_path(out_dir, HYBRID_FILE), encoder)
    save_embeddings(_path(out_dir, HYBRID_EMBEDDINGS_FILE), embed_catalog(encoder, reps))
    return (
        f"fused {len(reps.items)} items from {len(positives)} positive / "
        f"{len(negatives)} negative pairs -> {HYBRID_FILE}, {HYBRID_EMBEDDINGS_FILE}"
    )


def stage_train_seq(cfg: Config, out_dir: str) -> str:
    embeddings = load_embeddings(_require(out_dir, HYBRID_EMBEDDINGS_FILE, "train-hybrid"))
    train = _train_log(cfg, out_dir)
    lookback = int(cfg["seq.lookback"])
    horizon = int(cfg["seq.horizon"])
    examples = build_sequences(train, lookback=lookback, horizon=horizon)
    if not examples:
        raise ValueError("no click sequences in the training window")
    model = train_sequence(
        examples,
        embeddings,
        lookback=lookback,
        horizon=horizon,
        hidden_dim=int(cfg["seq.hidden_dim"]),
        epochs=int(cfg["seq.epochs"]),
        lr=float(cfg["seq.lr"]),
        seed=stage_seed(int(cfg["seed"]), "seq"),
    )
    save_model(_path(out_dir, SEQ_FILE), model)
    return f"trained the sequence model on {len(examples)} windows -> {SEQ_FILE}"


def _click_counts(log: EventLog) -> Counter:
    return Counter(e.item_id for e in log if e.kind is EventKind.CLICK)


def _warmup_history(cfg: Config, out_dir: str) -> dict[str, list[str]]:
    """Click history per user from the training window, oldest first."""
    out: dict[str, list[str]] = {}
    for user, events in _train_log(cfg, out_dir).by_user().items():
        clicks = [e for e in events if e.kind is EventKind.CLICK]
        out[user] = [e.item_id for e in sorted(clicks, key=lambda e: e.timestamp)]
    return out


def build_submodels(cfg: Config, out_dir: str, market: Market) -> list[Submodel]:
    """The proposal generators every feed policy draws from.

    MF, popularity, recency, category, and random always run; the sequence
    submodel joins once its artifacts exist.
    """
    factor = load_model(_require(out_dir, ALS_FILE, "train-als"))
    clicks = _click_counts(_train_log(cfg, out_dir))
    submodels: list[Submodel] = [
        MFSubmodel(factor),
        PopularitySubmodel(clicks),
        RecencySubmodel(market.active_from),
        CategorySubmodel(market.item_category, clicks),
        RandomSubmodel(seed=stage_seed(int(cfg["seed"]), "random_submodel")),
    ]
    seq_path = _path(out_dir, SEQ_FILE)
    emb_path = _path(out_dir, HYBRID_EMBEDDINGS_FILE)
    if os.path.exists(seq_path) and os.path.exists(emb_path):
        submodels.append(SeqSubmodel(load_model(seq_path), load_embeddings(emb_path)))
    return submodels


def ensure_impressions(cfg: Config, out_dir: str) -> list[ImpressionRecord]:
    """The bandit training log: row-separated serving over the sim window.

    Produced on first use and reused afterwards, so every bandit kind fits on
    the same exploration data.
    """
    path = _path(out_dir, IMPRESSIONS_FILE)
    if os.path.exists(path):
        return load_impressions(path)
    market = market_from_config(cfg)
    policy = RowSeparatedPolicy(
        build_submodels(cfg, out_dir, market), epsilon=float(cfg["bandit.epsilon"])
    )
    impressions, _ = simulate_sessions(
        market,
        policy,
        0,
        int(cfg["ab.days"]),
        seed=stage_seed(int(cfg["seed"]), "bootstrap"),
        history=_warmup_history(cfg, out_dir),
    )
    if not impressions:
        raise ValueError("the bootstrap simulation produced no impressions")
    save_impressions(path, impressions)
    # reload so first fit and refits train on identical rows (the file drops
    # the in-memory location column)
    return load_impressions(path)


def _user_vectors(out_dir: str) -> dict[str, np.ndarray]:
    factor = load_model(_require(out_dir, ALS_FILE, "train-als"))
    return {user: factor.row_factors[k] for k, user in enumerate(factor.row_ids)}


def stage_fit_bandit(cfg: Config, out_dir: str, kind: str) -> str:
    if kind not in BANDIT_FILES:
        raise ValueError(f"unknown bandit kind {kind!r}; expected row, regression, or deep")
    impressions = ensure_impressions(cfg, out_dir)
    if kind == "row":
        model = fit_row_layout(impressions)
        detail = f"{len(model.submodels)} submodel rows"
    elif kind == "regression":
        model = fit_regression_bandit(
            impressions,
            theta=float(cfg["bandit.theta"]),
            ridge_lambda=float(cfg["bandit.ridge_lambda"]),
            n_buckets=int(cfg["bandit.n_buckets"]),
            max_position=int(cfg["bandit.max_position"]),
        )
        detail = f"{len(model.weights)} ridge weights"
    else:
        model = fit_deep_bandit(
            impressions,
            user_vectors=_user_vectors(out_dir),
            hidden=parse_int_list(str(cfg["bandit.deep_hidden"]), "bandit.deep_hidden"),
            epochs=int(cfg["bandit.deep_epochs"]),
            lr=float(cfg["bandit.deep_lr"]),
            l2=float(cfg["bandit.deep_l2"]),
            batch_size=int(cfg["bandit.deep_batch"]),
            seed=stage_seed(int(cfg["seed"]), "deep_bandit"),
        )
        detail = f"final loss {model.training_loss[-1]:.5f}"
    save_model(_path(out_dir, BANDIT_FILES[kind]), model)
    return f"fit the {kind} bandit on {len(impressions)} impressions ({detail}) -> {BANDIT_FILES[kind]}"


def _knn_recommend(
    profile_items: Sequence[str],
    embeddings: Mapping[str, np.ndarray],
    exclude: set[str],
    n: int,
) -> list[str]:
    """Nearest items to the mean embedding of the profile, by cosine."""
    rows = [embeddings[i] for i in profile_items if i in embeddings]
    if not rows:
        return []
    centroid = np.mean(rows, axis=0)
    norm = np.linalg.norm(centroid)
    if norm == 0.0:
        return []
    scored = []
    for item in embeddings:
        if item in exclude:
            continue
        vec = embeddings[item]
        denom = np.linalg.norm(vec) * norm
        if denom == 0.0:
            continue
        scored.append((item, float(vec @ centroid / denom)))
    scored.sort(key=lambda t: (-t[1], t[0]))
    return [item for item, _ in scored[:n]]


def stage_evaluate_hr(cfg: Config, out_dir: str, n: int | None = None) -> str:
    n = int(cfg["eval.top_n"]) if n is None else n
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    log = load_events(_require(out_dir, EVENTS_FILE, "generate"))
    split = temporal_split(log, split_time(cfg))
    if len(split.test) == 0:
        raise ValueError("the evaluation window holds no events; lower eval.test_days")
    train_by_user = split.train.by_user()
    test_users = sorted({e.user_id for e in split.test})

    def _profile(user: str) -> list[str]:
        return [e.item_id for e in train_by_user.get(user, []) if e.kind is EventKind.CLICK]

    rates: dict[str, float] = {}

    factor_path = _path(out_dir, ALS_FILE)
    if os.path.exists(factor_path):
        factor = load_model(factor_path)
        recs = {}
        for user in test_users:
            if user in factor.row_index:
                exclude = {e.item_id for e in train_by_user.get(user, [])}
                recs[user] = [item for item, _ in mf_recommend(factor, user, exclude, n)]
        rates["mf"] = hit_rate_at_n(recs, split.test, n)

    for name, artifact in (
        ("knn_behavioral", ITEM_EMBEDDINGS_FILE),
        ("knn_hybrid", HYBRID_EMBEDDINGS_FILE),
    ):
        path = _path(out_dir, artifact)
        if not os.path.exists(path):
            continue
        embeddings = load_embeddings(path)
        recs = {}
        for user in test_users:
            exclude = {e.item_id for e in train_by_user.get(user, [])}
            recs[user] = _knn_recommend(_profile(user), embeddings, exclude, n)
        rates[name] = hit_rate_at_n(recs, split.test, n)

    seq_path = _path(out_dir, SEQ_FILE)
    emb_path = _path(out_dir, HYBRID_EMBEDDINGS_FILE)
    if os.path.exists(seq_path) and os.path.exists(emb_path):
        model = load_model(seq_path)
        embeddings = load_embeddings(emb_path)
        recs = {}
        for user in test_users:
            history = [i for i in _profile(user) if i in embeddings]
            if len(history) >= 2:
                ranked = seq_recommend(
                    model, embeddings, history[-model.lookback :], top_n=n
                )
                recs[user] = [item for item, _ in ranked]
        rates["seq"] = hit_rate_at_n(recs, split.test, n)

    if not rates:
        raise ValueError("no trained models found to evaluate; run the train-* stages first")
    with open(_path(out_dir, HR_FILE), "w", newline="\n") as fh:
        fh.write("model\thr_at_n\tn\n")
        for name in sorted(rates):
            fh.write(f"{name}\t{rates[name]:.17g}\t{n}\n")
    lines = [f"hr@{n} {name} = {rates[name]:.4f}" for name in sorted(rates)]
    return "\n".join(lines) + f"\n-> {HR_FILE}"


def build_policy(cfg: Config, out_dir: str, market: Market, arm: str):
    """One serving policy per arm name; trained artifacts are prerequisites."""
    epsilon = float(cfg["bandit.epsilon"])
    if arm == "static":
        clicks = _click_counts(_train_log(cfg, out_dir))
        ranking = sorted(market.item_ids, key=lambda i: (-clicks.get(i, 0), i))
        return StaticPolicy(ranking)
    if arm == "oracle":
        return OraclePolicy(market, epsilon=epsilon)
    submodels = build_submodels(cfg, out_dir, market)
    if arm == "row":
        return RowSeparatedPolicy(submodels, epsilon=epsilon)
    if arm == "regression":
        model = load_model(_require(out_dir, BANDIT_FILES["regression"], "fit-bandit regression"))
        return BanditPolicy(submodels, model, epsilon=epsilon)
    if arm == "deep":
        model = load_model(_require(out_dir, BANDIT_FILES["deep"], "fit-bandit deep"))
        return BanditPolicy(submodels, model, epsilon=epsilon, user_vectors=_user_vectors(out_dir))
    raise ValueError(f"unknown arm {arm!r}; expected one of {', '.join(ARM_CHOICES)}")


def stage_ab_sim(cfg: Config, out_dir: str, arm_a: str = "row", arm_b: str = "regression") -> str:
    market = market_from_config(cfg)
    policy_a = build_policy(cfg, out_dir, market, arm_a)
    policy_b = build_policy(cfg, out_dir, market, arm_b)
    impressions_a, impressions_b = run_ab_simulation(
        market,
        policy_a,
        policy_b,
        fraction=float(cfg["ab.fraction"]),
        end_day=int(cfg["ab.days"]),
        seed=stage_seed(int(cfg["seed"]), "ab"),
        history=_warmup_history(cfg, out_dir),
    )
    if not impressions_a or not impressions_b:
        raise ValueError("one experiment arm served no impressions; grow the market")
    save_impressions(_path(out_dir, IMPRESSIONS_A_FILE), impressions_a)
    save_impressions(_path(out_dir, IMPRESSIONS_B_FILE), impressions_b)

    def _ctr(imps: list[ImpressionRecord]) -> float:
        return sum(r.clicked for r in imps) / len(imps)

    return (
        f"A ({arm_a}): {len(impressions_a)} impressions, ctr {_ctr(impressions_a):.5f}; "
        f"B ({arm_b}): {len(impressions_b)} impressions, ctr {_ctr(impressions_b):.5f} "
        f"-> {IMPRESSIONS_A_FILE}, {IMPRESSIONS_B_FILE}"
    )


def stage_report(cfg: Config, out_dir: str) -> str:
    impressions_a = load_impressions(_require(out_dir, IMPRESSIONS_A_FILE, "ab-sim"))
    impressions_b = load_impressions(_require(out_dir, IMPRESSIONS_B_FILE, "ab-sim"))
    report = build_report(impressions_a, impressions_b)
    write_report(_path(out_dir, REPORT_FILE), report)
    return format_report(report) + f"\n-> {REPORT_FILE}"
