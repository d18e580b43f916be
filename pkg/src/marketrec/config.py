"""Pipeline configuration: flat ``key = value`` text with dotted prefixes.

Every key is optional and falls back to the documented default, so an empty
file is a complete configuration.  Values are typed by their default (int,
float, bool, or string) and the whole mapping is validated up front, before
any stage does work.
"""

from __future__ import annotations

import zlib
from typing import Mapping

import numpy as np

from marketrec.simulator import MarketConfig

ConfigValue = int | float | bool | str

DEFAULTS: dict[str, ConfigValue] = {
    "seed": 0,
    # synthetic market
    "market.n_users": 150,
    "market.n_items": 200,
    "market.n_categories": 6,
    "market.n_postcodes": 8,
    "market.latent_dim": 8,
    "market.image_dim": 12,
    "market.image_noise": 0.1,
    "market.warmup_days": 20,
    "market.sim_days": 10,
    "market.cold_fraction": 0.1,
    "market.viral_fraction": 0.03,
    "market.mean_lifespan_days": 365.0,
    "market.temperature": 1.0,
    "market.drift_step": 0.05,
    "market.heavy_fraction": 0.3,
    "market.heavy_sessions_per_day": 3.0,
    "market.light_sessions_per_day": 0.4,
    "market.organic_exposure": 12,
    "market.feed_slots": 10,
    "market.conversion_prob": 0.1,
    "market.base_logit": -2.2,
    "market.affinity_weight": 2.5,
    "market.postcode_bonus": 0.6,
    "market.viral_boost": 1.2,
    "market.viral_damping": 0.15,
    "market.t0": 1_600_000_000,
    # behavioral factorization
    "als.dim": 32,
    "als.reg": 0.1,
    "als.alpha": 40.0,
    "als.iterations": 15,
    "als.w_click": 1.0,
    "als.w_conv": 5.0,
    "als.lookback_days": 20,
    # postcode co-visit factorization
    "location.dim": 8,
    "location.reg": 0.1,
    "location.alpha": 40.0,
    "location.iterations": 15,
    # word vectors and the convolutional text encoder
    "text.word_dim": 32,
    "text.window": 4,
    "text.negatives": 5,
    "text.word_epochs": 5,
    "text.word_lr": 0.05,
    "text.min_count": 1,
    "text.widths": "2,3,4",
    "text.n_filters": 16,
    "text.repr_dim": 32,
    "text.epochs": 15,
    "text.lr": 0.03,
    # image tower
    "image.hidden_dim": 64,
    "image.epochs": 60,
    "image.lr": 0.01,
    "image.batch_size": 16,
    # fused item encoder
    "hybrid.tower_width": 256,
    "hybrid.out_dim": 100,
    "hybrid.epochs": 10,
    "hybrid.lr": 0.05,
    "hybrid.margin": 0.2,
    "hybrid.negative_ratio": 4,
    # sequence model
    "seq.lookback": 15,
    "seq.horizon": 5,
    "seq.hidden_dim": 64,
    "seq.epochs": 5,
    "seq.lr": 0.05,
    # feed value models
    "bandit.theta": 0.8,
    "bandit.ridge_lambda": 1.0,
    "bandit.n_buckets": 10,
    "bandit.max_position": 50,
    "bandit.epsilon": 0.05,
    "bandit.deep_hidden": "64,32",
    "bandit.deep_epochs": 6,
    "bandit.deep_lr": 0.05,
    "bandit.deep_l2": 1e-5,
    "bandit.deep_batch": 64,
    # offline evaluation
    "eval.top_n": 10,
    "eval.test_days": 5,
    # A/B simulation
    "ab.fraction": 0.5,
    "ab.days": 10,
}


def _convert(key: str, raw: str, lineno: int) -> ConfigValue:
    default = DEFAULTS[key]
    if isinstance(default, bool):  # bool first: bool is an int subclass
        low = raw.lower()
        if low in ("true", "false"):
            return low == "true"
        raise ValueError(f"line {lineno}: {key} expects true/false, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ValueError(f"line {lineno}: {key} expects an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ValueError(f"line {lineno}: {key} expects a number, got {raw!r}") from None
    return raw


def parse_config(text: str) -> dict[str, ConfigValue]:
    """Parse config text into a full mapping (defaults filled in)."""
    out = dict(DEFAULTS)
    seen: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in DEFAULTS:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        if key in seen:
            raise ValueError(
                f"line {lineno}: duplicate key {key!r} (first set on line {seen[key]})"
            )
        seen[key] = lineno
        out[key] = _convert(key, raw, lineno)
    return out


def read_config(path: str) -> dict[str, ConfigValue]:
    with open(path, encoding="utf-8") as fh:
        cfg = parse_config(fh.read())
    validate_config(cfg)
    return cfg


def format_config(cfg: Mapping[str, ConfigValue]) -> str:
    """Canonical text form: sorted keys, shortest round-trip float literals."""
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, bool):
            rendered = "true" if value else "false"
        elif isinstance(value, float):
            rendered = repr(value)
        else:
            rendered = str(value)
        lines.append(f"{key} = {rendered}")
    return "\n".join(lines) + "\n"


def parse_int_list(raw: str, key: str) -> tuple[int, ...]:
    try:
        values = tuple(int(part.strip()) for part in raw.split(",") if part.strip())
    except ValueError:
        raise ValueError(f"{key} expects comma-separated integers, got {raw!r}") from None
    if not values or any(v < 1 for v in values):
        raise ValueError(f"{key} expects positive integers, got {raw!r}")
    return values


def _require(cond: bool, key: str, message: str, value: ConfigValue) -> None:
    if not cond:
        raise ValueError(f"{key} {message}, got {value}")


def validate_config(cfg: Mapping[str, ConfigValue]) -> None:
    """Check every stage's preconditions before any stage runs."""
    unknown = sorted(set(cfg) - set(DEFAULTS))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    market_config(cfg)  # MarketConfig enforces its own invariants

    c = cfg
    _require(int(c["seed"]) >= 0, "seed", "must be >= 0", c["seed"])
    _require(int(c["als.dim"]) >= 1, "als.dim", "must be >= 1", c["als.dim"])
    _require(float(c["als.reg"]) > 0, "als.reg", "must be > 0", c["als.reg"])
    _require(float(c["als.alpha"]) > 0, "als.alpha", "must be > 0", c["als.alpha"])
    _require(int(c["als.iterations"]) >= 1, "als.iterations", "must be >= 1", c["als.iterations"])
    _require(float(c["als.w_click"]) > 0, "als.w_click", "must be > 0", c["als.w_click"])
    _require(
        float(c["als.w_conv"]) > float(c["als.w_click"]),
        "als.w_conv", "must exceed als.w_click", c["als.w_conv"],
    )
    _require(int(c["als.lookback_days"]) >= 1, "als.lookback_days", "must be >= 1", c["als.lookback_days"])

    _require(int(c["location.dim"]) >= 1, "location.dim", "must be >= 1", c["location.dim"])
    _require(float(c["location.reg"]) > 0, "location.reg", "must be > 0", c["location.reg"])
    _require(float(c["location.alpha"]) > 0, "location.alpha", "must be > 0", c["location.alpha"])
    _require(
        int(c["location.iterations"]) >= 1,
        "location.iterations", "must be >= 1", c["location.iterations"],
    )

    for key in ("text.word_dim", "text.window", "text.negatives", "text.word_epochs",
                "text.min_count", "text.n_filters", "text.repr_dim", "text.epochs"):
        _require(int(c[key]) >= 1, key, "must be >= 1", c[key])
    _require(float(c["text.word_lr"]) > 0, "text.word_lr", "must be > 0", c["text.word_lr"])
    _require(float(c["text.lr"]) > 0, "text.lr", "must be > 0", c["text.lr"])
    parse_int_list(str(c["text.widths"]), "text.widths")

    for key in ("image.hidden_dim", "image.epochs", "image.batch_size"):
        _require(int(c[key]) >= 1, key, "must be >= 1", c[key])
    _require(float(c["image.lr"]) > 0, "image.lr", "must be > 0", c["image.lr"])

    for key in ("hybrid.tower_width", "hybrid.out_dim", "hybrid.epochs", "hybrid.negative_ratio"):
        _require(int(c[key]) >= 1, key, "must be >= 1", c[key])
    _require(float(c["hybrid.lr"]) > 0, "hybrid.lr", "must be > 0", c["hybrid.lr"])
    _require(0 <= float(c["hybrid.margin"]) < 1, "hybrid.margin", "must lie in [0, 1)", c["hybrid.margin"])

    _require(int(c["seq.lookback"]) >= 2, "seq.lookback", "must be >= 2", c["seq.lookback"])
    for key in ("seq.horizon", "seq.hidden_dim", "seq.epochs"):
        _require(int(c[key]) >= 1, key, "must be >= 1", c[key])
    _require(float(c["seq.lr"]) > 0, "seq.lr", "must be > 0", c["seq.lr"])

    _require(0 < float(c["bandit.theta"]) < 1, "bandit.theta", "must lie in (0, 1)", c["bandit.theta"])
    _require(float(c["bandit.ridge_lambda"]) > 0, "bandit.ridge_lambda", "must be > 0", c["bandit.ridge_lambda"])
    _require(int(c["bandit.n_buckets"]) >= 2, "bandit.n_buckets", "must be >= 2", c["bandit.n_buckets"])
    _require(int(c["bandit.max_position"]) >= 1, "bandit.max_position", "must be >= 1", c["bandit.max_position"])
    _require(0 <= float(c["bandit.epsilon"]) <= 1, "bandit.epsilon", "must lie in [0, 1]", c["bandit.epsilon"])
    parse_int_list(str(c["bandit.deep_hidden"]), "bandit.deep_hidden")
    for key in ("bandit.deep_epochs", "bandit.deep_batch"):
        _require(int(c[key]) >= 1, key, "must be >= 1", c[key])
    _require(float(c["bandit.deep_lr"]) > 0, "bandit.deep_lr", "must be > 0", c["bandit.deep_lr"])
    _require(float(c["bandit.deep_l2"]) >= 0, "bandit.deep_l2", "must be >= 0", c["bandit.deep_l2"])

    _require(int(c["eval.top_n"]) >= 1, "eval.top_n", "must be >= 1", c["eval.top_n"])
    _require(
        1 <= int(c["eval.test_days"]) < int(c["market.warmup_days"]),
        "eval.test_days", "must leave at least one training day in the warmup window",
        c["eval.test_days"],
    )

    _require(0 < float(c["ab.fraction"]) < 1, "ab.fraction", "must lie in (0, 1)", c["ab.fraction"])
    _require(
        1 <= int(c["ab.days"]) <= int(c["market.sim_days"]),
        "ab.days", "must lie within the simulated window", c["ab.days"],
    )


def market_config(cfg: Mapping[str, ConfigValue]) -> MarketConfig:
    """Build the simulator config from the market.* keys."""
    prefix = "market."
    kwargs = {key[len(prefix):]: cfg[key] for key in DEFAULTS if key.startswith(prefix)}
    return MarketConfig(**kwargs)  # type: ignore[arg-type]


def stage_seed(root: int, stage: str) -> int:
    """Stable per-stage seed fan-out from the one root seed.

    crc32, not hash(): Python's string hashing is salted per process and
    would break byte-identical reruns.
    """
    ss = np.random.SeedSequence([int(root), zlib.crc32(stage.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])
