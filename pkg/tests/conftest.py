"""Shared fixtures: one toy-scale stage chain, built once per test session."""

import pytest

from marketrec import pipeline
from marketrec.config import parse_config, validate_config

TINY_CONFIG = """\
seed = 5
market.n_users = 40
market.n_items = 60
market.n_categories = 4
market.n_postcodes = 5
market.warmup_days = 6
market.sim_days = 4
eval.test_days = 2
als.dim = 8
als.iterations = 4
als.lookback_days = 6
text.word_epochs = 2
text.epochs = 4
image.epochs = 8
hybrid.out_dim = 16
hybrid.tower_width = 32
hybrid.epochs = 3
seq.hidden_dim = 16
seq.epochs = 2
bandit.deep_epochs = 2
ab.days = 4
"""


def _tiny_cfg():
    cfg = parse_config(TINY_CONFIG)
    validate_config(cfg)
    return cfg


@pytest.fixture
def tiny_cfg():
    """A fresh copy per test, safe to mutate."""
    return _tiny_cfg()


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """Output directory of a complete toy-scale run of every stage.

    Session-scoped: tests may re-run stages against it (reruns must be
    byte-identical anyway) but must not delete or hand-edit artifacts.
    """
    cfg = _tiny_cfg()
    out = str(tmp_path_factory.mktemp("tiny_run"))
    pipeline.stage_generate(cfg, out)
    pipeline.stage_train_als(cfg, out)
    pipeline.stage_train_location(cfg, out)
    pipeline.stage_train_text(cfg, out)
    pipeline.stage_train_image(cfg, out)
    pipeline.stage_train_hybrid(cfg, out)
    pipeline.stage_train_seq(cfg, out)
    for kind in ("row", "regression", "deep"):
        pipeline.stage_fit_bandit(cfg, out, kind)
    pipeline.stage_evaluate_hr(cfg, out)
    pipeline.stage_ab_sim(cfg, out, "row", "regression")
    pipeline.stage_report(cfg, out)
    return out
