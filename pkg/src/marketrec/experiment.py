"""Offline ranking evaluation and online A/B measurement.

Hit rate against held-out events grades recommenders offline.  For live
comparisons there is a two-proportion z-test (exact hypergeometric tail when
either arm is small), a time-binned drift monitor, ramp plans for staged
rollouts, and a compact report artifact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from marketrec.bandit import ImpressionRecord
from marketrec.events import EventLog

SMALL_ARM_VIEWS = 30
REPORT_HEADER = "metric\tarm_a\tarm_b\tdelta\tp_value"


def hit_rate_at_n(
    recommendations: Mapping[str, Sequence[str]],
    test: EventLog,
    n: int = 10,
) -> float:
    """Fraction of test users whose top-n list contains a held-out item.

    Every user with at least one test event counts; a user with no
    recommendation list simply scores zero, so coverage failures lower the
    metric instead of hiding.  Clicks and conversions both count as hits.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    by_user = test.by_user()
    if not by_user:
        raise ValueError("test log has no events")
    hits = 0
    for user, events in by_user.items():
        top = recommendations.get(user, ())[:n]
        if set(top) & {e.item_id for e in events}:
            hits += 1
    return hits / len(by_user)


@dataclass(frozen=True, slots=True)
class ABTestResult:
    views_a: int
    clicks_a: int
    views_b: int
    clicks_b: int
    ctr_a: float
    ctr_b: float
    delta: float | None
    z: float | None
    p_value: float
    method: str


def _two_proportion_z(views_a: int, clicks_a: int, views_b: int, clicks_b: int) -> tuple[float, float]:
    """Pooled two-proportion z statistic and its two-sided p-value."""
    p_a = clicks_a / views_a
    p_b = clicks_b / views_b
    pooled = (clicks_a + clicks_b) / (views_a + views_b)
    se = math.sqrt(pooled * (1.0 - pooled) * (1.0 / views_a + 1.0 / views_b))
    if se == 0.0:
        return 0.0, 1.0
    z = (p_b - p_a) / se
    return z, math.erfc(abs(z) / math.sqrt(2.0))


def _fisher_exact(views_a: int, clicks_a: int, views_b: int, clicks_b: int) -> float:
    """Two-sided exact p: total probability of tables as or less likely.

    Hypergeometric enumeration over the click margin with exact rational
    arithmetic, so tiny arms cost nothing and nothing is approximated.
    """
    total = views_a + views_b
    k_total = clicks_a + clicks_b
    lo = max(0, k_total - views_b)
    hi = min(k_total, views_a)
    denom = math.comb(total, views_a)

    def prob(k: int) -> Fraction:
        return Fraction(math.comb(k_total, k) * math.comb(total - k_total, views_a - k), denom)

    observed = prob(clicks_a)
    p = Fraction(0)
    for k in range(lo, hi + 1):
        q = prob(k)
        if q <= observed:
            p += q
    return float(min(p, Fraction(1)))


def binomial_ab_test(
    views_a: int,
    clicks_a: int,
    views_b: int,
    clicks_b: int,
) -> ABTestResult:
    """Compare click rates of two arms.

    Uses the exact test when either arm has 30 or fewer views, the pooled
    z-test otherwise.  ``delta`` is the relative CTR change of B over A and
    is absent when arm A never clicked.
    """
    for name, views, clicks in (("a", views_a, clicks_a), ("b", views_b, clicks_b)):
        if views < 1:
            raise ValueError(f"arm {name} has no views")
        if clicks < 0 or clicks > views:
            raise ValueError(f"arm {name}: clicks {clicks} outside [0, views={views}]")
    ctr_a = clicks_a / views_a
    ctr_b = clicks_b / views_b
    delta = None if ctr_a == 0.0 else (ctr_b - ctr_a) / ctr_a
    if min(views_a, views_b) <= SMALL_ARM_VIEWS:
        z: float | None = None
        p = _fisher_exact(views_a, clicks_a, views_b, clicks_b)
        method = "fisher"
    else:
        z, p = _two_proportion_z(views_a, clicks_a, views_b, clicks_b)
        method = "z"
    return ABTestResult(
        views_a=views_a,
        clicks_a=clicks_a,
        views_b=views_b,
        clicks_b=clicks_b,
        ctr_a=ctr_a,
        ctr_b=ctr_b,
        delta=delta,
        z=z,
        p_value=p,
        method=method,
    )


@dataclass(frozen=True, slots=True)
class BinStat:
    t_start: int
    views_a: int
    clicks_a: int
    views_b: int
    clicks_b: int

    @property
    def ctr_a(self) -> float:
        return self.clicks_a / self.views_a if self.views_a else 0.0

    @property
    def ctr_b(self) -> float:
        return self.clicks_b / self.views_b if self.views_b else 0.0


@dataclass(frozen=True, slots=True)
class MonitorResult:
    bins: tuple[BinStat, ...]
    a_win_fraction: float
    b_win_fraction: float


def time_binned_monitor(
    impressions_a: Iterable[ImpressionRecord],
    impressions_b: Iterable[ImpressionRecord],
    bin_seconds: int = 86_400,
) -> MonitorResult:
    """Per-time-bucket CTR comparison on a shared, aligned grid.

    Win fractions count only bins where both arms were actually serving;
    a strict inequality is required, so exact ties favor neither arm.
    """
    if bin_seconds < 1:
        raise ValueError(f"bin_seconds must be >= 1, got {bin_seconds}")
    counts: dict[int, list[int]] = {}
    for arm, imps in ((0, impressions_a), (1, impressions_b)):
        for r in imps:
            row = counts.setdefault(r.timestamp // bin_seconds * bin_seconds, [0, 0, 0, 0])
            row[arm * 2] += 1
            row[arm * 2 + 1] += int(r.clicked)
    if not counts:
        raise ValueError("no impressions in either arm")
    bins = tuple(
        BinStat(t, va, ca, vb, cb) for t, (va, ca, vb, cb) in sorted(counts.items())
    )
    comparable = [b for b in bins if b.views_a and b.views_b]
    if not comparable:
        raise ValueError("arms never overlap in time; win fractions are undefined")
    a_wins = sum(1 for b in comparable if b.ctr_a > b.ctr_b)
    b_wins = sum(1 for b in comparable if b.ctr_b > b.ctr_a)
    return MonitorResult(
        bins=bins,
        a_win_fraction=a_wins / len(comparable),
        b_win_fraction=b_wins / len(comparable),
    )


@dataclass(frozen=True, slots=True)
class RampStage:
    fraction: float
    days: int


@dataclass(frozen=True, slots=True)
class RampPlan:
    stages: tuple[RampStage, ...]

    @property
    def total_days(self) -> int:
        return sum(s.days for s in self.stages)

    def fraction_on_day(self, day: int) -> float:
        """Treatment fraction for a zero-based day of the rollout."""
        if day < 0:
            raise ValueError(f"day must be >= 0, got {day}")
        cursor = 0
        for stage in self.stages:
            cursor += stage.days
            if day < cursor:
                return stage.fraction
        raise ValueError(f"day {day} is past the end of the {self.total_days}-day plan")


def make_ramp_plan(
    fractions: Sequence[float],
    days_per_stage: int | Sequence[int] = 1,
) -> RampPlan:
    """Staged rollout: strictly growing treatment share, capped at a 50/50 split."""
    if not fractions:
        raise ValueError("need at least one ramp stage")
    for f in fractions:
        if not (0.0 < f <= 0.5):
            raise ValueError(f"ramp fractions must lie in (0, 0.5], got {f}")
    for lo, hi in zip(fractions, fractions[1:]):
        if hi <= lo:
            raise ValueError(f"ramp fractions must strictly increase, got {lo} then {hi}")
    if isinstance(days_per_stage, int):
        days = [days_per_stage] * len(fractions)
    else:
        days = list(days_per_stage)
        if len(days) != len(fractions):
            raise ValueError(
                f"{len(fractions)} fractions but {len(days)} stage durations"
            )
    if any(d < 1 for d in days):
        raise ValueError("every stage must last at least one day")
    return RampPlan(stages=tuple(RampStage(f, d) for f, d in zip(fractions, days)))


@dataclass(frozen=True, slots=True)
class ExperimentReport:
    test: ABTestResult
    monitor: MonitorResult


def build_report(
    impressions_a: Sequence[ImpressionRecord],
    impressions_b: Sequence[ImpressionRecord],
    bin_seconds: int = 86_400,
) -> ExperimentReport:
    clicks_a = sum(1 for r in impressions_a if r.clicked)
    clicks_b = sum(1 for r in impressions_b if r.clicked)
    test = binomial_ab_test(len(impressions_a), clicks_a, len(impressions_b), clicks_b)
    monitor = time_binned_monitor(impressions_a, impressions_b, bin_seconds)
    return ExperimentReport(test=test, monitor=monitor)


def format_report(report: ExperimentReport) -> str:
    """Human-readable summary for terminal output."""
    t = report.test
    lines = [
        f"arm A: {t.clicks_a}/{t.views_a} clicks (ctr {t.ctr_a:.5f})",
        f"arm B: {t.clicks_b}/{t.views_b} clicks (ctr {t.ctr_b:.5f})",
        "relative ctr change: "
        + ("undefined (arm A never clicked)" if t.delta is None else f"{t.delta:+.4%}"),
        f"p-value ({t.method}): {t.p_value:.6g}"
        + (f", z = {t.z:.4f}" if t.z is not None else ""),
        f"time bins: B ahead in {report.monitor.b_win_fraction:.0%}, "
        f"A ahead in {report.monitor.a_win_fraction:.0%} "
        f"of {len(report.monitor.bins)} bins",
    ]
    return "\n".join(lines)


def write_report(path: str, report: ExperimentReport) -> None:
    """Four-row TSV: views, clicks, ctr (with delta and p), win fractions."""
    t = report.test
    m = report.monitor
    delta = "" if t.delta is None else f"{t.delta:.17g}"
    with open(path, "w", newline="\n") as fh:
        fh.write(REPORT_HEADER + "\n")
        fh.write(f"views\t{t.views_a}\t{t.views_b}\t\t\n")
        fh.write(f"clicks\t{t.clicks_a}\t{t.clicks_b}\t\t\n")
        fh.write(f"ctr\t{t.ctr_a:.17g}\t{t.ctr_b:.17g}\t{delta}\t{t.p_value:.17g}\n")
        fh.write(f"b_win_fraction\t{m.a_win_fraction:.17g}\t{m.b_win_fraction:.17g}\t\t\n")


def read_report(path: str) -> dict[str, dict[str, str]]:
    """Rows of a report file keyed by metric name (values stay as strings)."""
    with open(path, newline="") as fh:
        header = fh.readline().rstrip("\n")
        if header != REPORT_HEADER:
            raise ValueError(f"{path}: unexpected report header {header!r}")
        cols = header.split("\t")[1:]
        out: dict[str, dict[str, str]] = {}
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
            out[parts[0]] = dict(zip(cols, parts[1:]))
    return out
