"""Bucket metrics, lifts against baseline buckets, and the lift report."""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple

from scipy import stats

from core.events import Event, EventKind

logger = logging.getLogger(__name__)

LIFT_METRICS = ("cvr", "ctr", "delivery", "cpm", "cpa")
LIFT_HEADERS = ("CVR lift", "CTR lift", "Delivery lift", "CPM lift", "CPA lift")

MISSING_METRIC = "missing_metric"
MISSING_BASELINE = "missing_baseline"
NON_POSITIVE_BASELINE = "non_positive_baseline"


@dataclass
class BucketReport:
    """Counts and rates of one bucket over the scoped traffic."""

    bucket: str
    share: float
    impressions: int = 0
    clicks: int = 0
    conversions: int = 0
    spend: float = 0.0
    oracle_cvr: float | None = None

    @property
    def cvr(self) -> float | None:
        return self.conversions / self.impressions if self.impressions else None

    @property
    def ctr(self) -> float | None:
        return self.clicks / self.impressions if self.impressions else None

    @property
    def cpm(self) -> float | None:
        return 1000.0 * self.spend / self.impressions if self.impressions else None

    @property
    def cpa(self) -> float | None:
        """Undefined without conversions."""
        return self.spend / self.conversions if self.conversions else None

    @property
    def delivery(self) -> float | None:
        """Impressions normalized by traffic share."""
        return self.impressions / self.share if self.share > 0 else None

    def metric(self, name: str) -> float | None:
        return getattr(self, name)

    def to_record(self) -> dict:
        return {
            "record": "bucket",
            "bucket": self.bucket,
            "share": self.share,
            "impressions": self.impressions,
            "clicks": self.clicks,
            "conversions": self.conversions,
            "spend": self.spend,
            "cvr": self.cvr,
            "ctr": self.ctr,
            "cpm": self.cpm,
            "cpa": self.cpa,
            "delivery": self.delivery,
            "oracle_cvr": self.oracle_cvr,
        }


@dataclass(frozen=True)
class Lift:
    """Percentage lift, or None with a reason code."""

    value: float | None
    reason: str | None = None


@dataclass
class LiftRow:
    """Treatment against one baseline bucket."""

    baseline: str
    lifts: Dict[str, Lift]
    p_values: Dict[str, float | None]
    oracle_lift: Lift | None = None

    def to_record(self, treatment: str) -> dict:
        return {
            "record": "lift",
            "treatment": treatment,
            "baseline": self.baseline,
            "lifts": {name: lift.value for name, lift in self.lifts.items()},
            "lift_reasons": {name: lift.reason for name, lift in self.lifts.items() if lift.reason},
            "p_values": dict(self.p_values),
            "oracle_cvr_lift": self.oracle_lift.value if self.oracle_lift is not None else None,
        }


@dataclass
class ExperimentReport:
    treatment: str
    window: Tuple[int | None, int | None]
    scoped_ads: List[str]
    buckets: Dict[str, BucketReport]
    rows: List[LiftRow] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not self.scoped_ads

    def records(self) -> List[dict]:
        header = {
            "record": "header",
            "treatment": self.treatment,
            "window_start": self.window[0],
            "window_end": self.window[1],
            "scoped_ads": list(self.scoped_ads),
        }
        return (
            [header]
            + [b.to_record() for b in self.buckets.values()]
            + [row.to_record(self.treatment) for row in self.rows]
        )


def lift(metric_dco: float | None, metric_base: float | None) -> Lift:
    """(metric_dco / metric_base - 1) * 100."""
    if metric_base is None:
        return Lift(None, MISSING_BASELINE)
    if not metric_base > 0:
        return Lift(None, NON_POSITIVE_BASELINE)
    if metric_dco is None:
        return Lift(None, MISSING_METRIC)
    return Lift((metric_dco / metric_base - 1.0) * 100.0)


def two_proportion_pvalue(x1: int, n1: int, x2: int, n2: int) -> float | None:
    """Two-sided pooled two-proportion z-test; None when undefined."""
    if n1 <= 0 or n2 <= 0:
        return None
    pooled = (x1 + x2) / (n1 + n2)
    se = math.sqrt(pooled * (1.0 - pooled) * (1.0 / n1 + 1.0 / n2))
    if se == 0:
        return None
    z = (x1 / n1 - x2 / n2) / se
    return float(2.0 * stats.norm.sf(abs(z)))


def in_window(event: Event, start: int | None, end: int | None) -> bool:
    """Occurrence timestamp in [start, end)."""
    return (start is None or event.timestamp >= start) and (end is None or event.timestamp < end)


def scoped_ads(events: Iterable[Event], start: int | None = None, end: int | None = None) -> List[str]:
    """DCO ads with at least one conversion in the window, any bucket."""
    ads = {
        e.ad_id
        for e in events
        if e.kind == EventKind.CONVERSION and e.is_dco and in_window(e, start, end)
    }
    return sorted(ads)


def filter_scope(events: Sequence[Event], start: int | None = None, end: int | None = None) -> List[Event]:
    """Window events of the scoped DCO ads, the same ad set for every bucket."""
    scope = set(scoped_ads(events, start, end))
    return [e for e in events if e.ad_id in scope and in_window(e, start, end)]


def bucket_counts(events: Iterable[Event], shares: Mapping[str, float]) -> Dict[str, BucketReport]:
    """Aggregate counts per configured bucket; events of other buckets are ignored."""
    reports = {name: BucketReport(bucket=name, share=share) for name, share in shares.items()}
    for e in events:
        report = reports.get(e.bucket)
        if report is None:
            continue
        if e.kind == EventKind.IMPRESSION:
            report.impressions += 1
        elif e.kind == EventKind.CLICK:
            report.clicks += 1
            report.spend += e.price_paid or 0.0
        else:
            report.conversions += 1
    return reports


def compute_reports(
    events: Sequence[Event],
    shares: Mapping[str, float],
    window: Tuple[int | None, int | None] = (None, None),
    treatment: str = "conversion-dco",
    oracle_cvr: Mapping[str, float | None] | None = None,
) -> ExperimentReport:
    """Scope the events, aggregate per bucket and compute treatment lifts per baseline."""
    start, end = window
    scoped = filter_scope(events, start, end)
    scope = scoped_ads(events, start, end)
    buckets = bucket_counts(scoped, shares)
    for name, value in (oracle_cvr or {}).items():
        if name in buckets:
            buckets[name].oracle_cvr = value

    report = ExperimentReport(treatment=treatment, window=(start, end), scoped_ads=scope, buckets=buckets)
    treated = buckets.get(treatment)
    if treated is None:
        logger.warning(f"Treatment bucket {treatment} not in the report buckets")
        return report

    for name, base in buckets.items():
        if name == treatment:
            continue
        lifts = {metric: lift(treated.metric(metric), base.metric(metric)) for metric in LIFT_METRICS}
        p_values = {
            "cvr": two_proportion_pvalue(treated.conversions, treated.impressions, base.conversions, base.impressions),
            "ctr": two_proportion_pvalue(treated.clicks, treated.impressions, base.clicks, base.impressions),
        }
        oracle = None
        if treated.oracle_cvr is not None or base.oracle_cvr is not None:
            oracle = lift(treated.oracle_cvr, base.oracle_cvr)
        report.rows.append(LiftRow(baseline=name, lifts=lifts, p_values=p_values, oracle_lift=oracle))

    logger.info(
        f"Report: {len(scope)} scoped DCO ads, "
        + ", ".join(f"{b.bucket}={b.impressions} imps/{b.conversions} convs" for b in buckets.values())
    )
    return report


def format_lift(lift_value: Lift | float | None) -> str:
    """Table formatting: one decimal from 10% up, two below; absent lifts as n/a."""
    value = lift_value.value if isinstance(lift_value, Lift) else lift_value
    if value is None:
        return "n/a"
    text = f"{value:.1f}%" if abs(value) >= 10 else f"{value:.2f}%"
    return "0.00%" if text == "-0.00%" else text


def _fmt(value: float | None, fmt: str) -> str:
    return "n/a" if value is None else format(value, fmt)


def render_report(report: ExperimentReport) -> str:
    """Markdown lift table, one row per baseline, plus bucket details."""
    start, end = report.window
    lines = [
        "# Conversion-based DCO lift report",
        "",
        f"- Treatment: {report.treatment}",
        f"- Window: [{'start' if start is None else start}, {'end' if end is None else end})",
        f"- DCO ads in scope: {len(report.scoped_ads)}",
        "",
    ]
    if report.empty:
        lines.append("No DCO ad has a conversion in the window; nothing to report.")
        return "\n".join(lines) + "\n"

    lines.append("| Baseline | " + " | ".join(LIFT_HEADERS) + " |")
    lines.append("|---" * (len(LIFT_HEADERS) + 1) + "|")
    for row in report.rows:
        cells = [format_lift(row.lifts[m]) for m in LIFT_METRICS]
        lines.append(f"| {row.baseline} | " + " | ".join(cells) + " |")

    lines += [
        "",
        "## Buckets",
        "",
        "| Bucket | Share | Impressions | Clicks | Conversions | Spend | CVR | CTR | CPM | CPA | Oracle CVR |",
        "|---|---|---|---|---|---|---|---|---|---|---|",
    ]
    for b in report.buckets.values():
        lines.append(
            f"| {b.bucket} | {b.share:.4g} | {b.impressions} | {b.clicks} | {b.conversions} | {b.spend:.2f} "
            f"| {_fmt(b.cvr, '.6f')} | {_fmt(b.ctr, '.6f')} | {_fmt(b.cpm, '.4f')} | {_fmt(b.cpa, '.4f')} "
            f"| {_fmt(b.oracle_cvr, '.6f')} |"
        )

    lines += [
        "",
        "## Significance",
        "",
        "| Baseline | CVR p-value | CTR p-value | Oracle CVR lift |",
        "|---|---|---|---|",
    ]
    for row in report.rows:
        oracle = format_lift(row.oracle_lift) if row.oracle_lift is not None else "n/a"
        lines.append(
            f"| {row.baseline} | {_fmt(row.p_values['cvr'], '.3g')} | {_fmt(row.p_values['ctr'], '.3g')} | {oracle} |"
        )
    return "\n".join(lines) + "\n"
