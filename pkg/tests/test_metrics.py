"""Tests for bucket metrics, lifts and the lift report."""

import sys
from pathlib import Path

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

import pytest

from core.events import Event, EventKind
from core.metrics import (
    MISSING_BASELINE,
    MISSING_METRIC,
    NON_POSITIVE_BASELINE,
    BucketReport,
    compute_reports,
    filter_scope,
    format_lift,
    lift,
    render_report,
    scoped_ads,
    two_proportion_pvalue,
)

SHARES = {"conversion-dco": 0.9, "uniform": 0.05, "ctr-counting": 0.05}
USER = {"gender": "male", "device": "mobile"}


def _event(kind, ad_id, bucket, tick=10, assets=("t1", "i1"), price=None):
    return Event(
        timestamp=tick,
        kind=kind,
        user_segment_keys=USER,
        ad_id=ad_id,
        rendered_assets=assets,
        price_paid=price,
        bucket=bucket,
    )


def _log():
    events = []
    for bucket, n in (("conversion-dco", 90), ("uniform", 5)):
        events += [_event(EventKind.IMPRESSION, "dco-a", bucket) for _ in range(n)]
        events += [_event(EventKind.IMPRESSION, "dco-b", bucket) for _ in range(n)]
    events += [_event(EventKind.CLICK, "dco-a", "conversion-dco", price=1.0) for _ in range(9)]
    events.append(_event(EventKind.CLICK, "dco-a", "uniform", price=2.0))
    events += [_event(EventKind.CONVERSION, "dco-a", "conversion-dco") for _ in range(3)]
    events.append(_event(EventKind.CONVERSION, "ad-0", "uniform", assets=()))
    return events


def test_lift_examples():
    """Zero, positive and negative lifts format like the lift table."""
    assert lift(0.02, 0.02).value == 0.0
    assert format_lift(lift(0.02, 0.02)) == "0.00%"
    assert format_lift(lift(1.535, 1.0)) == "53.5%"
    assert format_lift(lift(0.654, 1.0)) == "-34.6%"
    assert format_lift(lift(1.05, 1.0)) == "5.00%"
    assert format_lift(None) == "n/a"


def test_lift_reasons():
    """Absent or non-positive baselines and absent metrics carry a reason."""
    assert lift(1.0, 0.0).reason == NON_POSITIVE_BASELINE
    assert lift(1.0, None).reason == MISSING_BASELINE
    assert lift(None, 1.0).reason == MISSING_METRIC
    assert lift(1.0, 0.0).value is None


def test_bucket_rates_consistent():
    """CPM and CPA reproduce spend; CPA is undefined without conversions."""
    report = BucketReport("conversion-dco", 0.9, impressions=1000, clicks=10, conversions=4, spend=20.0)
    assert report.cpm == pytest.approx(20.0)
    assert report.cpa == pytest.approx(5.0)
    assert report.cpa * report.conversions == pytest.approx(report.spend)
    assert report.cpm * report.impressions / 1000 == pytest.approx(report.spend)
    assert BucketReport("uniform", 0.05, impressions=10).cpa is None
    assert BucketReport("uniform", 0.05).cvr is None


def test_delivery_normalized_by_share():
    """Equal delivery per unit of traffic means zero delivery lift."""
    big = BucketReport("conversion-dco", 0.9, impressions=900)
    small = BucketReport("uniform", 0.05, impressions=50)
    assert lift(big.delivery, small.delivery).value == pytest.approx(0.0)


def test_two_proportion_pvalue():
    """Identical rates give 1; undefined tests give None."""
    assert two_proportion_pvalue(10, 100, 10, 100) == pytest.approx(1.0)
    assert two_proportion_pvalue(50, 1000, 20, 1000) < 0.01
    assert two_proportion_pvalue(1, 0, 1, 10) is None
    assert two_proportion_pvalue(0, 10, 0, 10) is None


def test_scope_same_ads_for_every_bucket():
    """A DCO ad converting in one bucket is scoped in all; non-converting and plain ads are not."""
    events = _log()
    assert scoped_ads(events) == ["dco-a"]
    scoped = filter_scope(events)
    assert {e.ad_id for e in scoped} == {"dco-a"}
    assert sum(1 for e in scoped if e.bucket == "uniform" and e.kind == EventKind.IMPRESSION) == 5


def test_window_by_occurrence_tick():
    """Conversions count by their impression tick, not their report tick."""
    conversion = _event(EventKind.CONVERSION, "dco-a", "uniform", tick=5)
    conversion.conversion_delay = 100
    assert scoped_ads([conversion], 0, 10) == ["dco-a"]
    assert scoped_ads([conversion], 10, 200) == []


def test_compute_reports():
    """Counts, spend and lifts against each baseline."""
    report = compute_reports(_log(), SHARES, oracle_cvr={"conversion-dco": 0.03, "uniform": 0.01})
    dco, uniform = report.buckets["conversion-dco"], report.buckets["uniform"]
    assert (dco.impressions, dco.clicks, dco.conversions, dco.spend) == (90, 9, 3, 9.0)
    assert (uniform.impressions, uniform.clicks, uniform.conversions, uniform.spend) == (5, 1, 0, 2.0)
    assert report.buckets["ctr-counting"].impressions == 0

    assert [row.baseline for row in report.rows] == ["uniform", "ctr-counting"]
    row = report.rows[0]
    assert row.lifts["cvr"].reason == NON_POSITIVE_BASELINE
    assert row.lifts["ctr"].value == pytest.approx(-50.0)
    assert row.lifts["delivery"].value == pytest.approx(0.0)
    assert row.lifts["cpa"].reason == MISSING_BASELINE
    assert row.oracle_lift.value == pytest.approx(200.0)
    assert report.rows[1].lifts["cvr"].reason == MISSING_BASELINE

    records = report.records()
    assert records[0]["record"] == "header"
    assert records[0]["scoped_ads"] == ["dco-a"]
    assert sum(1 for r in records if r["record"] == "lift") == 2


def test_render_report():
    """Markdown table with one row per baseline."""
    text = render_report(compute_reports(_log(), SHARES))
    assert text.startswith("# Conversion-based DCO lift report")
    assert "| Baseline | CVR lift | CTR lift | Delivery lift | CPM lift | CPA lift |" in text
    assert "| uniform | n/a | -50.0% | 0.00% |" in text
    assert "## Significance" in text


def test_empty_window_report():
    """No converting DCO ad in the window gives an empty report."""
    report = compute_reports(_log(), SHARES, window=(100, 200))
    assert report.empty
    assert "nothing to report" in render_report(report)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
