"""Tests for labeling, downsampling and periodic training."""

import math
import sys
from pathlib import Path

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

import numpy as np
import pytest

from core.catalog import Catalog, make_ad
from core.config import ExperimentConfig
from core.events import Event, EventKind
from core.offset import ModelState, StructureParams
from core.p2d import correct_prediction
from core.snapshot import snapshot_records
from core.training import AuxiliaryTrainer, TrainingExample, label_and_sample, train_period

USER = {"gender": "male", "device": "mobile"}


def _impression(t, ad_id="dco-0", assets=("Ti1", "Im1"), bucket="conversion-dco"):
    return Event(t, EventKind.IMPRESSION, dict(USER), ad_id, assets, bucket=bucket)


def _conversion(t, delay=0, ad_id="dco-0", assets=("Ti1", "Im1"), bucket="conversion-dco"):
    return Event(t, EventKind.CONVERSION, dict(USER), ad_id, assets, conversion_delay=delay, bucket=bucket)


def _catalog():
    return Catalog([make_ad("dco-0", {"campaign": ["c1"]}, [["Ti1", "Ti2"], ["Im1", "Im2"]])], user_features=["gender", "device"])


def test_clicks_skipped_and_conversions_kept():
    """Clicks never train; conversions are positives; r_ds=1 keeps every impression."""
    events = [
        _impression(0),
        Event(0, EventKind.CLICK, dict(USER), "dco-0", ("Ti1", "Im1"), price_paid=1.0),
        _conversion(0),
    ]
    examples = list(label_and_sample(events, 1.0, np.random.default_rng(0)))
    assert [ex.label for ex in examples] == [0, 1]


def test_non_join_keeps_converting_impression():
    """A converting impression still appears as a negative."""
    events = [_impression(0), _conversion(0, delay=3)]
    examples = list(label_and_sample(events, 1.0, np.random.default_rng(0)))
    assert len(examples) == 2
    assert examples[1].timestamp == 3


def test_positives_never_dropped():
    """Every conversion survives any downsampling factor."""
    events = [_conversion(t) for t in range(500)]
    examples = list(label_and_sample(events, 1000.0, np.random.default_rng(1)))
    assert len(examples) == 500


def test_downsampling_rate():
    """Kept impressions follow Binomial(n, 1/r_ds) within 3 sigma."""
    n, r_ds = 100_000, 100.0
    events = (_impression(t) for t in range(n))
    kept = sum(1 for _ in label_and_sample(events, r_ds, np.random.default_rng(2)))
    p = 1.0 / r_ds
    assert abs(kept - n * p) <= 3 * math.sqrt(n * p * (1 - p))


def test_downsampling_factor_validated():
    """r_ds below 1 is rejected."""
    with pytest.raises(ValueError):
        list(label_and_sample([_impression(0)], 0.5, np.random.default_rng(0)))


def test_catalog_features_used():
    """With a catalog, examples carry the standard features and the assets feature."""
    examples = list(label_and_sample([_conversion(0)], 1.0, np.random.default_rng(0), _catalog()))
    names = [name for name, _, _ in examples[0].ad_features]
    assert names == ["ad", "campaign", "assets"]


def test_correction_recovers_counted_cvr():
    """Downsample-and-correct recovers the counted and the true CVR; n keeps ~1e4 conversions at the lowest rate."""
    rng = np.random.default_rng(7)
    for p in (1e-3, 1e-2, 1e-1):
        n = max(1_000_000, int(1e4 / p))
        for r_ds in (10.0, 100.0):
            conversions = rng.binomial(n, p)
            negatives = rng.binomial(n, 1.0 / r_ds)
            raw = conversions / (negatives + conversions)
            corrected = correct_prediction(raw, r_ds)
            counted = conversions / n
            assert corrected == pytest.approx(counted, rel=0.05)
            assert corrected == pytest.approx(p, rel=0.05)


def test_trained_model_corrects_to_true_rate():
    """Trained on a downsampled non-joined stream, the corrected prediction approaches the CVR."""
    structure = StructureParams(user_features=("gender", "device"), o=2, s=2, eta=0.001, step_size=0.05)
    model = ModelState(structure, bias=-2.0, rng_seed=1)
    rng = np.random.default_rng(11)
    p, r_ds, n = 0.05, 10.0, 200_000

    events = []
    for t in range(n):
        events.append(_impression(t))
        if rng.random() < p:
            events.append(_conversion(t))
    examples = list(label_and_sample(events, r_ds, np.random.default_rng(12)))
    train_period(model, examples)

    raw = model.predict(
        model.build_user_vector(USER, create=False),
        model.build_ad_vector([("ad", ["dco-0"], [1.0]), ("assets", ["Ti1", "Im1"], [1.0, 1.0])], create=False),
    )
    assert correct_prediction(raw, r_ds) == pytest.approx(p, rel=0.15)


def test_train_period_order_and_version():
    """Examples train in timestamp order; non-empty batches bump the version."""
    config = ExperimentConfig()
    model = ModelState.from_config(config)
    ad = [("ad", ["dco-0"], [1.0])]
    batch = [
        TrainingExample(5, dict(USER), ad, 1, "dco-0"),
        TrainingExample(1, dict(USER), ad, 0, "dco-0"),
    ]
    snap = train_period(model, batch)
    assert snap.frozen
    assert snap.version == 1
    assert snap.ad_conversions == {"dco-0": 1}

    reference = ModelState.from_config(config)
    reference.train_event(USER, ad, 0.0)
    reference.train_event(USER, ad, 1.0)
    assert reference.bias == model.bias

    assert train_period(model, []).version == 1


def test_trainer_accepts_training_buckets_only():
    """Events of other buckets are not trained."""
    config = ExperimentConfig()
    trainer = AuxiliaryTrainer(config, _catalog())
    assert trainer.accepts(_impression(0))
    assert not trainer.accepts(_impression(0, bucket="uniform"))
    snap = trainer.train_batch([_conversion(0, bucket="uniform")])
    assert snap.diagnostics["trained_events"] == 0


def test_late_conversions_do_not_change_snapshot():
    """A snapshot up to tick t ignores conversions reported after t."""
    config = ExperimentConfig()
    config.training.period_ticks = 4
    config.training.downsample_factor = 2.0
    rng = np.random.default_rng(5)

    events = []
    for t in range(40):
        for _ in range(5):
            events.append(_impression(t, assets=(f"Ti{rng.integers(1, 3)}", f"Im{rng.integers(1, 3)}")))
        if rng.random() < 0.5:
            events.append(_conversion(t, delay=int(rng.integers(0, 10))))
    until = 24
    visible = [e for e in events if e.report_tick < until]
    late = [_conversion(20, delay=30), _conversion(23, delay=1)]

    snap_a = AuxiliaryTrainer(config, _catalog()).train_log(events + late, until)
    snap_b = AuxiliaryTrainer(config, _catalog()).train_log(visible, until)
    assert list(snapshot_records(snap_a)) == list(snapshot_records(snap_b))


def test_train_log_matches_batch_training():
    """Replaying a log equals feeding its periods one by one."""
    config = ExperimentConfig()
    config.training.period_ticks = 3
    config.training.downsample_factor = 1.0
    events = [_impression(t) for t in range(9)] + [_conversion(1, delay=2), _conversion(4, delay=1)]

    replayed = AuxiliaryTrainer(config, _catalog()).train_log(events, 9)

    trainer = AuxiliaryTrainer(config, _catalog())
    for period in range(3):
        trainer.train_batch([e for e in events if period * 3 <= e.report_tick < (period + 1) * 3])
    assert list(snapshot_records(trainer.snapshot)) == list(snapshot_records(replayed))
    assert replayed.version == 3


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
