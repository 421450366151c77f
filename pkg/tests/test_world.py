"""Tests for the synthetic marketplace."""

import sys
from pathlib import Path

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

import numpy as np
import pytest

from core.catalog import DcoAd
from core.config import ExperimentConfig, WorldConfig
from core.world import WorldModel


def _world(**params) -> WorldModel:
    config = ExperimentConfig()
    config.world = WorldConfig(**params)
    return WorldModel.from_config(config)


def test_default_world_layout():
    """5 DCO ads with 18 combinations, 3 plain ads, 12 segments, listings sorted by id."""
    world = _world()
    dco = world.catalog.dco_ads()
    assert len(dco) == 5
    assert all(isinstance(ad, DcoAd) and ad.n_combinations == 18 for ad in dco)
    assert len(world.segments) == 12
    assert [listing.ad_id for listing in world.listings] == sorted(world.truth)
    assert world.combinations["ad-0"] == [()]
    for truth in world.truth.values():
        assert truth.true_cvr.shape[0] == 12
        assert np.all((truth.true_cvr >= 0) & (truth.true_cvr <= 1))


def test_dominant_combination():
    """Without segment effects the dominant combination converts cvr_dominance times the rest."""
    world = _world(segment_effect=0.0, cvr_dominance=3.0)
    truth = world.truth["dco-0"]
    row = truth.true_cvr[0]
    dominant = int(truth.dominant_cvr[0])
    others = np.delete(row, dominant)
    np.testing.assert_allclose(others, others[0])
    assert row[dominant] == pytest.approx(3.0 * others[0])


def test_world_is_seeded():
    """Same world seed, same truth."""
    a, b = _world(seed=5), _world(seed=5)
    np.testing.assert_array_equal(a.truth["dco-1"].true_cvr, b.truth["dco-1"].true_cvr)
    assert [listing.amount for listing in a.listings] == [listing.amount for listing in b.listings]


def test_sample_user_features():
    """Users carry every segment key plus the extra features."""
    world = _world()
    seg_idx, user = world.sample_user(np.random.default_rng(0))
    assert tuple(user[k] for k in world.segment_keys) == world.segments[seg_idx]
    assert user["age"] in world.extra_user_features["age"]


def test_delay_distribution():
    """Geometric delays have the configured mean and respect the horizon."""
    world = _world(delay={"kind": "geometric", "mean_ticks": 48, "horizon_ticks": 100_000})
    rng = np.random.default_rng(1)
    delays = np.array([world.sample_delay(rng) for _ in range(20_000)])
    assert delays.min() >= 0
    assert delays.mean() == pytest.approx(48, rel=0.05)

    capped = _world(delay={"kind": "geometric", "mean_ticks": 48, "horizon_ticks": 10})
    assert max(capped.sample_delay(rng) for _ in range(1000)) == 10
    constant = _world(delay={"kind": "constant", "mean_ticks": 3})
    assert constant.sample_delay(rng) == 3


def test_expected_cvr():
    """Point mass on the dominant combination beats uniform rendering."""
    world = _world(segment_effect=0.0)
    truth = world.truth["dco-0"]
    point = np.zeros(18)
    point[int(truth.dominant_cvr[0])] = 1.0
    assert world.expected_cvr("dco-0", 0, point) == pytest.approx(truth.true_cvr[0].max())
    assert world.expected_cvr("dco-0", 0, None) == pytest.approx(truth.true_cvr[0].mean())
    assert world.mean_rates("ad-0", 0)[1] == pytest.approx(world.truth["ad-0"].true_cvr[0, 0])


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
