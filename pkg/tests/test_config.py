"""Tests for configuration loading and validation."""

import sys
from pathlib import Path

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

import pytest
import yaml

from core.config import (
    BucketConfig,
    ExperimentConfig,
    P2DConfig,
    PricingConfig,
    WorldConfig,
    load_experiment,
    override_p2d,
)
from core.errors import ConfigError

CONFIGS = Path(__file__).parent.parent / "configs"


def _write(path: Path, data: dict) -> Path:
    path.write_text(yaml.safe_dump(data))
    return path


def test_defaults_valid():
    """Default config: two segment keys, 2x3x3 world attributes, shares summing to 1."""
    config = ExperimentConfig()
    assert len(config.segments.keys) == 2
    assert sum(len(d) for d in config.segments.key_domains()) == 7
    assert config.bucket_shares() == {"conversion-dco": 0.9, "uniform": 0.05, "ctr-counting": 0.05}
    assert config.world.attribute_sizes == [2, 3, 3]


def test_shipped_configs_load():
    """The default and smoke configs load with their world file."""
    config = load_experiment(CONFIGS / "experiment-default.yaml")
    assert config.ticks == 4800
    assert config.world.dco_ads == 5
    smoke = load_experiment(CONFIGS / "experiment-smoke.yaml")
    assert smoke.ticks == 96


def test_shares_must_sum_to_one():
    """Bucket shares off by more than 1e-9 are rejected."""
    with pytest.raises(ValueError):
        ExperimentConfig(buckets=[BucketConfig(name="conversion-dco", share=0.5), BucketConfig(name="uniform", share=0.4)])


def test_unknown_bucket_rejected():
    """Only the three bucket names exist."""
    with pytest.raises(ValueError):
        BucketConfig(name="holdout", share=1.0)


def test_training_bucket_must_exist():
    """Training buckets reference configured buckets."""
    with pytest.raises(ValueError):
        ExperimentConfig(
            buckets=[BucketConfig(name="uniform", share=1.0)],
        )


def test_segment_domains_required():
    """Every segment key needs a domain."""
    with pytest.raises(ValueError):
        ExperimentConfig(segments={"keys": ["gender", "region"], "domains": {"gender": ["m", "f"]}})


def test_zero_dimension_structure_rejected():
    """o = s = 0 leaves no model dimensions."""
    with pytest.raises(ValueError):
        ExperimentConfig(structure={"overlap_size": 0, "own_size": 0})


def test_attribute_sizes_limited():
    """World attributes hold 1 to 3 assets."""
    with pytest.raises(ValueError):
        WorldConfig(attribute_sizes=[2, 4])


def test_missing_world_file_names_field(tmp_path):
    """A missing world file raises ConfigError on world_file."""
    path = _write(tmp_path / "exp.yaml", {"world_file": "absent.yaml"})
    with pytest.raises(ConfigError) as excinfo:
        load_experiment(path)
    assert excinfo.value.field == "world_file"
    assert str(excinfo.value).startswith("world_file:")


def test_field_path_in_errors(tmp_path):
    """Validation errors carry the dotted field path."""
    _write(tmp_path / "world.yaml", {})
    path = _write(tmp_path / "exp.yaml", {"world_file": "world.yaml", "p2d": {"beta": -1.0}})
    with pytest.raises(ConfigError) as excinfo:
        load_experiment(path)
    assert excinfo.value.field == "p2d.beta"

    _write(tmp_path / "world.yaml", {"base_cvr": {"low": 0.5, "high": 0.1}})
    path = _write(tmp_path / "exp.yaml", {"world_file": "world.yaml"})
    with pytest.raises(ConfigError) as excinfo:
        load_experiment(path)
    assert excinfo.value.field.startswith("world.base_cvr")


def test_seed_override_and_world_resolution(tmp_path):
    """--seed overrides the config; the world file resolves next to the experiment file."""
    sub = tmp_path / "cfg"
    sub.mkdir()
    _write(sub / "w.yaml", {"seed": 99, "dco_ads": 2})
    path = _write(sub / "exp.yaml", {"world_file": "w.yaml", "seed": 1})
    config = load_experiment(path, seed=5)
    assert config.seed == 5
    assert config.world.seed == 99
    assert config.world.dco_ads == 2


def test_bid_range_allows_prices_above_one():
    """Manual bids are positive prices, not probabilities."""
    assert PricingConfig().bid.high == 1.5
    assert PricingConfig(bid={"low": 2.0, "high": 5.0}).bid.low == 2.0
    with pytest.raises(ValueError):
        PricingConfig(bid={"low": 0.0, "high": 1.0})
    with pytest.raises(ValueError):
        PricingConfig(bid={"low": 3.0, "high": 2.0})
    with pytest.raises(ValueError):
        WorldConfig(base_cvr={"low": 0.1, "high": 1.5})


def test_beta_capped():
    """beta above 700 is rejected in the file and on the command line."""
    with pytest.raises(ValueError):
        P2DConfig(beta=2000.0)
    config = override_p2d(ExperimentConfig(), beta=6.93, lambda_mix=None)
    assert config.p2d.beta == 6.93
    assert config.p2d.lambda_mix == 0.1
    with pytest.raises(ConfigError) as excinfo:
        override_p2d(ExperimentConfig(), beta=2000.0)
    assert excinfo.value.field == "p2d.beta"


def test_saved_config_reloads(tmp_path):
    """A saved run config reloads with its inline world and no world file."""
    config = ExperimentConfig()
    config.p2d.beta = 6.93
    config.world.dco_ads = 2
    config.to_yaml(tmp_path / "out" / "config.yaml")
    loaded = load_experiment(tmp_path / "out" / "config.yaml")
    assert loaded == config


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
