"""Configuration management with Pydantic models."""

import math
from pathlib import Path
from typing import Dict, List, Literal, Tuple

import yaml
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from core.errors import ConfigError

BUCKET_NAMES = ("conversion-dco", "uniform", "ctr-counting")

# exp(-beta) stays a normal float up to here
MAX_BETA = 700.0


class StructureConfig(BaseModel):
    """Latent-factor model structure and optimizer settings.

    `overlap_size` and `own_size` are o and s; K is the number of segment keys.
    """

    overlap_size: int = Field(default=12, ge=0)
    own_size: int = Field(default=12, ge=0)
    eta: float = Field(default=0.01, ge=0.0, le=1.0)
    lambda_reg: float = Field(default=1e-4, ge=0.0)
    step_size: float = Field(default=0.05, gt=0.0)
    adagrad_epsilon: float = Field(default=1e-8, gt=0.0)
    initial_bias: float = -4.0
    seed: int = 7


class SegmentsConfig(BaseModel):
    """Traffic segment keys (also the auxiliary model's user features)."""

    keys: List[str] = Field(default=["gender", "device"], min_length=1)
    domains: Dict[str, List[str]] = Field(
        default={
            "gender": ["male", "female", "unknown"],
            "device": ["mobile", "desktop", "tablet", "unknown"],
        }
    )

    @model_validator(mode="after")
    def validate_domains(self):
        """Every key needs a non-empty domain."""
        if len(set(self.keys)) != len(self.keys):
            raise ValueError("segment keys must be unique")
        for key in self.keys:
            values = self.domains.get(key)
            if not values:
                raise ValueError(f"segment key '{key}' has an empty domain")
        return self

    def key_domains(self) -> List[List[str]]:
        """Domains in key order."""
        return [list(self.domains[key]) for key in self.keys]


class TrainingConfig(BaseModel):
    """Auxiliary model training stream."""

    period_ticks: int = Field(default=4, ge=1)
    downsample_factor: float = Field(default=100.0, ge=1.0)
    buckets: List[str] = Field(default=["conversion-dco"], min_length=1)


class P2DConfig(BaseModel):
    """Predictions-to-distributions parameters."""

    beta: float = Field(default=13.86, ge=0.0, le=MAX_BETA)
    lambda_mix: float = Field(default=0.1, ge=0.0, le=1.0)
    lambda_mode: Literal["total", "per_combination"] = "total"
    min_conversions: int = Field(default=1, ge=0)
    min_prediction: float = Field(default=1e-9, ge=0.0)


class CtrCountingConfig(BaseModel):
    """Simplified CTR counting baseline (not the successive-elimination algorithm)."""

    beta: float = Field(default=13.86, ge=0.0, le=MAX_BETA)
    lambda_mix: float = Field(default=0.1, ge=0.0, le=1.0)
    prior_clicks: float = Field(default=1.0, ge=0.0)
    prior_impressions: float = Field(default=2.0, gt=0.0)


class RankingConfig(BaseModel):
    """Shared main ranking model (pCTR / pCONV estimates per ad and segment)."""

    prior_strength: float = Field(default=200.0, gt=0.0)
    refresh_with_traffic: bool = True


class BucketConfig(BaseModel):
    """A/B bucket definition."""

    name: Literal["conversion-dco", "uniform", "ctr-counting"]
    share: float = Field(ge=0.0, le=1.0)


class ReportConfig(BaseModel):
    """Report window in ticks, [start, end); None means the whole run."""

    window_start: int | None = Field(default=None, ge=0)
    window_end: int | None = Field(default=None, ge=0)
    treatment: str = "conversion-dco"


class OutputConfig(BaseModel):
    """Artifacts and logging."""

    out_dir: str = "./runs/default"
    snapshot_every: int = Field(default=0, ge=0)
    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = "INFO"


class RateRange(BaseModel):
    """Closed range for per-ad base rates."""

    low: float = Field(ge=0.0, le=1.0)
    high: float = Field(ge=0.0, le=1.0)

    @model_validator(mode="after")
    def validate_order(self):
        """low must not exceed high."""
        if self.low > self.high:
            raise ValueError("low must be <= high")
        return self


class PriceRange(BaseModel):
    """Closed range for manual CPC bids."""

    low: float = Field(gt=0.0)
    high: float = Field(gt=0.0)

    @model_validator(mode="after")
    def validate_order(self):
        """low must not exceed high."""
        if self.low > self.high:
            raise ValueError("low must be <= high")
        return self


class DelayConfig(BaseModel):
    """Conversion reporting delay in ticks."""

    kind: Literal["geometric", "constant"] = "geometric"
    mean_ticks: float = Field(default=48.0, ge=0.0)
    horizon_ticks: int = Field(default=720, ge=0)


class PricingConfig(BaseModel):
    """Ad pricing mix."""

    ocpc_share: float = Field(default=0.7, ge=0.0, le=1.0)
    bid: PriceRange = Field(default_factory=lambda: PriceRange(low=0.5, high=1.5))
    tcpa_low: float = Field(default=20.0, gt=0.0)
    tcpa_high: float = Field(default=80.0, gt=0.0)
    daily_budget: float | None = Field(default=None, gt=0.0)


class WorldConfig(BaseModel):
    """Synthetic marketplace definition (loaded from `world_file`)."""

    seed: int = 11
    dco_ads: int = Field(default=5, ge=0)
    non_dco_ads: int = Field(default=3, ge=0)
    attribute_sizes: List[int] = Field(default=[2, 3, 3], min_length=1)
    campaigns: int = Field(default=3, ge=1)
    advertisers: int = Field(default=2, ge=1)
    categories: List[str] = Field(default=["retail", "travel", "finance", "sports"], min_length=1)
    base_cvr: RateRange = Field(default_factory=lambda: RateRange(low=0.01, high=0.02))
    base_ctr: RateRange = Field(default_factory=lambda: RateRange(low=0.01, high=0.03))
    cvr_dominance: float = Field(default=3.0, gt=0.0)
    ctr_dominance: float = Field(default=1.5, gt=0.0)
    dominant_per_segment: bool = False
    segment_effect: float = Field(default=0.2, ge=0.0)
    segment_weights: Literal["uniform", "random"] = "uniform"
    ticks_per_day: int = Field(default=24, ge=1)
    delay: DelayConfig = Field(default_factory=DelayConfig)
    pricing: PricingConfig = Field(default_factory=PricingConfig)
    extra_user_features: Dict[str, List[str]] = Field(
        default={"age": ["18-24", "25-34", "35-54", "55+"]}
    )

    @field_validator("attribute_sizes")
    @classmethod
    def validate_attribute_sizes(cls, v):
        """Up to 3 assets per attribute."""
        for size in v:
            if not 1 <= size <= 3:
                raise ValueError("attribute sizes must be in [1, 3]")
        return v

    @classmethod
    def from_yaml(cls, path: str | Path) -> "WorldConfig":
        """Load world configuration from YAML file."""
        return cls(**_read_yaml(path))


class ExperimentConfig(BaseModel):
    """Main experiment configuration."""

    seed: int = 2024
    world_file: str = "world-default.yaml"
    ticks: int = Field(default=4800, ge=1)
    arrivals_per_tick: float = Field(default=40.0, gt=0.0)
    score_noise: float = Field(default=0.3, ge=0.0)
    structure: StructureConfig = Field(default_factory=StructureConfig)
    segments: SegmentsConfig = Field(default_factory=SegmentsConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    p2d: P2DConfig = Field(default_factory=P2DConfig)
    ctr_counting: CtrCountingConfig = Field(default_factory=CtrCountingConfig)
    ranking: RankingConfig = Field(default_factory=RankingConfig)
    buckets: List[BucketConfig] = Field(
        default_factory=lambda: [
            BucketConfig(name="conversion-dco", share=0.9),
            BucketConfig(name="uniform", share=0.05),
            BucketConfig(name="ctr-counting", share=0.05),
        ],
        min_length=1,
    )
    report: ReportConfig = Field(default_factory=ReportConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)
    world: WorldConfig = Field(default_factory=WorldConfig)

    @model_validator(mode="after")
    def validate_buckets(self):
        """Bucket names unique, shares sum to 1, training buckets exist."""
        names = [b.name for b in self.buckets]
        if len(set(names)) != len(names):
            raise ValueError("bucket names must be unique")
        total = math.fsum(b.share for b in self.buckets)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"bucket shares must sum to 1, got {total}")
        for name in self.training.buckets:
            if name not in names:
                raise ValueError(f"training bucket '{name}' is not configured")
        k = len(self.segments.keys)
        dim = k * (k - 1) // 2 * self.structure.overlap_size + k * self.structure.own_size
        if dim <= 0:
            raise ValueError("structure yields D = 0; raise overlap_size or own_size")
        return self

    def bucket_shares(self) -> Dict[str, float]:
        """Bucket name to traffic share, in configured order."""
        return {b.name: b.share for b in self.buckets}

    def report_window(self) -> Tuple[int | None, int | None]:
        """Configured report window."""
        return self.report.window_start, self.report.window_end

    def to_yaml(self, path: str | Path) -> None:
        """Save configuration to YAML file."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)

        with open(path, "w") as f:
            yaml.dump(self.model_dump(), f, default_flow_style=False, sort_keys=False)


def _read_yaml(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")

    with open(path, "r") as f:
        data = yaml.safe_load(f)

    return data or {}


def _as_config_error(exc: ValidationError, prefix: str = "") -> ConfigError:
    first = exc.errors()[0]
    parts = [prefix] if prefix else []
    parts.extend(str(part) for part in first["loc"])
    return ConfigError(".".join(parts) or "<root>", first["msg"])


def _load_world(path: Path, data: dict) -> WorldConfig:
    # saved run configs carry the resolved world inline
    if data.get("world") is not None:
        return WorldConfig(**data["world"])

    world_file = data.get("world_file")
    if world_file is None:
        raise ConfigError("world_file", "field required")
    world_path = Path(world_file)
    if not world_path.is_absolute():
        world_path = path.parent / world_path
    if not world_path.exists():
        raise ConfigError("world_file", f"file not found: {world_path}")
    try:
        return WorldConfig.from_yaml(world_path)
    except yaml.YAMLError as e:
        raise ConfigError("world_file", f"invalid YAML: {e}") from e


def load_experiment(path: str | Path, seed: int | None = None) -> ExperimentConfig:
    """Load an experiment config and its world.

    The world comes from an inline `world` section when present (as in a run's saved
    config.yaml), otherwise from `world_file` resolved relative to the experiment file.
    Validation failures are raised as ConfigError naming the field.
    """
    path = Path(path)
    try:
        data = _read_yaml(path)
    except FileNotFoundError as e:
        raise ConfigError("config", str(e)) from e
    except yaml.YAMLError as e:
        raise ConfigError("config", f"invalid YAML: {e}") from e

    try:
        world = _load_world(path, data)
    except ValidationError as e:
        raise _as_config_error(e, prefix="world") from e

    data = dict(data)
    data["world"] = world.model_dump()
    if seed is not None:
        data["seed"] = seed
    try:
        return ExperimentConfig(**data)
    except ValidationError as e:
        raise _as_config_error(e) from e


def override_p2d(config: ExperimentConfig, **overrides) -> ExperimentConfig:
    """Apply command-line P2D overrides (None means keep) with the same validation as the file."""
    update = {k: v for k, v in overrides.items() if v is not None}
    if update:
        try:
            config.p2d = P2DConfig(**{**config.p2d.model_dump(), **update})
        except ValidationError as e:
            raise _as_config_error(e, prefix="p2d") from e
    return config
