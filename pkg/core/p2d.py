"""Predictions to distributions (P2D).

For every DCO ad and traffic segment: predict each combination's raw CVR with the
auxiliary model, correct it for impression downsampling and the non-joined positives,
and turn the corrected predictions into

    Q_C = (1 - lambda) * exp(-beta * (1 - P_C / P_M)) / sum_S exp(-beta * (1 - P_S / P_M)) + lambda / N

where P_M is the segment's maximal prediction. Lambda is the total uniform mass.
"""

import logging
from dataclasses import dataclass
from itertools import product
from pathlib import Path
from typing import Dict, Iterator, List, Sequence, Tuple

import numpy as np

from core.catalog import ASSETS_FEATURE, Catalog, DcoAd, assets_feature, enumerate_combinations
from core.errors import ConfigError, StructuralError
from core.offset import ModelState, aggregate_multivalue
from core.sampling import AliasSampler
from core.utils import read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

Segment = Tuple[str, ...]
Combination = Tuple[str, ...]

TABLE_FORMAT = "dco-distributions"


def enumerate_segments(segment_key_domains: Sequence[Sequence[str]]) -> List[Segment]:
    """Cartesian product of the segment key domains, in key and domain order."""
    if not segment_key_domains:
        raise ConfigError("segments.keys", "at least one segment key is required")
    for i, domain in enumerate(segment_key_domains):
        if not domain:
            raise ConfigError(f"segments.domains[{i}]", "empty domain")
    return [tuple(values) for values in product(*segment_key_domains)]


def correct_prediction(raw: float, r_ds: float) -> float:
    """min{1, raw / (r_ds * (1 - raw))}; 1 from raw >= r_ds / (1 + r_ds) on."""
    if raw >= r_ds / (1.0 + r_ds):
        return 1.0
    return min(1.0, raw / (r_ds * (1.0 - raw)))


def correct_predictions(raw: np.ndarray, r_ds: float) -> np.ndarray:
    """Vectorized correct_prediction."""
    raw = np.asarray(raw, dtype=float)
    saturated = raw >= r_ds / (1.0 + r_ds)
    with np.errstate(divide="ignore", invalid="ignore"):
        corrected = np.minimum(1.0, raw / (r_ds * (1.0 - raw)))
    return np.where(saturated, 1.0, corrected)


def uniform_distribution(n: int) -> np.ndarray:
    """Uniform vector over n combinations."""
    if n < 1:
        raise StructuralError("a distribution needs at least one combination")
    return np.full(n, 1.0 / n)


def effective_lambda(lambda_mix: float, mode: str, n: int) -> float:
    """Total uniform mass for n combinations under the configured lambda reading."""
    if mode == "per_combination":
        return min(1.0, lambda_mix * n)
    return lambda_mix


def softmax_distribution(
    preds: Sequence[float], beta: float, lambda_mix: float, min_prediction: float = 0.0
) -> np.ndarray:
    """SoftMax of -beta * (1 - P / P_M) mixed with a uniform component of total mass lambda.

    Degenerate inputs (P_M <= 0 or below min_prediction) give the uniform vector.

    Ordering follows the predictions strictly while the SoftMax weights stay normal floats
    (beta up to 700). With lambda > 0, a weight below the float resolution of lambda / N
    rounds to the floor, so such combinations tie at lambda / N and the order is kept only
    weakly.
    """
    p = np.asarray(preds, dtype=float)
    n = len(p)
    p_max = float(p.max()) if n else 0.0
    if n == 0 or not p_max > 0.0 or p_max < min_prediction:
        return uniform_distribution(n)
    weights = np.exp(-beta * (1.0 - p / p_max))
    return (1.0 - lambda_mix) * weights / weights.sum() + lambda_mix / n


@dataclass
class TableEntry:
    """Distribution of one (ad, segment) cell and its alias sampler."""

    probabilities: np.ndarray
    sampler: AliasSampler


class DistributionTable:
    """Combination distributions per (ad, segment), with the parameters that produced them."""

    def __init__(self, model_version: int = 0, params: Dict[str, object] | None = None):
        self.model_version = model_version
        self.params: Dict[str, object] = dict(params or {})
        self.combinations: Dict[str, List[Combination]] = {}
        self.entries: Dict[Tuple[str, Segment], TableEntry] = {}

    def set(self, ad_id: str, segment: Segment, combinations: List[Combination], probabilities: np.ndarray) -> None:
        probs = np.asarray(probabilities, dtype=float)
        if len(probs) != len(combinations):
            raise StructuralError(f"{ad_id}: {len(combinations)} combinations, {len(probs)} probabilities")
        self.combinations.setdefault(ad_id, list(combinations))
        self.entries[(ad_id, tuple(segment))] = TableEntry(probs, AliasSampler(probs))

    def get(self, ad_id: str, segment: Segment) -> TableEntry | None:
        return self.entries.get((ad_id, tuple(segment)))

    def distribution(self, ad_id: str, segment: Segment) -> np.ndarray | None:
        entry = self.get(ad_id, segment)
        return None if entry is None else entry.probabilities

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[Tuple[str, Segment, np.ndarray]]:
        for (ad_id, segment), entry in self.entries.items():
            yield ad_id, segment, entry.probabilities

    def records(self) -> Iterator[dict]:
        yield {"record": "header", "format": TABLE_FORMAT, "model_version": self.model_version, **self.params}
        for ad_id, segment, probs in self:
            yield {
                "record": "entry",
                "ad_id": ad_id,
                "segment": list(segment),
                "combinations": [list(c) for c in self.combinations[ad_id]],
                "probabilities": probs.tolist(),
            }

    def save(self, path: str | Path) -> Path:
        path = write_jsonl(path, self.records())
        logger.info(f"Saved distribution table ({len(self)} entries, model v{self.model_version}) to {path}")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "DistributionTable":
        table = None
        for record in read_jsonl(path):
            if record.get("record") == "header":
                if record.get("format") != TABLE_FORMAT:
                    raise StructuralError(f"{path}: not a distribution table")
                params = {k: v for k, v in record.items() if k not in ("record", "format", "model_version")}
                table = cls(model_version=record.get("model_version", 0), params=params)
                continue
            if table is None:
                raise StructuralError(f"{path}: entry before header")
            table.set(
                record["ad_id"],
                tuple(record["segment"]),
                [tuple(c) for c in record["combinations"]],
                np.asarray(record["probabilities"], dtype=float),
            )
        if table is None:
            raise StructuralError(f"{path}: empty table file")
        return table


def combination_vectors(model: ModelState, ad: DcoAd, combinations: Sequence[Combination]) -> np.ndarray:
    """N x D ad vectors: standard features plus each combination's assets feature."""
    standard = model.build_ad_vector(ad.features(), create=False)
    rows = []
    for combination in combinations:
        _, values, weights = assets_feature(combination)
        vectors = [model.weights((ASSETS_FEATURE, v), create=False) for v in values]
        rows.append(standard + aggregate_multivalue(vectors, weights))
    return np.vstack(rows)


def generate_table(
    model: ModelState,
    ads: Sequence[DcoAd],
    segment_domains: Sequence[Sequence[str]],
    r_ds: float,
    beta: float,
    lambda_mix: float,
    lambda_mode: str = "total",
    min_conversions: int = 0,
    min_prediction: float = 0.0,
) -> DistributionTable:
    """Distributions for every (DCO ad, segment) pair from a model snapshot.

    Feature values missing from the model are cold-started read-only. Ads with fewer
    than min_conversions trained conversions get uniform distributions.
    """
    segments = enumerate_segments(segment_domains)
    user_vecs = np.vstack([model.build_user_vector(list(seg), create=False) for seg in segments])
    table = DistributionTable(
        model_version=model.version,
        params={"beta": beta, "lambda_mix": lambda_mix, "lambda_mode": lambda_mode, "r_ds": r_ds},
    )

    uniform_ads = 0
    for ad in ads:
        combinations = enumerate_combinations(ad)
        n = len(combinations)
        lam = effective_lambda(lambda_mix, lambda_mode, n)
        if model.ad_conversions.get(ad.ad_id, 0) < min_conversions:
            uniform_ads += 1
            for segment in segments:
                table.set(ad.ad_id, segment, combinations, uniform_distribution(n))
            continue

        raw = model.predict_matrix(user_vecs, combination_vectors(model, ad, combinations))
        corrected = correct_predictions(raw, r_ds)
        for segment, preds in zip(segments, corrected):
            table.set(ad.ad_id, segment, combinations, softmax_distribution(preds, beta, lam, min_prediction))

    logger.info(
        f"P2D: {len(table)} distributions for {len(ads)} DCO ads x {len(segments)} segments "
        f"(model v{model.version}, {uniform_ads} ads below min conversions)"
    )
    return table


class P2DGenerator:
    """Config-bound P2D table generation."""

    def __init__(self, config):
        self.config = config
        self.segment_domains = config.segments.key_domains()
        self.r_ds = config.training.downsample_factor
        self.p2d = config.p2d

    def generate(self, model: ModelState, catalog: Catalog) -> DistributionTable:
        return generate_table(
            model,
            catalog.dco_ads(),
            self.segment_domains,
            r_ds=self.r_ds,
            beta=self.p2d.beta,
            lambda_mix=self.p2d.lambda_mix,
            lambda_mode=self.p2d.lambda_mode,
            min_conversions=self.p2d.min_conversions,
            min_prediction=self.p2d.min_prediction,
        )
