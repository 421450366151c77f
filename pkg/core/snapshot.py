"""Model snapshot files: a header record followed by one record per feature-value vector.

Header fields: record="header", format="offset-model", format_version, model_version,
structure (user_features, K, o, s, d, D, eta, lambda_reg, step_size, adagrad_epsilon),
bias, bias_accum, rng_seed, ad_conversions, diagnostics.
Vector fields: record="vector", feature, value, weights, grad_accum.

Floats are written with Python's shortest round-trip repr, so load(save(m)) is bit-exact.
"""

import logging
from pathlib import Path

import numpy as np

from core.errors import StructuralError
from core.offset import FeatureValueVector, ModelState, StructureParams
from core.utils import read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

SNAPSHOT_FORMAT = "offset-model"
FORMAT_VERSION = 1


def snapshot_records(model: ModelState):
    """Yield the header and vector records of a model."""
    yield {
        "record": "header",
        "format": SNAPSHOT_FORMAT,
        "format_version": FORMAT_VERSION,
        "model_version": model.version,
        "structure": model.structure.to_dict(),
        "bias": model.bias,
        "bias_accum": model.bias_accum,
        "rng_seed": model.rng_seed,
        "ad_conversions": dict(sorted(model.ad_conversions.items())),
        "diagnostics": dict(sorted(model.diagnostics.items())),
    }
    for key in sorted(model.vectors):
        entry = model.vectors[key]
        yield {
            "record": "vector",
            "feature": key[0],
            "value": key[1],
            "weights": entry.weights.tolist(),
            "grad_accum": entry.grad_accum.tolist(),
        }


def save_model(model: ModelState, path: str | Path) -> Path:
    """Write a model snapshot."""
    path = write_jsonl(path, snapshot_records(model))
    logger.info(f"Saved model v{model.version} ({len(model.vectors)} vectors) to {path}")
    return path


def load_model(path: str | Path, frozen: bool = True) -> ModelState:
    """Read a model snapshot; returns a frozen model unless frozen=False."""
    records = read_jsonl(path)
    header = next(records, None)
    if header is None or header.get("record") != "header" or header.get("format") != SNAPSHOT_FORMAT:
        raise StructuralError(f"{path}: not a model snapshot")
    if int(header.get("format_version", 0)) > FORMAT_VERSION:
        raise StructuralError(f"{path}: unsupported format_version {header['format_version']}")

    structure = StructureParams.from_dict(header["structure"])
    model = ModelState(
        structure,
        bias=header["bias"],
        rng_seed=header["rng_seed"],
        bias_accum=header.get("bias_accum", 0.0),
        version=header.get("model_version", 0),
    )
    model.ad_conversions = {str(k): int(v) for k, v in header.get("ad_conversions", {}).items()}
    model.diagnostics.update({str(k): int(v) for k, v in header.get("diagnostics", {}).items()})

    for record in records:
        if record.get("record") != "vector":
            continue
        key = (record["feature"], record["value"])
        entry = FeatureValueVector(
            key=key,
            weights=np.asarray(record["weights"], dtype=float),
            grad_accum=np.asarray(record["grad_accum"], dtype=float),
        )
        expected = model.vector_length(key)
        if len(entry.weights) != expected:
            raise StructuralError(f"{path}: {key} has length {len(entry.weights)}, expected {expected}")
        model.vectors[key] = entry

    logger.info(f"Loaded model v{model.version} ({len(model.vectors)} vectors) from {path}")
    return model.snapshot() if frozen else model
