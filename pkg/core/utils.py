"""Utility functions for seeding, numerics, and line-delimited files."""

import hashlib
import json
import math
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

UNKNOWN = "unknown"


def safe_makedirs(path: str | Path) -> None:
    """Create directory if it doesn't exist."""
    Path(path).mkdir(parents=True, exist_ok=True)


def stable_hash(*parts: object) -> int:
    """64-bit hash of the parts' string forms, stable across processes."""
    digest = hashlib.blake2b(
        "\x1f".join(str(p) for p in parts).encode("utf-8"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little")


def keyed_rng(seed: int, *parts: object) -> np.random.Generator:
    """Generator determined only by (seed, parts)."""
    return np.random.default_rng([seed & 0xFFFFFFFF, stable_hash(*parts)])


def sigmoid(x: float) -> float:
    """Numerically stable logistic function."""
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    """Vectorized logistic function."""
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    z = np.exp(x[~pos])
    out[~pos] = z / (1.0 + z)
    return out


def write_jsonl(path: str | Path, records: Iterable[dict]) -> Path:
    """Write records as one JSON object per line (keys sorted)."""
    path = Path(path)
    safe_makedirs(path.parent)
    with open(path, "w") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True))
            f.write("\n")
    return path


def read_jsonl(path: str | Path) -> Iterator[dict]:
    """Yield records from a line-delimited JSON file, skipping blank lines."""
    with open(path, "r") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{line_no}: invalid record: {e}") from e
