"""Latent-factor event prediction model with one-pass AdaGrad training.

User vectors are built from K per-feature vectors of dimension d = (K-1)*o + s. Each
feature vector is spread over the D = C(K,2)*o + K*s user slots (its o-blocks into the
pair slots it takes part in, its s-block into its own slot, 1 elsewhere) and the K spread
vectors are multiplied entrywise. Slot layout: the C(K,2) pair blocks in lexicographic
(i, j) order, then the K own blocks in feature order. Ad vectors are sums of D-dimensional
feature vectors; multi-value features contribute (1/sqrt(n)) * sum(w_i * v_i).
"""

import copy
import logging
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from core.errors import DcoError, EmptyFeatureError, StructuralError
from core.utils import UNKNOWN, keyed_rng, sigmoid, sigmoid_array

logger = logging.getLogger(__name__)

FeatureKey = Tuple[str, str]
# (feature name, values, weights)
AdFeature = Tuple[str, Sequence[str], Sequence[float]]

LOGLOSS_EPS = 1e-12
_PRED_LOW = float(np.finfo(float).tiny)
_PRED_HIGH = float(np.nextafter(1.0, 0.0))


@dataclass(frozen=True)
class StructureParams:
    """Structural hyper-parameters: user features (K of them), o, s and the optimizer."""

    user_features: Tuple[str, ...]
    o: int
    s: int
    eta: float = 0.01
    lambda_reg: float = 0.0
    step_size: float = 0.05
    adagrad_epsilon: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "user_features", tuple(self.user_features))
        if self.K < 1:
            raise StructuralError("at least one user feature is required")
        if len(set(self.user_features)) != self.K:
            raise StructuralError("user feature names must be unique")
        if self.o < 0 or self.s < 0:
            raise StructuralError("o and s must be non-negative")
        if self.D <= 0 or self.d <= 0:
            raise StructuralError(f"degenerate structure: d={self.d}, D={self.D}")
        if self.eta < 0 or self.lambda_reg < 0:
            raise StructuralError("eta and lambda_reg must be non-negative")
        if self.step_size <= 0 or self.adagrad_epsilon <= 0:
            raise StructuralError("step_size and adagrad_epsilon must be positive")

    @property
    def K(self) -> int:
        return len(self.user_features)

    @property
    def d(self) -> int:
        return (self.K - 1) * self.o + self.s

    @property
    def D(self) -> int:
        return math.comb(self.K, 2) * self.o + self.K * self.s

    @classmethod
    def from_config(cls, structure, segment_keys: Sequence[str]) -> "StructureParams":
        """Build from a StructureConfig and the segment keys."""
        return cls(
            user_features=tuple(segment_keys),
            o=structure.overlap_size,
            s=structure.own_size,
            eta=structure.eta,
            lambda_reg=structure.lambda_reg,
            step_size=structure.step_size,
            adagrad_epsilon=structure.adagrad_epsilon,
        )

    def to_dict(self) -> dict:
        return {
            "user_features": list(self.user_features),
            "K": self.K,
            "o": self.o,
            "s": self.s,
            "d": self.d,
            "D": self.D,
            "eta": self.eta,
            "lambda_reg": self.lambda_reg,
            "step_size": self.step_size,
            "adagrad_epsilon": self.adagrad_epsilon,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StructureParams":
        params = cls(
            user_features=tuple(data["user_features"]),
            o=int(data["o"]),
            s=int(data["s"]),
            eta=float(data["eta"]),
            lambda_reg=float(data["lambda_reg"]),
            step_size=float(data["step_size"]),
            adagrad_epsilon=float(data["adagrad_epsilon"]),
        )
        for name in ("K", "d", "D"):
            if name in data and int(data[name]) != getattr(params, name):
                raise StructuralError(f"{name}={data[name]} inconsistent with (K, o, s)")
        return params


def user_slot_positions(K: int, o: int, s: int) -> List[np.ndarray]:
    """For each user feature, the D-indices its d entries are spread to.

    Feature k's vector holds one o-block per partner j != k (ascending j), then its s-block.
    """
    pairs = list(combinations(range(K), 2))
    pair_index = {pair: i for i, pair in enumerate(pairs)}
    own_offset = len(pairs) * o
    positions = []
    for k in range(K):
        idx = []
        for j in range(K):
            if j == k:
                continue
            start = pair_index[(min(j, k), max(j, k))] * o
            idx.extend(range(start, start + o))
        start = own_offset + k * s
        idx.extend(range(start, start + s))
        positions.append(np.asarray(idx, dtype=np.intp))
    return positions


def aggregate_multivalue(vectors: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """(1/sqrt(n)) * sum_i w_i * v_i."""
    n = len(vectors)
    if n == 0:
        raise EmptyFeatureError("multi-value feature has no values")
    if len(weights) != n:
        raise StructuralError(f"{n} vectors but {len(weights)} weights")
    total = np.zeros_like(np.asarray(vectors[0], dtype=float))
    for v, w in zip(vectors, weights):
        total = total + float(w) * np.asarray(v, dtype=float)
    return total / math.sqrt(n)


def logloss(pred: float, label: float) -> float:
    """Data term of the logistic loss; pred is clamped to [eps, 1-eps]."""
    p = min(max(pred, LOGLOSS_EPS), 1.0 - LOGLOSS_EPS)
    return -(1.0 - label) * math.log(1.0 - p) - label * math.log(p)


@dataclass
class FeatureValueVector:
    """Learned vector of one feature value plus its AdaGrad accumulator."""

    key: FeatureKey
    weights: np.ndarray
    grad_accum: np.ndarray = field(default=None)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.grad_accum is None:
            self.grad_accum = np.zeros_like(self.weights)
        self.grad_accum = np.asarray(self.grad_accum, dtype=float)
        if self.weights.shape != self.grad_accum.shape or self.weights.ndim != 1:
            raise StructuralError(f"{self.key}: weights and grad_accum lengths differ")


@dataclass
class _Forward:
    """Intermediate values of one (user, ad) evaluation."""

    user_keys: List[FeatureKey]
    expanded: np.ndarray  # K x D
    user_vec: np.ndarray
    ad_terms: List[Tuple[FeatureKey, float]]
    ad_vec: np.ndarray
    score: float


class ModelState:
    """Bias plus per-feature-value vectors; single writer, frozen snapshots for readers."""

    def __init__(
        self,
        structure: StructureParams,
        bias: float = 0.0,
        rng_seed: int = 0,
        vectors: Dict[FeatureKey, FeatureValueVector] | None = None,
        bias_accum: float = 0.0,
        version: int = 0,
    ):
        self.structure = structure
        self.bias = float(bias)
        self.bias_accum = float(bias_accum)
        self.rng_seed = int(rng_seed)
        self.vectors: Dict[FeatureKey, FeatureValueVector] = dict(vectors or {})
        self.version = int(version)
        self.ad_conversions: Dict[str, int] = {}
        self.diagnostics: Dict[str, int] = {"trained_events": 0, "skipped_events": 0, "cold_starts": 0}
        self.frozen = False
        self._positions = user_slot_positions(structure.K, structure.o, structure.s)
        self._feature_index = {name: i for i, name in enumerate(structure.user_features)}

    @classmethod
    def from_config(cls, config) -> "ModelState":
        """Fresh model from an ExperimentConfig."""
        structure = StructureParams.from_config(config.structure, config.segments.keys)
        return cls(structure, bias=config.structure.initial_bias, rng_seed=config.structure.seed)

    # -- vectors -----------------------------------------------------------------

    def is_user_feature(self, name: str) -> bool:
        return name in self._feature_index

    def vector_length(self, key: FeatureKey) -> int:
        return self.structure.d if self.is_user_feature(key[0]) else self.structure.D

    def cold_start_vector(self, key: FeatureKey, length: int) -> FeatureValueVector:
        """Gaussian N(0, eta) vector with zero accumulator, determined by (rng_seed, key)."""
        if key in self.vectors:
            raise StructuralError(f"{key} already has a vector")
        expected = self.vector_length(key)
        if length != expected:
            raise StructuralError(f"{key}: length {length}, structure requires {expected}")
        rng = keyed_rng(self.rng_seed, key[0], key[1])
        weights = rng.normal(0.0, math.sqrt(self.structure.eta), size=length)
        return FeatureValueVector(key=key, weights=weights)

    def weights(self, key: FeatureKey, create: bool = True) -> np.ndarray:
        """Weights of a feature value, cold-starting it if absent.

        Frozen models and create=False return a fresh vector without storing it.
        """
        entry = self.vectors.get(key)
        if entry is not None:
            return entry.weights
        fresh = self.cold_start_vector(key, self.vector_length(key))
        if create and not self.frozen:
            self.vectors[key] = fresh
            self.diagnostics["cold_starts"] += 1
        return fresh.weights

    # -- construction --------------------------------------------------------------

    def user_keys(self, user: Mapping[str, str] | Sequence[str]) -> List[FeatureKey]:
        """Resolve user features to K keys in feature order; absent values map to unknown."""
        names = self.structure.user_features
        if isinstance(user, Mapping):
            for name in user:
                if name not in self._feature_index:
                    raise StructuralError(f"unknown user feature '{name}'")
            values = [user.get(name) or UNKNOWN for name in names]
        else:
            values = list(user)
            if len(values) != len(names):
                raise StructuralError(f"expected {len(names)} user values, got {len(values)}")
            values = [v or UNKNOWN for v in values]
        return [(name, str(value)) for name, value in zip(names, values)]

    def expand_user_vectors(self, keys: Sequence[FeatureKey], create: bool = True) -> np.ndarray:
        """K x D matrix of spread feature vectors (1 where a feature has no entry)."""
        expanded = np.ones((self.structure.K, self.structure.D))
        for k, key in enumerate(keys):
            expanded[k, self._positions[k]] = self.weights(key, create=create)
        return expanded

    def build_user_vector(self, user: Mapping[str, str] | Sequence[str], create: bool = True) -> np.ndarray:
        """D-dimensional user vector: entrywise product of the spread feature vectors."""
        keys = self.user_keys(user)
        return np.prod(self.expand_user_vectors(keys, create=create), axis=0)

    def ad_terms(self, ad_features: Sequence[AdFeature]) -> List[Tuple[FeatureKey, float]]:
        """Flatten ad features into (key, coefficient) pairs, coefficient = w / sqrt(n)."""
        terms = []
        for name, values, weights in ad_features:
            if self.is_user_feature(name):
                raise StructuralError(f"'{name}' is a user feature, not an ad feature")
            n = len(values)
            if n == 0:
                raise EmptyFeatureError(f"ad feature '{name}' has no values")
            if len(weights) != n:
                raise StructuralError(f"ad feature '{name}': {n} values but {len(weights)} weights")
            scale = 1.0 / math.sqrt(n)
            terms.extend(((name, str(v)), float(w) * scale) for v, w in zip(values, weights))
        return terms

    def build_ad_vector(self, ad_features: Sequence[AdFeature], create: bool = True) -> np.ndarray:
        """Sum of the ad features' aggregated D-vectors."""
        total = np.zeros(self.structure.D)
        for name, values, weights in ad_features:
            if self.is_user_feature(name):
                raise StructuralError(f"'{name}' is a user feature, not an ad feature")
            vectors = [self.weights((name, str(v)), create=create) for v in values]
            total += aggregate_multivalue(vectors, weights)
        return total

    def predict(self, user_vec: np.ndarray, ad_vec: np.ndarray) -> float:
        """sigmoid(b + user_vec . ad_vec), kept strictly inside (0, 1)."""
        D = self.structure.D
        if len(user_vec) != D or len(ad_vec) != D:
            raise StructuralError(f"vectors must have length {D}")
        p = sigmoid(self.bias + float(np.dot(user_vec, ad_vec)))
        return min(max(p, _PRED_LOW), _PRED_HIGH)

    def predict_matrix(self, user_vecs: np.ndarray, ad_vecs: np.ndarray) -> np.ndarray:
        """Predictions for every (user row, ad row) pair."""
        scores = self.bias + user_vecs @ ad_vecs.T
        return np.clip(sigmoid_array(scores), _PRED_LOW, _PRED_HIGH)

    # -- training ------------------------------------------------------------------

    def _forward(self, user, ad_features, create: bool = True) -> _Forward:
        keys = self.user_keys(user)
        expanded = self.expand_user_vectors(keys, create=create)
        user_vec = np.prod(expanded, axis=0)
        terms = self.ad_terms(ad_features)
        ad_vec = np.zeros(self.structure.D)
        for key, coef in terms:
            ad_vec += coef * self.weights(key, create=create)
        score = self.bias + float(np.dot(user_vec, ad_vec))
        return _Forward(keys, expanded, user_vec, terms, ad_vec, score)

    def event_gradients(
        self, user, ad_features: Sequence[AdFeature], label: float
    ) -> Tuple[float, float, Dict[FeatureKey, np.ndarray]]:
        """Prediction, bias gradient and per-vector gradients of LogLoss + L2.

        L2 covers only the vectors the event touches; the bias is not regularized.
        """
        with np.errstate(over="ignore", invalid="ignore"):
            fwd = self._forward(user, ad_features)
            pred = sigmoid(fwd.score) if math.isfinite(fwd.score) else float("nan")
            residual = pred - label
            grads: Dict[FeatureKey, np.ndarray] = {}

            for key, coef in fwd.ad_terms:
                g = residual * coef * fwd.user_vec
                grads[key] = grads[key] + g if key in grads else g

            for k, key in enumerate(fwd.user_keys):
                others = np.prod(np.delete(fwd.expanded, k, axis=0), axis=0)
                g = residual * (fwd.ad_vec * others)[self._positions[k]]
                grads[key] = grads[key] + g if key in grads else g

            lam = self.structure.lambda_reg
            if lam > 0:
                for key in grads:
                    grads[key] = grads[key] + lam * self.vectors[key].weights

        return pred, residual, grads

    def event_loss(self, user, ad_features: Sequence[AdFeature], label: float) -> float:
        """LogLoss of the event plus (lambda/2) * squared norm of the touched vectors."""
        fwd = self._forward(user, ad_features)
        loss = logloss(sigmoid(fwd.score), label)
        lam = self.structure.lambda_reg
        if lam > 0:
            touched = set(fwd.user_keys) | {key for key, _ in fwd.ad_terms}
            loss += 0.5 * lam * sum(float(np.dot(self.vectors[k].weights, self.vectors[k].weights)) for k in touched)
        return loss

    def train_event(self, user, ad_features: Sequence[AdFeature], label: float) -> bool:
        """One AdaGrad step on a single event. Returns False if the event was skipped."""
        if self.frozen:
            raise DcoError("model snapshot is read-only")
        if not 0.0 <= label <= 1.0:
            raise ValueError(f"label must be in [0, 1], got {label}")

        pred, bias_grad, grads = self.event_gradients(user, ad_features, label)
        finite = math.isfinite(pred) and all(np.all(np.isfinite(g)) for g in grads.values())
        if not finite:
            self.diagnostics["skipped_events"] += 1
            logger.debug("Skipped event with non-finite gradient")
            return False

        step = self.structure.step_size
        eps = self.structure.adagrad_epsilon
        self.bias_accum += bias_grad * bias_grad
        self.bias -= step * bias_grad / math.sqrt(eps + self.bias_accum)
        for key, g in grads.items():
            entry = self.vectors[key]
            entry.grad_accum += g * g
            entry.weights -= step * g / np.sqrt(eps + entry.grad_accum)

        self.diagnostics["trained_events"] += 1
        return True

    def record_conversion(self, ad_id: str) -> None:
        """Count a trained positive for an ad (used by P2D's low-evidence rule)."""
        self.ad_conversions[ad_id] = self.ad_conversions.get(ad_id, 0) + 1

    # -- snapshots -----------------------------------------------------------------

    def effective_step(self, key: FeatureKey) -> np.ndarray:
        """Current per-coordinate AdaGrad step sizes of a vector."""
        entry = self.vectors[key]
        return self.structure.step_size / np.sqrt(self.structure.adagrad_epsilon + entry.grad_accum)

    def snapshot(self) -> "ModelState":
        """Frozen deep copy safe to share with readers."""
        snap = copy.deepcopy(self)
        snap.frozen = True
        for entry in snap.vectors.values():
            entry.weights.setflags(write=False)
            entry.grad_accum.setflags(write=False)
        return snap

    def __deepcopy__(self, memo):
        clone = ModelState(
            self.structure,
            bias=self.bias,
            rng_seed=self.rng_seed,
            bias_accum=self.bias_accum,
            version=self.version,
        )
        clone.vectors = {
            key: FeatureValueVector(key, entry.weights.copy(), entry.grad_accum.copy())
            for key, entry in self.vectors.items()
        }
        clone.ad_conversions = dict(self.ad_conversions)
        clone.diagnostics = dict(self.diagnostics)
        clone.frozen = self.frozen
        return clone
