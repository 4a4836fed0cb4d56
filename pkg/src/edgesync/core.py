"""Shared domain types.

Every type validates its invariants at construction and is immutable
afterwards. Vectors are stored as tuples of Python floats (``Sample``,
``InferenceOutput``) or as read-only float64 arrays (``ModelParams``) so
instances can be shared between edge and cloud copies without copying.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np


class EdgeSyncError(Exception):
    """Base class for all errors raised by this package."""


class InvariantError(EdgeSyncError, ValueError):
    """A value violates the invariants of the type being constructed."""


class NonFiniteError(InvariantError):
    pass


class NegativeEntryError(InvariantError):
    pass


class ZeroSumError(InvariantError):
    pass


class DimensionMismatchError(InvariantError):
    pass


PROB_SUM_TOL = 1e-9


def _finite_tuple(values: Sequence[float], what: str) -> tuple[float, ...]:
    out = tuple(float(v) for v in values)
    if not all(math.isfinite(v) for v in out):
        raise NonFiniteError(f"{what} contains non-finite entries")
    return out


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Sample:
    edge_id: str
    seq: int
    timestamp: float
    features: tuple[float, ...]
    true_class: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "features", _finite_tuple(self.features, "features"))
        if not self.features:
            raise InvariantError("features must be non-empty")
        if self.seq < 0:
            raise InvariantError("seq must be non-negative")
        if not math.isfinite(self.timestamp) or self.timestamp < 0:
            raise InvariantError("timestamp must be finite and non-negative")
        if self.true_class < 0:
            raise InvariantError("true_class must be a class index")

    @property
    def feature_dim(self) -> int:
        return len(self.features)

    def to_dict(self) -> dict[str, Any]:
        return {
            "edge_id": self.edge_id,
            "seq": self.seq,
            "timestamp": self.timestamp,
            "features": list(self.features),
            "true_class": self.true_class,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Sample":
        return cls(d["edge_id"], int(d["seq"]), float(d["timestamp"]),
                   tuple(d["features"]), int(d["true_class"]))


@dataclass(frozen=True)
class InferenceOutput:
    probs: tuple[float, ...]
    predicted: int

    def __post_init__(self) -> None:
        probs = _finite_tuple(self.probs, "probs")
        object.__setattr__(self, "probs", probs)
        if not probs:
            raise InvariantError("probs must be non-empty")
        if any(p < 0.0 or p > 1.0 for p in probs):
            raise InvariantError("probs entries must lie in [0, 1]")
        if abs(math.fsum(probs) - 1.0) > PROB_SUM_TOL:
            raise InvariantError("probs must sum to 1")
        if self.predicted != argmax_lowest(probs):
            raise InvariantError("predicted must be the lowest-index argmax of probs")

    @property
    def num_classes(self) -> int:
        return len(self.probs)

    def to_dict(self) -> dict[str, Any]:
        return {"probs": list(self.probs), "predicted": self.predicted}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "InferenceOutput":
        return cls(tuple(d["probs"]), int(d["predicted"]))


def argmax_lowest(values: Sequence[float]) -> int:
    """Index of the maximum, lowest index on ties."""
    best = 0
    for i, v in enumerate(values):
        if v > values[best]:
            best = i
    return best


def validate_probs(v: Sequence[float]) -> InferenceOutput:
    """Normalise a non-negative score vector into an :class:`InferenceOutput`.

    Raises
    ------
    NonFiniteError, NegativeEntryError, ZeroSumError
    """
    vals = list(v)
    if not vals:
        raise InvariantError("probability vector must be non-empty")
    if not all(math.isfinite(x) for x in vals):
        raise NonFiniteError("probability vector has non-finite entries")
    if any(x < 0 for x in vals):
        raise NegativeEntryError("probability vector has negative entries")
    total = math.fsum(vals)
    if total <= 0.0:
        raise ZeroSumError("probability vector sums to zero")
    probs = tuple(x / total for x in vals)
    return InferenceOutput(probs, argmax_lowest(probs))


@dataclass(frozen=True)
class FilterConfig:
    """Weights and window settings for edge-side sample filtering.

    ``decay_toward_past=True`` scores recent samples higher; ``False`` uses
    the literal sign, which favours older samples.
    """

    alpha: float = 1.0
    beta: float = 1.0
    keep_fraction: float = 0.7
    window_seconds: float = 100.0
    decay_toward_past: bool = True

    def __post_init__(self) -> None:
        if not (math.isfinite(self.alpha) and self.alpha >= 0):
            raise InvariantError("alpha must be finite and non-negative")
        if not (math.isfinite(self.beta) and self.beta >= 0):
            raise InvariantError("beta must be finite and non-negative")
        if not (0.0 < self.keep_fraction <= 1.0):
            raise InvariantError("keep_fraction must lie in (0, 1]")
        if not (math.isfinite(self.window_seconds) and self.window_seconds > 0):
            raise InvariantError("window_seconds must be positive")

    def to_dict(self) -> dict[str, Any]:
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "keep_fraction": self.keep_fraction,
            "window_seconds": self.window_seconds,
            "decay_toward_past": self.decay_toward_past,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "FilterConfig":
        return cls(**d)


@dataclass(frozen=True)
class ScoredSample:
    sample: Sample
    output: InferenceOutput
    adaptability: float
    timeliness: float
    quality: float

    def __post_init__(self) -> None:
        if not (self.adaptability >= 0 and math.isfinite(self.adaptability)):
            raise InvariantError("adaptability must be finite and non-negative")
        if not (0.0 < self.timeliness < 1.0):
            raise InvariantError("timeliness must lie in (0, 1)")
        if not math.isfinite(self.quality):
            raise NonFiniteError("quality must be finite")

    def check_quality(self, cfg: FilterConfig, tol: float = 1e-12) -> bool:
        expected = cfg.alpha * self.adaptability + cfg.beta * self.timeliness
        return abs(expected - self.quality) <= tol

    def to_dict(self) -> dict[str, Any]:
        return {
            "sample": self.sample.to_dict(),
            "output": self.output.to_dict(),
            "adaptability": self.adaptability,
            "timeliness": self.timeliness,
            "quality": self.quality,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ScoredSample":
        return cls(Sample.from_dict(d["sample"]), InferenceOutput.from_dict(d["output"]),
                   d["adaptability"], d["timeliness"], d["quality"])


@dataclass(frozen=True)
class HyperParams:
    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self) -> None:
        for name in ("learning_rate", "momentum", "weight_decay"):
            if not math.isfinite(getattr(self, name)):
                raise NonFiniteError(f"{name} must be finite")
        if self.learning_rate <= 0:
            raise InvariantError("learning_rate must be positive")
        if not (0.0 <= self.momentum < 1.0):
            raise InvariantError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise InvariantError("weight_decay must be non-negative")

    def to_dict(self) -> dict[str, Any]:
        return {"learning_rate": self.learning_rate, "momentum": self.momentum,
                "weight_decay": self.weight_decay}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "HyperParams":
        return cls(float(d["learning_rate"]), float(d["momentum"]), float(d["weight_decay"]))


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Frozen backbone projection plus trainable softmax head.

    ``trainable`` has shape ``(C, hidden_dim + 1)``; the last column is the
    bias. Both arrays are read-only.
    """

    frozen: np.ndarray
    trainable: np.ndarray
    version: int = 0

    def __post_init__(self) -> None:
        frozen = _readonly(self.frozen)
        trainable = _readonly(self.trainable)
        if frozen.ndim != 2 or trainable.ndim != 2:
            raise InvariantError("frozen and trainable must be matrices")
        if trainable.shape[1] != frozen.shape[0] + 1:
            raise DimensionMismatchError(
                f"trainable has {trainable.shape[1]} columns, expected hidden_dim + 1 = "
                f"{frozen.shape[0] + 1}")
        if not (np.all(np.isfinite(frozen)) and np.all(np.isfinite(trainable))):
            raise NonFiniteError("model parameters must be finite")
        if self.version < 0:
            raise InvariantError("version must be non-negative")
        object.__setattr__(self, "frozen", frozen)
        object.__setattr__(self, "trainable", trainable)

    @property
    def feature_dim(self) -> int:
        return self.frozen.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.frozen.shape[0]

    @property
    def num_classes(self) -> int:
        return self.trainable.shape[0]

    def frozen_checksum(self) -> bytes:
        return frozen_checksum(self.frozen)

    def with_trainable(self, values: np.ndarray | Sequence[float]) -> "ModelParams":
        """Next version with the trainable partition replaced."""
        arr = np.asarray(values, dtype=np.float64).reshape(self.trainable.shape)
        return ModelParams(self.frozen, arr, self.version + 1)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModelParams):
            return NotImplemented
        return (self.version == other.version
                and self.frozen.shape == other.frozen.shape
                and self.trainable.shape == other.trainable.shape
                and self.frozen.tobytes() == other.frozen.tobytes()
                and self.trainable.tobytes() == other.trainable.tobytes())

    __hash__ = None  # type: ignore[assignment]

    def to_dict(self) -> dict[str, Any]:
        return {"frozen": self.frozen.tolist(), "trainable": self.trainable.tolist(),
                "version": self.version}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelParams":
        return cls(np.array(d["frozen"], dtype=np.float64),
                   np.array(d["trainable"], dtype=np.float64), int(d["version"]))


def frozen_checksum(frozen: np.ndarray) -> bytes:
    """SHA-256 over the canonical little-endian float64 encoding."""
    a = np.ascontiguousarray(frozen, dtype="<f8")
    h = hashlib.sha256()
    h.update(np.asarray(a.shape, dtype="<u4").tobytes())
    h.update(a.tobytes())
    return h.digest()


@dataclass(frozen=True)
class AccuracyRecord:
    correct: int
    seq: int

    def __post_init__(self) -> None:
        if self.correct not in (0, 1) or isinstance(self.correct, float):
            raise InvariantError("correct must be 0 or 1")

    def to_dict(self) -> dict[str, Any]:
        return {"correct": self.correct, "seq": self.seq}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "AccuracyRecord":
        return cls(int(d["correct"]), int(d["seq"]))


__all__ = [
    "AccuracyRecord", "DimensionMismatchError", "EdgeSyncError", "FilterConfig",
    "HyperParams", "InferenceOutput", "InvariantError", "ModelParams", "NegativeEntryError",
    "NonFiniteError", "PROB_SUM_TOL", "Sample", "ScoredSample", "ZeroSumError",
    "argmax_lowest", "frozen_checksum", "validate_probs",
]
