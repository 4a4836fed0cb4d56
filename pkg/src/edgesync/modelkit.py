"""Desk-scale stand-ins for the edge student, the cloud teacher and video.

The student is a frozen random ReLU projection followed by a trainable
softmax-linear head; only the head is ever updated. Streams are Gaussian
class clusters whose means and class priors change at scene boundaries,
which is what "data drift" means here.
"""

from __future__ import annotations

import copy
import math
import zlib
from dataclasses import dataclass
from typing import Any, Iterator, Sequence

import numpy as np

from .core import (DimensionMismatchError, EdgeSyncError, HyperParams, InferenceOutput,
                   InvariantError, ModelParams, Sample, argmax_lowest)

DEFAULT_FEATURE_DIM = 16
DEFAULT_HIDDEN_DIM = 32
DEFAULT_NUM_CLASSES = 6


class NonFiniteLossError(EdgeSyncError):
    """Training diverged under the given hyperparameters."""


# ---------------------------------------------------------------------------
# student


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def make_frozen_projection(feature_dim: int = DEFAULT_FEATURE_DIM,
                           hidden_dim: int = DEFAULT_HIDDEN_DIM, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((hidden_dim, feature_dim)) / math.sqrt(feature_dim)


class StudentModel:
    """Frozen projection + trainable softmax head, with SGD momentum state.

    The frozen matrix is shared read-only between copies; ``copy()`` only
    duplicates the head and the optimizer state.
    """

    def __init__(self, params: ModelParams, rng_seed: int = 0, batch_size: int = 32):
        self.frozen = params.frozen
        self.trainable = np.array(params.trainable, dtype=np.float64)
        self.version = params.version
        self.rng_seed = rng_seed
        self.batch_size = batch_size
        self._rng = np.random.default_rng(rng_seed)
        self._velocity = np.zeros_like(self.trainable)

    @classmethod
    def create(cls, feature_dim: int = DEFAULT_FEATURE_DIM, hidden_dim: int = DEFAULT_HIDDEN_DIM,
               num_classes: int = DEFAULT_NUM_CLASSES, seed: int = 0,
               frozen: np.ndarray | None = None, **kw) -> "StudentModel":
        if frozen is None:
            frozen = make_frozen_projection(feature_dim, hidden_dim, seed)
        trainable = np.zeros((num_classes, frozen.shape[0] + 1))
        return cls(ModelParams(frozen, trainable, 0), rng_seed=seed, **kw)

    # -- parameter access (the trainer's model-handle contract) -------------

    @property
    def params(self) -> ModelParams:
        return ModelParams(self.frozen, self.trainable, self.version)

    @property
    def num_classes(self) -> int:
        return self.trainable.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.frozen.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.frozen.shape[0]

    def get_trainable(self) -> np.ndarray:
        return self.trainable.copy()

    def set_trainable(self, values: np.ndarray | Sequence[float]) -> None:
        arr = np.asarray(values, dtype=np.float64).reshape(self.trainable.shape)
        self.trainable = arr.copy()

    def reset_optimizer(self) -> None:
        self._velocity = np.zeros_like(self.trainable)

    def copy(self) -> "StudentModel":
        other = StudentModel(self.params, self.rng_seed, self.batch_size)
        other._velocity = self._velocity.copy()
        other._rng = copy.deepcopy(self._rng)
        return other

    # -- forward / backward -------------------------------------------------

    def hidden(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.feature_dim:
            raise DimensionMismatchError(
                f"expected {self.feature_dim} features, got {X.shape[1]}")
        H = np.maximum(X @ self.frozen.T, 0.0)
        return np.hstack([H, np.ones((H.shape[0], 1))])

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return softmax(self.hidden(X) @ self.trainable.T)

    def predict(self, X: np.ndarray) -> np.ndarray:
        # np.argmax already breaks ties toward the lowest index
        return np.argmax(self.predict_proba(X), axis=1)

    def evaluate(self, X: np.ndarray, y: np.ndarray) -> float:
        y = np.asarray(y)
        if len(y) == 0:
            return 0.0
        return float(np.mean(self.predict(X) == y))

    def loss_and_grad(self, X: np.ndarray, y: np.ndarray, weight_decay: float = 0.0,
                      W: np.ndarray | None = None, H: np.ndarray | None = None
                      ) -> tuple[float, np.ndarray]:
        """Mean cross-entropy plus ``wd/2 * ||weights||^2`` (bias excluded)."""
        W = self.trainable if W is None else W
        H = self.hidden(X) if H is None else H
        y = np.asarray(y, dtype=np.int64)
        n = H.shape[0]
        logits = H @ W.T
        z = logits - logits.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(z).sum(axis=1))
        ce = float(np.mean(logsum - z[np.arange(n), y]))
        P = np.exp(z - logsum[:, None])
        P[np.arange(n), y] -= 1.0
        grad = P.T @ H / n
        if weight_decay:
            ce += 0.5 * weight_decay * float(np.sum(W[:, :-1] ** 2))
            grad[:, :-1] += weight_decay * W[:, :-1]
        return ce, grad

    def train_epoch(self, X: np.ndarray, y: np.ndarray, h: HyperParams) -> float:
        """One shuffled pass of mini-batch SGD with momentum and L2 decay.

        Returns the mean (pre-update) mini-batch loss.
        """
        y = np.asarray(y, dtype=np.int64)
        n = len(y)
        if n == 0:
            raise InvariantError("cannot train on an empty batch")
        H = self.hidden(X)
        order = self._rng.permutation(n)
        total = 0.0
        for start in range(0, n, self.batch_size):
            idx = order[start:start + self.batch_size]
            loss, grad = self.loss_and_grad(None, y[idx], h.weight_decay, H=H[idx])
            self._velocity = h.momentum * self._velocity + grad
            self.trainable = self.trainable - h.learning_rate * self._velocity
            total += loss * len(idx)
        mean_loss = total / n
        if not (math.isfinite(mean_loss) and np.all(np.isfinite(self.trainable))):
            raise NonFiniteLossError(f"training diverged with {h}")
        return mean_loss


def student_infer(model: StudentModel, features: Sequence[float]) -> InferenceOutput:
    probs = model.predict_proba(np.asarray(features, dtype=np.float64)[None, :])[0]
    return _to_output(probs)


def student_infer_batch(model: StudentModel, X: np.ndarray) -> list[InferenceOutput]:
    return [_to_output(p) for p in model.predict_proba(X)]


def _to_output(probs: np.ndarray) -> InferenceOutput:
    p = tuple(float(v) for v in probs)
    return InferenceOutput(p, argmax_lowest(p))


def student_train_epoch(model: StudentModel, X: np.ndarray, y: np.ndarray,
                        h: HyperParams) -> tuple[StudentModel, float]:
    loss = model.train_epoch(X, y, h)
    return model, loss


# ---------------------------------------------------------------------------
# teacher


@dataclass(frozen=True)
class Teacher:
    """Oracle labeller that flips a label with probability ``error_rate``.

    The flip decision depends only on ``(seed, edge_id, seq)`` so every
    strategy in a paired comparison sees the same labels.
    """

    num_classes: int = DEFAULT_NUM_CLASSES
    error_rate: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.error_rate <= 1.0:
            raise InvariantError("error_rate must lie in [0, 1]")

    def label(self, sample: Sample) -> int:
        if self.error_rate == 0.0:
            return sample.true_class
        rng = np.random.default_rng([self.seed, zlib.crc32(sample.edge_id.encode()), sample.seq])
        if rng.random() >= self.error_rate:
            return sample.true_class
        other = int(rng.integers(self.num_classes - 1))
        return other if other < sample.true_class else other + 1


def teacher_label(sample: Sample, teacher: Teacher | None = None) -> int:
    return (teacher or Teacher()).label(sample)


# ---------------------------------------------------------------------------
# workloads


@dataclass(frozen=True)
class SceneSpec:
    class_means: tuple[tuple[float, ...], ...]
    class_priors: tuple[float, ...]
    noise_scale: float
    start_time: float
    duration: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "class_means",
                           tuple(tuple(float(v) for v in m) for m in self.class_means))
        object.__setattr__(self, "class_priors", tuple(float(p) for p in self.class_priors))
        if len(self.class_means) != len(self.class_priors):
            raise InvariantError("one mean per class prior required")
        if abs(math.fsum(self.class_priors) - 1.0) > 1e-9 or min(self.class_priors) < 0:
            raise InvariantError("class_priors must be a probability vector")
        if not self.noise_scale > 0:
            raise InvariantError("noise_scale must be positive")
        if not self.duration > 0:
            raise InvariantError("duration must be positive")

    def to_dict(self) -> dict[str, Any]:
        return {"class_means": [list(m) for m in self.class_means],
                "class_priors": list(self.class_priors), "noise_scale": self.noise_scale,
                "start_time": self.start_time, "duration": self.duration}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SceneSpec":
        return cls(tuple(tuple(m) for m in d["class_means"]), tuple(d["class_priors"]),
                   float(d["noise_scale"]), float(d["start_time"]), float(d["duration"]))


@dataclass(frozen=True)
class WorkloadSpec:
    scenes: tuple[SceneSpec, ...]
    feature_dim: int = DEFAULT_FEATURE_DIM
    samples_per_second: float = 2.0
    total_seconds: float = 1000.0
    seed: int = 0
    edge_id: str = "edge-0"

    def __post_init__(self) -> None:
        object.__setattr__(self, "scenes", tuple(self.scenes))
        if not self.scenes:
            raise InvariantError("at least one scene required")
        if not self.samples_per_second > 0:
            raise InvariantError("samples_per_second must be positive")
        t = 0.0
        for s in self.scenes:
            if not math.isclose(s.start_time, t, abs_tol=1e-9):
                raise InvariantError("scenes must tile [0, total_seconds) without gaps")
            if any(len(m) != self.feature_dim for m in s.class_means):
                raise InvariantError("class mean dimension differs from feature_dim")
            t = s.start_time + s.duration
        if not math.isclose(t, self.total_seconds, abs_tol=1e-9):
            raise InvariantError("scenes must end at total_seconds")
        if len({len(s.class_priors) for s in self.scenes}) != 1:
            raise InvariantError("all scenes must share the class count")

    @property
    def num_classes(self) -> int:
        return len(self.scenes[0].class_priors)

    @property
    def num_samples(self) -> int:
        return int(math.floor(self.total_seconds * self.samples_per_second + 1e-9))

    def scene_index(self, t: float) -> int:
        for i, s in enumerate(self.scenes):
            if t < s.start_time + s.duration:
                return i
        return len(self.scenes) - 1

    def scene_boundaries(self) -> list[float]:
        return [s.start_time for s in self.scenes[1:]]

    def to_dict(self) -> dict[str, Any]:
        return {"scenes": [s.to_dict() for s in self.scenes], "feature_dim": self.feature_dim,
                "samples_per_second": self.samples_per_second,
                "total_seconds": self.total_seconds, "seed": self.seed, "edge_id": self.edge_id}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "WorkloadSpec":
        return cls(tuple(SceneSpec.from_dict(s) for s in d["scenes"]), int(d["feature_dim"]),
                   float(d["samples_per_second"]), float(d["total_seconds"]), int(d["seed"]),
                   d.get("edge_id", "edge-0"))


def generate_stream(spec: WorkloadSpec) -> Iterator[Sample]:
    """Deterministic sample stream for ``spec``; drift happens at scene edges."""
    rng = np.random.default_rng(spec.seed)
    means = [np.asarray(s.class_means) for s in spec.scenes]
    for i in range(spec.num_samples):
        t = i / spec.samples_per_second
        k = spec.scene_index(t)
        scene = spec.scenes[k]
        c = int(rng.choice(len(scene.class_priors), p=scene.class_priors))
        x = means[k][c] + scene.noise_scale * rng.standard_normal(spec.feature_dim)
        yield Sample(spec.edge_id, i, t, tuple(x.tolist()), c)


def stream_arrays(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    X = np.array([s.features for s in samples], dtype=np.float64)
    y = np.array([s.true_class for s in samples], dtype=np.int64)
    return X, y


@dataclass(frozen=True)
class SceneGenerator:
    """Compact recipe for random drifting workloads.

    Scene 0 draws class means from ``N(0, separation^2)``. Each later scene
    replaces a ``drift`` share of every mean with fresh noise, keeping the
    marginal spread of the means unchanged (``drift=0`` never moves,
    ``drift=1`` redraws). Class priors are redrawn per scene from a
    Dirichlet with ``prior_concentration``.
    """

    scene_durations: tuple[float, ...] = (250.0, 250.0, 250.0, 250.0)
    num_classes: int = DEFAULT_NUM_CLASSES
    feature_dim: int = DEFAULT_FEATURE_DIM
    separation: float = 1.0
    drift: float = 0.9
    noise_scale: float = 1.0
    prior_concentration: float = 2.0
    samples_per_second: float = 2.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.drift <= 1.0:
            raise InvariantError("drift must lie in [0, 1]")

    def build(self, seed: int, edge_id: str = "edge-0") -> WorkloadSpec:
        rng = np.random.default_rng([seed, 7919])
        means = self.separation * rng.standard_normal((self.num_classes, self.feature_dim))
        scenes = []
        t = 0.0
        for k, dur in enumerate(self.scene_durations):
            if k:
                fresh = self.separation * rng.standard_normal(means.shape)
                means = math.sqrt(1.0 - self.drift ** 2) * means + self.drift * fresh
            priors = rng.dirichlet(np.full(self.num_classes, self.prior_concentration))
            priors = priors / priors.sum()
            scenes.append(SceneSpec(tuple(map(tuple, means.tolist())), tuple(priors.tolist()),
                                    self.noise_scale, t, float(dur)))
            t += float(dur)
        return WorkloadSpec(tuple(scenes), self.feature_dim, self.samples_per_second, t,
                            seed, edge_id)

    def to_dict(self) -> dict[str, Any]:
        return {"scene_durations": list(self.scene_durations), "num_classes": self.num_classes,
                "feature_dim": self.feature_dim, "separation": self.separation,
                "drift": self.drift, "noise_scale": self.noise_scale,
                "prior_concentration": self.prior_concentration,
                "samples_per_second": self.samples_per_second}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SceneGenerator":
        d = dict(d)
        if "scene_durations" in d:
            d["scene_durations"] = tuple(float(v) for v in d["scene_durations"])
        return cls(**d)


def fit_student(model: StudentModel, X: np.ndarray, y: np.ndarray, h: HyperParams,
                epochs: int) -> StudentModel:
    for _ in range(epochs):
        model.train_epoch(X, y, h)
    return model


__all__ = [
    "DEFAULT_FEATURE_DIM", "DEFAULT_HIDDEN_DIM", "DEFAULT_NUM_CLASSES", "NonFiniteLossError",
    "SceneGenerator", "SceneSpec", "StudentModel", "Teacher", "WorkloadSpec", "fit_student",
    "generate_stream", "make_frozen_projection", "softmax", "stream_arrays", "student_infer",
    "student_infer_batch", "student_train_epoch", "teacher_label",
]
