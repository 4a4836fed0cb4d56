"""Cloud-side retraining with progressive early stopping.

Hyperparameters stay fixed for the session. Training stops once the
holdout accuracy has not strictly improved for more than ``patience_k``
epochs, or once ``max_time`` has elapsed on the injected clock, and the
model is rolled back to the best epoch before returning.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Any, Protocol

import numpy as np

from .clock import WallClock
from .core import EdgeSyncError, HyperParams, InvariantError, ModelParams
from .modelkit import NonFiniteLossError


class EmptyTrainSetError(EdgeSyncError, ValueError):
    pass


class ModelRejectedHyperparamsError(EdgeSyncError):
    pass


class StopReason(str, enum.Enum):
    PATIENCE = "patience"
    TIME_CAP = "time_cap"
    FIXED_EPOCHS = "fixed_epochs"


class TrainableModel(Protocol):
    def train_epoch(self, X: np.ndarray, y: np.ndarray, h: HyperParams) -> float: ...
    def evaluate(self, X: np.ndarray, y: np.ndarray) -> float: ...
    def get_trainable(self) -> np.ndarray: ...
    def set_trainable(self, values: np.ndarray) -> None: ...


@dataclass(frozen=True)
class TrainerConfig:
    patience_k: int = 5
    max_time: float = 60.0
    hyperparams: HyperParams = field(default_factory=lambda: HyperParams(0.05, 0.9, 1e-4))
    eval_fraction: float = 0.2
    split_seed: int = 0

    def __post_init__(self) -> None:
        if self.patience_k < 1:
            raise InvariantError("patience_k must be at least 1")
        if not self.max_time > 0:
            raise InvariantError("max_time must be positive")
        if not 0.0 < self.eval_fraction < 1.0:
            raise InvariantError("eval_fraction must lie in (0, 1)")

    def to_dict(self) -> dict[str, Any]:
        return {"patience_k": self.patience_k, "max_time": self.max_time,
                "hyperparams": self.hyperparams.to_dict(), "eval_fraction": self.eval_fraction,
                "split_seed": self.split_seed}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainerConfig":
        d = dict(d)
        if "hyperparams" in d:
            d["hyperparams"] = HyperParams.from_dict(d["hyperparams"])
        return cls(**d)


@dataclass
class TrainReport:
    epochs_run: int
    best_eval: float
    best_epoch: int
    stop_reason: StopReason
    wall_seconds: float
    delta: np.ndarray
    evaluations: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {"epochs_run": self.epochs_run, "best_eval": self.best_eval,
                "best_epoch": self.best_epoch, "stop_reason": self.stop_reason.value,
                "wall_seconds": self.wall_seconds, "evaluations": list(self.evaluations),
                "losses": list(self.losses)}


def holdout_split(n: int, eval_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded (train_idx, eval_idx); a single sample is used for both."""
    if n == 1:
        idx = np.array([0])
        return idx, idx
    n_eval = min(max(int(round(eval_fraction * n)), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[n_eval:]), np.sort(perm[:n_eval])


def _now(clock) -> float:
    return clock.now() if hasattr(clock, "now") else clock()


def train_until_stop(model: TrainableModel, X: np.ndarray, y: np.ndarray, cfg: TrainerConfig,
                     clock=None) -> TrainReport:
    """Train with early stopping and return the best-epoch checkpoint.

    Epochs are counted from 1; the loop continues while
    ``epoch - best_epoch <= patience_k`` and the elapsed time is below
    ``max_time``. Improvement must be strict.
    """
    clock = clock or WallClock()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if len(y) == 0:
        raise EmptyTrainSetError("train set is empty")
    tr, ev = holdout_split(len(y), cfg.eval_fraction, cfg.split_seed)
    Xtr, ytr, Xev, yev = X[tr], y[tr], X[ev], y[ev]
    if hasattr(model, "reset_optimizer"):
        model.reset_optimizer()

    initial = model.get_trainable()
    best = initial.copy()
    epoch = best_epoch = 0
    best_eval = 0.0
    evaluations: list[float] = []
    losses: list[float] = []
    start = _now(clock)
    while True:
        if epoch - best_epoch > cfg.patience_k:
            reason = StopReason.PATIENCE
            break
        if _now(clock) - start >= cfg.max_time:
            reason = StopReason.TIME_CAP
            break
        try:
            losses.append(model.train_epoch(Xtr, ytr, cfg.hyperparams))
        except NonFiniteLossError as exc:
            model.set_trainable(best)
            raise ModelRejectedHyperparamsError(str(exc)) from exc
        evaluation = model.evaluate(Xev, yev)
        evaluations.append(evaluation)
        epoch += 1
        if evaluation > best_eval:
            best_eval, best_epoch = evaluation, epoch
            best = model.get_trainable()
    model.set_trainable(best)
    return TrainReport(epoch, best_eval, best_epoch, reason, _now(clock) - start,
                       (best - initial).ravel(), evaluations, losses)


def train_fixed_epochs(model: TrainableModel, X: np.ndarray, y: np.ndarray, h: HyperParams,
                       epochs: int, clock=None) -> TrainReport:
    """Fixed-budget training that ships the last epoch (the comparator's rule)."""
    clock = clock or WallClock()
    y = np.asarray(y)
    if len(y) == 0:
        raise EmptyTrainSetError("train set is empty")
    if hasattr(model, "reset_optimizer"):
        model.reset_optimizer()
    initial = model.get_trainable()
    start = _now(clock)
    losses = []
    try:
        for _ in range(epochs):
            losses.append(model.train_epoch(X, y, h))
    except NonFiniteLossError as exc:
        model.set_trainable(initial)
        raise ModelRejectedHyperparamsError(str(exc)) from exc
    final = model.get_trainable()
    return TrainReport(epochs, math.nan, epochs, StopReason.FIXED_EPOCHS, _now(clock) - start,
                       (final - initial).ravel(), [], losses)


@dataclass
class TrainableView:
    """Writable copy of a model's trainable partition; the frozen part is
    only reachable read-only through ``base``."""

    base: ModelParams
    values: np.ndarray

    def delta(self) -> np.ndarray:
        return (self.values - self.base.trainable).ravel()

    def commit(self) -> ModelParams:
        return self.base.with_trainable(self.values)

    @property
    def size(self) -> int:
        return self.values.size


def freeze_partition(params: ModelParams) -> TrainableView:
    return TrainableView(params, np.array(params.trainable, dtype=np.float64))
