"""Offline hyperparameter profiling.

Per workload, a Gaussian-process surrogate with an Expected Improvement
acquisition searches the normalised unit cube of (learning rate, momentum,
weight decay). The per-workload bests are averaged into a global baseline
``h_0``, which is then refined greedily on short contiguous segments.
Everything is seeded and reproducible bit for bit.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError
from scipy.stats import norm

from .core import EdgeSyncError, HyperParams, InvariantError
from .modelkit import NonFiniteLossError, StudentModel
from .trainer import holdout_split

log = logging.getLogger(__name__)


class SingularKernelError(EdgeSyncError):
    pass


class ObjectiveFailureError(EdgeSyncError):
    pass


class EmptyListError(EdgeSyncError, ValueError):
    pass


# ---------------------------------------------------------------------------
# search space


@dataclass(frozen=True)
class SearchSpace:
    """Box bounds; ``log`` dimensions are normalised in log10 space."""

    learning_rate: tuple[float, float] = (1e-4, 1e-1)
    momentum: tuple[float, float] = (0.0, 0.99)
    weight_decay: tuple[float, float] = (1e-6, 1e-2)
    log_dims: tuple[bool, bool, bool] = (True, False, True)

    def __post_init__(self) -> None:
        for (lo, hi), is_log in zip(self.bounds, self.log_dims):
            if not lo < hi:
                raise InvariantError("search bounds need lo < hi")
            if is_log and lo <= 0:
                raise InvariantError("log-scale bounds must be positive")

    @property
    def bounds(self) -> tuple[tuple[float, float], ...]:
        return (self.learning_rate, self.momentum, self.weight_decay)

    def normalize(self, h: HyperParams) -> np.ndarray:
        vals = (h.learning_rate, h.momentum, h.weight_decay)
        out = []
        for v, (lo, hi), is_log in zip(vals, self.bounds, self.log_dims):
            if is_log:
                v = max(v, lo * 1e-12)  # weight_decay may be 0
                out.append((math.log10(v) - math.log10(lo)) / (math.log10(hi) - math.log10(lo)))
            else:
                out.append((v - lo) / (hi - lo))
        return np.array(out)

    def denormalize(self, u: Sequence[float]) -> HyperParams:
        vals = []
        for x, (lo, hi), is_log in zip(u, self.bounds, self.log_dims):
            if is_log:
                vals.append(10 ** (math.log10(lo) + x * (math.log10(hi) - math.log10(lo))))
            else:
                vals.append(lo + x * (hi - lo))
        return HyperParams(vals[0], min(max(vals[1], 0.0), 0.999999), max(vals[2], 0.0))

    def to_dict(self) -> dict[str, Any]:
        return {"learning_rate": list(self.learning_rate), "momentum": list(self.momentum),
                "weight_decay": list(self.weight_decay), "log_dims": list(self.log_dims)}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SearchSpace":
        return cls(tuple(d["learning_rate"]), tuple(d["momentum"]), tuple(d["weight_decay"]),
                   tuple(d.get("log_dims", (True, False, True))))


# ---------------------------------------------------------------------------
# Gaussian process


@dataclass
class GPModel:
    points: list[np.ndarray] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    kernel_lengthscale: float = 0.2
    kernel_variance: float = 1.0
    noise_variance: float = 1e-4
    mean_constant: float = 0.0
    _factor: Any = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not self.kernel_lengthscale > 0 or not self.kernel_variance > 0:
            raise InvariantError("kernel lengthscale and variance must be positive")
        if self.noise_variance < 0:
            raise InvariantError("noise_variance must be non-negative")

    def add(self, point: Sequence[float], value: float) -> None:
        self.points.append(np.asarray(point, dtype=np.float64))
        self.values.append(float(value))
        self._factor = None

    def kernel(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        d2 = (np.sum(A ** 2, axis=1)[:, None] + np.sum(B ** 2, axis=1)[None, :]
              - 2.0 * A @ B.T)
        return self.kernel_variance * np.exp(-np.maximum(d2, 0.0)
                                             / (2.0 * self.kernel_lengthscale ** 2))

    def _fit(self):
        if self._factor is None:
            if not self.points:
                raise InvariantError("GP needs at least one observation")
            P = np.vstack(self.points)
            K = self.kernel(P, P) + self.noise_variance * np.eye(len(P))
            resid = np.asarray(self.values) - self.mean_constant
            for attempt in range(8):
                jitter = 0.0 if attempt == 0 else self.kernel_variance * 10.0 ** (attempt - 10)
                try:
                    c = cho_factor(K + jitter * np.eye(len(P)), lower=True)
                    break
                except LinAlgError:
                    continue
            else:
                raise SingularKernelError("kernel matrix is singular even after jitter")
            self._factor = (P, c, cho_solve(c, resid))
        return self._factor

    def predict(self, Q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and latent variance at each row of ``Q``."""
        P, c, alpha = self._fit()
        Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
        Ks = self.kernel(Q, P)
        mean = self.mean_constant + Ks @ alpha
        v = cho_solve(c, Ks.T)
        var = self.kernel_variance - np.sum(Ks * v.T, axis=1)
        return mean, np.maximum(var, 0.0)


def gp_fit_predict(gp: GPModel, query: Sequence[float]) -> tuple[float, float]:
    mean, var = gp.predict(np.asarray(query, dtype=np.float64)[None, :])
    return float(mean[0]), float(var[0])


def expected_improvement(mean, variance, best_so_far):
    """Closed-form EI for maximisation; works on scalars or arrays."""
    mean = np.asarray(mean, dtype=np.float64)
    sigma = np.sqrt(np.maximum(np.asarray(variance, dtype=np.float64), 0.0))
    gain = mean - best_so_far
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sigma > 0, gain / np.where(sigma > 0, sigma, 1.0), 0.0)
        ei = np.where(sigma > 0, gain * norm.cdf(z) + sigma * norm.pdf(z),
                      np.maximum(gain, 0.0))
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


# ---------------------------------------------------------------------------
# optimisation loop


@dataclass(frozen=True)
class BhoConfig:
    max_evaluations: int = 25
    init_random_points: int = 5
    ei_candidates: int = 2048
    seed: int = 0
    space: SearchSpace = field(default_factory=SearchSpace)
    kernel_lengthscale: float = 0.2
    kernel_variance: float = 1.0
    noise_variance: float = 1e-4

    def __post_init__(self) -> None:
        if self.max_evaluations < 1 or self.init_random_points < 1:
            raise InvariantError("evaluation budgets must be positive")
        if self.init_random_points > self.max_evaluations:
            raise InvariantError("init_random_points cannot exceed max_evaluations")
        if self.ei_candidates < 1:
            raise InvariantError("ei_candidates must be positive")

    def to_dict(self) -> dict[str, Any]:
        return {"max_evaluations": self.max_evaluations,
                "init_random_points": self.init_random_points,
                "ei_candidates": self.ei_candidates, "seed": self.seed,
                "space": self.space.to_dict(), "kernel_lengthscale": self.kernel_lengthscale,
                "kernel_variance": self.kernel_variance, "noise_variance": self.noise_variance}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "BhoConfig":
        d = dict(d)
        if "space" in d:
            d["space"] = SearchSpace.from_dict(d["space"])
        return cls(**d)


@dataclass
class TraceEntry:
    point: list[float]
    value: float
    source: str  # "random" or "ei"
    acquisition: float | None = None
    failed: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {"point": self.point, "value": self.value, "source": self.source,
                "acquisition": self.acquisition, "failed": self.failed}


@dataclass
class BhoResult:
    best_point: np.ndarray
    best_value: float
    trace: list[TraceEntry]


def _standardised_gp(points, values, cfg: BhoConfig) -> tuple[GPModel | None, float]:
    y = np.asarray(values)
    mu, sd = float(y.mean()), float(y.std())
    if sd == 0.0:
        return None, 0.0
    gp = GPModel(kernel_lengthscale=cfg.kernel_lengthscale, kernel_variance=cfg.kernel_variance,
                 noise_variance=cfg.noise_variance, mean_constant=0.0)
    for p, v in zip(points, values):
        gp.add(p, (v - mu) / sd)
    return gp, float((y.max() - mu) / sd)


def bho_optimize(objective: Callable[[np.ndarray], float], cfg: BhoConfig) -> BhoResult:
    """Maximise ``objective`` over the unit cube.

    Observed values are standardised before fitting, so a flat objective
    yields zero EI everywhere and the first candidate is taken. A point
    whose evaluation raises is recorded with the worst value seen so far.
    """
    rng = np.random.default_rng(cfg.seed)
    dim = 3
    trace: list[TraceEntry] = []
    points: list[np.ndarray] = []
    values: list[float] = []

    def evaluate(u: np.ndarray, source: str, acq: float | None) -> None:
        try:
            v = float(objective(u))
            if not math.isfinite(v):
                raise ObjectiveFailureError(f"objective returned {v}")
        except Exception as exc:  # noqa: BLE001 - any objective failure is recorded
            log.warning("objective failed at %s: %s", u.tolist(), exc)
            if not values:
                trace.append(TraceEntry(u.tolist(), math.nan, source, acq, failed=True))
                return
            v = min(values)
            trace.append(TraceEntry(u.tolist(), v, source, acq, failed=True))
        else:
            trace.append(TraceEntry(u.tolist(), v, source, acq))
        points.append(u)
        values.append(v)

    for u in rng.random((cfg.init_random_points, dim)):
        evaluate(u, "random", None)
    while len(trace) < cfg.max_evaluations:
        cands = rng.random((cfg.ei_candidates, dim))
        if not values:
            evaluate(cands[0], "random", None)
            continue
        gp, best_z = _standardised_gp(points, values, cfg)
        if gp is None:
            ei = np.zeros(len(cands))
        else:
            mean, var = gp.predict(cands)
            ei = expected_improvement(mean, var, best_z)
        i = int(np.argmax(ei))
        evaluate(cands[i], "ei", float(ei[i]))
    if not values:
        raise ObjectiveFailureError("every objective evaluation failed")
    best = int(np.argmax(values))
    return BhoResult(points[best].copy(), values[best], trace)


def aggregate_h0(per_workload_best: Sequence[Sequence[float]], space: SearchSpace | None = None,
                 raw_mean: bool = False) -> HyperParams:
    """Average per-workload bests into one baseline.

    Averaging happens in the normalised space, so log-scale dimensions are
    averaged in log space (a geometric mean). ``raw_mean`` averages the
    denormalised values instead.
    """
    space = space or SearchSpace()
    if len(per_workload_best) == 0:
        raise EmptyListError("no per-workload results to aggregate")
    U = np.asarray(per_workload_best, dtype=np.float64)
    if not raw_mean:
        return space.denormalize(U.mean(axis=0))
    hs = [space.denormalize(u) for u in U]
    return HyperParams(float(np.mean([h.learning_rate for h in hs])),
                       float(np.mean([h.momentum for h in hs])),
                       float(np.mean([h.weight_decay for h in hs])))


# ---------------------------------------------------------------------------
# objective on student models


@dataclass
class HoldoutObjective:
    """Best-epoch holdout accuracy of a student trained for a fixed budget.

    Every call starts from a copy of ``base`` and reuses the same split, so
    differences between calls come from the hyperparameters alone.
    """

    base: StudentModel
    epochs: int = 15
    eval_fraction: float = 0.2
    split_seed: int = 0

    def __call__(self, h: HyperParams, X: np.ndarray, y: np.ndarray) -> float:
        model = self.base.copy()
        model.reset_optimizer()
        tr, ev = holdout_split(len(y), self.eval_fraction, self.split_seed)
        best = 0.0
        for _ in range(self.epochs):
            try:
                model.train_epoch(X[tr], y[tr], h)
            except NonFiniteLossError:
                return best
            best = max(best, model.evaluate(X[ev], y[ev]))
        return best


def workload_objective(holdout: HoldoutObjective, X: np.ndarray, y: np.ndarray,
                       space: SearchSpace, segment_length: int, n_segments: int = 3,
                       seed: int = 0) -> Callable[[np.ndarray], float]:
    """Unit-cube objective: mean holdout accuracy over fixed contiguous segments."""
    rng = np.random.default_rng(seed)
    seg = min(segment_length, len(y))
    starts = sorted(int(s) for s in rng.integers(0, len(y) - seg + 1, size=n_segments))

    def objective(u: np.ndarray) -> float:
        h = space.denormalize(np.clip(u, 0.0, 1.0))
        return float(np.mean([holdout(h, X[s:s + seg], y[s:s + seg]) for s in starts]))

    return objective


# ---------------------------------------------------------------------------
# mini-batch refinement


@dataclass(frozen=True)
class RefineConfig:
    epsilon: float = 0.005
    consecutive_N: int = 3
    segment_length: int = 200
    step_scale: float = 0.1
    max_iterations: int = 40
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise InvariantError("epsilon must be positive")
        if self.consecutive_N < 1:
            raise InvariantError("consecutive_N must be at least 1")
        if self.segment_length < 2 or not self.step_scale > 0:
            raise InvariantError("segment_length >= 2 and step_scale > 0 required")

    def to_dict(self) -> dict[str, Any]:
        return {"epsilon": self.epsilon, "consecutive_N": self.consecutive_N,
                "segment_length": self.segment_length, "step_scale": self.step_scale,
                "max_iterations": self.max_iterations, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RefineConfig":
        return cls(**d)


@dataclass
class RefineStep:
    iteration: int
    workload: int
    start: int
    base_accuracy: float
    accepted: list[tuple[int, float, float]]  # (dimension, signed step, accuracy)
    improvement: float

    def to_dict(self) -> dict[str, Any]:
        return {"iteration": self.iteration, "workload": self.workload, "start": self.start,
                "base_accuracy": self.base_accuracy,
                "accepted": [list(a) for a in self.accepted], "improvement": self.improvement}


@dataclass
class RefineResult:
    hyperparams: HyperParams
    steps: list[RefineStep]


def refine_minibatch(h: HyperParams, workloads: Sequence[tuple[np.ndarray, np.ndarray]],
                     cfg: RefineConfig, evaluate: Callable[[HyperParams, np.ndarray, np.ndarray], float],
                     space: SearchSpace | None = None) -> RefineResult:
    """Coordinate-wise greedy refinement on random contiguous segments.

    Each iteration draws one segment, then tries ``+step`` and ``-step`` on
    every normalised coordinate in turn, keeping a move only if it strictly
    improves the segment's validation accuracy. Stops after
    ``consecutive_N`` iterations in a row improve by less than ``epsilon``.
    """
    space = space or SearchSpace()
    if not workloads:
        raise EmptyListError("no workloads to refine on")
    rng = np.random.default_rng(cfg.seed)
    u = space.normalize(h)
    current = h
    steps: list[RefineStep] = []
    stall = 0
    for it in range(cfg.max_iterations):
        if stall >= cfg.consecutive_N:
            break
        w = int(rng.integers(len(workloads)))
        X, y = workloads[w]
        seg = min(cfg.segment_length, len(y))
        start = int(rng.integers(0, len(y) - seg + 1))
        Xs, ys = X[start:start + seg], y[start:start + seg]
        base_acc = evaluate(current, Xs, ys)
        best_acc = base_acc
        accepted = []
        for d in range(len(u)):
            for sign in (1.0, -1.0):
                cand = u.copy()
                cand[d] = min(max(cand[d] + sign * cfg.step_scale, 0.0), 1.0)
                if cand[d] == u[d]:
                    continue
                h_cand = space.denormalize(cand)
                acc = evaluate(h_cand, Xs, ys)
                if acc > best_acc:
                    u, current, best_acc = cand, h_cand, acc
                    accepted.append((d, sign * cfg.step_scale, acc))
                    break
        improvement = best_acc - base_acc
        steps.append(RefineStep(it, w, start, base_acc, accepted, improvement))
        stall = stall + 1 if improvement < cfg.epsilon else 0
    return RefineResult(current, steps)
