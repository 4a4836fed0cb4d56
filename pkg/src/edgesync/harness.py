"""Deterministic end-to-end simulation, baselines, sweeps and offline profiling.

Every run replays the same per-edge sample streams for a given seed, so
strategies are compared on bit-identical inputs. The cloud runs on a
:class:`~edgesync.clock.SimClock` that only advances by declared costs
(labelling, training, evaluation, transfer, profiling); edges infer on
their stream timestamps and see an update once the cloud clock has
passed the moment it was dispatched.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from .bho import (BhoConfig, HoldoutObjective, RefineConfig, aggregate_h0, bho_optimize,
                  refine_minibatch, workload_objective)
from .clock import SimClock
from .cloud import Coordinator, CostModel, CycleRecord
from .core import FilterConfig, HyperParams, InvariantError, ModelParams
from .edge import EdgeAgent, InMemoryTransport
from .modelkit import (SceneGenerator, SceneSpec, StudentModel, Teacher, WorkloadSpec,
                       generate_stream, make_frozen_projection, stream_arrays)
from .trainer import TrainerConfig
from .urgency import UrgencyConfig

log = logging.getLogger(__name__)


class Strategy(str, enum.Enum):
    NO_ADAPTATION = "no_adaptation"
    ONE_TIME = "one_time"
    FIXED_INTERVAL = "fixed_interval"
    EDGESYNC = "edgesync"


def _default_costs() -> CostModel:
    # heavy teacher, modest link (about 1 Mbit/s), cheap lookup of h_0
    return CostModel(label_per_sample=0.05, train_per_sample_epoch=0.002, eval_per_sample=0.0005,
                     profiling_per_cycle=1e-4, upload_per_byte=8e-6, download_per_byte=8e-6)


@dataclass(frozen=True)
class SimConfig:
    """Everything a run needs besides the workloads and the seed."""

    costs: CostModel = field(default_factory=_default_costs)
    filter: FilterConfig = field(default_factory=FilterConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    urgency: UrgencyConfig = field(default_factory=UrgencyConfig)
    buffer_capacity: int = 2000
    fixed_interval: float = 100.0
    fixed_epochs: int = 30
    fixed_keep_fraction: float = 1.0
    fixed_window_only: bool = False
    one_time_seconds: float = 100.0
    pretrain_seconds: float = 200.0
    pretrain_epochs: int = 30
    idle_seconds: float = 5.0
    teacher_error: float = 0.0
    hidden_dim: int = 32
    report_bin_seconds: float = 25.0

    def __post_init__(self) -> None:
        if self.buffer_capacity < 1:
            raise InvariantError("buffer_capacity must be positive")
        for name in ("fixed_interval", "one_time_seconds", "pretrain_seconds", "idle_seconds",
                     "report_bin_seconds"):
            if not getattr(self, name) > 0:
                raise InvariantError(f"{name} must be positive")
        if not 0.0 < self.fixed_keep_fraction <= 1.0:
            raise InvariantError("fixed_keep_fraction must lie in (0, 1]")
        if self.fixed_epochs < 1 or self.pretrain_epochs < 0:
            raise InvariantError("epoch budgets must be non-negative")

    def replace(self, **kw) -> "SimConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict[str, Any]:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["costs"] = self.costs.to_dict()
        d["filter"] = self.filter.to_dict()
        d["trainer"] = self.trainer.to_dict()
        d["urgency"] = {"capacity_n": self.urgency.capacity_n,
                        "batch_count_m": self.urgency.batch_count_m,
                        "decay_constant_tm": self.urgency.decay_constant_tm}
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SimConfig":
        d = dict(d)
        if "costs" in d:
            d["costs"] = CostModel.from_dict(d["costs"])
        if "filter" in d:
            d["filter"] = FilterConfig.from_dict(d["filter"])
        if "trainer" in d:
            d["trainer"] = TrainerConfig.from_dict(d["trainer"])
        if "urgency" in d:
            d["urgency"] = UrgencyConfig(**d["urgency"])
        return cls(**d)


@dataclass
class RunReport:
    strategy: str
    seed: int
    overall_accuracy: float
    correct: int
    total: int
    update_count: int
    idle_cycles: int
    per_edge: dict[str, dict[str, Any]]
    cycles: list[dict[str, Any]]
    time_decomposition: dict[str, float]
    bytes_uploaded: int
    bytes_downloaded: int
    config: dict[str, Any]

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunReport":
        return cls(**d)

    def edge_accuracy(self, edge_id: str) -> float:
        return self.per_edge[edge_id]["accuracy"]

    def series_rows(self) -> list[tuple[str, float, float | None]]:
        """Flat (edge_id, bin_end, accuracy) rows for plotting."""
        rows = []
        for e, info in sorted(self.per_edge.items()):
            for t, acc in info["series"]:
                rows.append((e, t, acc))
        return rows

    def to_csv(self) -> str:
        lines = ["edge_id,time,accuracy"]
        for e, t, acc in self.series_rows():
            lines.append(f"{e},{t!r},{'' if acc is None else repr(acc)}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# workloads and models


def make_workloads(generator: SceneGenerator, n_edges: int, seed: int) -> list[WorkloadSpec]:
    """One independently drawn workload per edge, paired by ``seed``."""
    if n_edges < 1:
        raise InvariantError("need at least one edge")
    return [generator.build(seed * 1009 + i, f"edge-{i}") for i in range(n_edges)]


def pretrain_spec(spec: WorkloadSpec, seconds: float) -> WorkloadSpec:
    """The first scene of ``spec`` on a disjoint stream, for initial training."""
    s0 = spec.scenes[0]
    scene = SceneSpec(s0.class_means, s0.class_priors, s0.noise_scale, 0.0, seconds)
    return WorkloadSpec((scene,), spec.feature_dim, spec.samples_per_second, seconds,
                        spec.seed + 500_000_003, spec.edge_id)


def base_model(workloads: Sequence[WorkloadSpec], cfg: SimConfig, seed: int) -> StudentModel:
    w = workloads[0]
    frozen = make_frozen_projection(w.feature_dim, cfg.hidden_dim, seed)
    return StudentModel(ModelParams(frozen, np.zeros((w.num_classes, cfg.hidden_dim + 1)), 0),
                        rng_seed=seed)


def pretrained_models(workloads: Sequence[WorkloadSpec], cfg: SimConfig,
                      seed: int) -> tuple[StudentModel, dict[str, StudentModel]]:
    """Shared frozen part plus one head per edge fitted on its first scene."""
    base = base_model(workloads, cfg, seed)
    teacher = Teacher(workloads[0].num_classes, cfg.teacher_error, seed)
    heads = {}
    for w in workloads:
        m = base.copy()
        samples = list(generate_stream(pretrain_spec(w, cfg.pretrain_seconds)))
        X, _ = stream_arrays(samples)
        y = np.array([teacher.label(s) for s in samples])
        for _ in range(cfg.pretrain_epochs):
            m.train_epoch(X, y, cfg.trainer.hyperparams)
        m.reset_optimizer()
        heads[w.edge_id] = m
    return base, heads


# ---------------------------------------------------------------------------
# simulation


class _Sim:
    def __init__(self, strategy: Strategy, workloads: Sequence[WorkloadSpec], cfg: SimConfig,
                 seed: int):
        ids = [w.edge_id for w in workloads]
        if len(set(ids)) != len(ids):
            raise InvariantError("workload edge ids must be unique")
        self.strategy, self.cfg, self.seed = strategy, cfg, seed
        self.workloads = list(workloads)
        self.total_seconds = max(w.total_seconds for w in workloads)
        teacher = Teacher(workloads[0].num_classes, cfg.teacher_error, seed)
        self.streams = {w.edge_id: list(generate_stream(w)) for w in workloads}
        self.times = {e: np.array([s.timestamp for s in st]) for e, st in self.streams.items()}
        self.pos = {e: 0 for e in self.streams}
        labels = {(s.edge_id, s.seq): teacher.label(s)
                  for st in self.streams.values() for s in st}
        self.clock = SimClock()
        base, heads = pretrained_models(workloads, cfg, seed)
        policy = "fixed" if strategy is Strategy.FIXED_INTERVAL else "edgesync"
        trainer = dataclasses.replace(cfg.trainer, split_seed=seed)
        self.coord = Coordinator(base, trainer, cfg.urgency,
                                 lambda e, seq, _f: labels[(e, seq)], self.clock, cfg.costs,
                                 cfg.buffer_capacity, policy, cfg.fixed_epochs)
        self.agents: dict[str, EdgeAgent] = {}
        for w in workloads:
            self.coord.add_edge(w.edge_id, heads[w.edge_id])
            self.agents[w.edge_id] = EdgeAgent(w.edge_id, heads[w.edge_id].copy(), cfg.filter,
                                               InMemoryTransport(),
                                               lambda s: labels[(s.edge_id, s.seq)])

    def advance(self, t: float) -> None:
        """Run every edge's inference over samples with timestamp < ``t``."""
        for e, agent in self.agents.items():
            i = self.pos[e]
            j = int(np.searchsorted(self.times[e], t, side="left"))
            if j > i:
                agent.step_batch(self.streams[e][i:j])
                self.pos[e] = j

    def upload(self, cfg: FilterConfig | None = None) -> None:
        now = self.clock.now()
        for agent in self.agents.values():
            agent.close_window(now, cfg)
            for msg in agent.transport.drain():
                if hasattr(msg, "samples"):
                    self.coord.ingest_batch(msg)

    def deliver(self, rec: CycleRecord) -> None:
        if rec.update is None:
            return
        self.advance(self.clock.now())
        agent = self.agents[rec.selected]
        agent.apply_update(rec.update)
        agent.transport.drain()

    def run(self) -> None:
        if self.strategy is Strategy.EDGESYNC:
            self._run_edgesync()
        elif self.strategy is Strategy.FIXED_INTERVAL:
            self._run_fixed()
        elif self.strategy is Strategy.ONE_TIME:
            self._run_one_time()
        self.advance(math.inf)

    def _run_edgesync(self) -> None:
        while self.clock.now() < self.total_seconds:
            self.advance(self.clock.now())
            self.coord.begin_cycle()
            self.upload()
            rec = self.coord.run_cycle()
            if rec.update is None:
                self.clock.spend(self.cfg.idle_seconds)
            self.deliver(rec)

    def _run_fixed(self) -> None:
        keep = dataclasses.replace(self.cfg.filter, keep_fraction=self.cfg.fixed_keep_fraction)
        tick = self.cfg.fixed_interval
        while tick < self.total_seconds:
            self.clock.advance_to(tick)
            self.advance(self.clock.now())
            self.coord.begin_cycle()
            if self.cfg.fixed_window_only:
                # the comparator retrains on the window just closed
                for entry in self.coord.edges.values():
                    entry.buffer.clear()
            self.upload(keep)
            for e in self.agents:
                if self.coord.edges[e].buffer:
                    self.deliver(self.coord.run_cycle(force=e))
            # a cloud that falls behind starts the next round when it is free
            tick = max(tick + self.cfg.fixed_interval, self.clock.now())

    def _run_one_time(self) -> None:
        self.clock.advance_to(self.cfg.one_time_seconds)
        self.advance(self.clock.now())
        self.coord.begin_cycle()
        self.upload(dataclasses.replace(self.cfg.filter, keep_fraction=1.0))
        for e in self.agents:
            if self.coord.edges[e].buffer:
                self.deliver(self.coord.run_cycle(force=e))

    def report(self) -> RunReport:
        per_edge = {}
        correct = total = 0
        bin_s = self.cfg.report_bin_seconds
        for e, agent in sorted(self.agents.items()):
            t = np.array(agent.history_time)
            ok = np.array(agent.history_correct, dtype=np.float64)
            nbins = int(math.ceil(self.total_seconds / bin_s))
            idx = np.minimum((t // bin_s).astype(int), nbins - 1)
            series = []
            for b in range(nbins):
                sel = ok[idx == b]
                series.append([(b + 1) * bin_s, float(sel.mean()) if len(sel) else None])
            per_edge[e] = {"accuracy": agent.accuracy, "correct": agent.correct,
                           "total": agent.total, "updates": self.coord.edges[e].updates,
                           "final_version": agent.current_version, "series": series,
                           "scene_boundaries": self.workloads_by_id[e].scene_boundaries()}
            correct += agent.correct
            total += agent.total
        busy = [c for c in self.coord.cycles if c.update is not None]
        decomposition = {k: 0.0 for k in ("label_seconds", "upload_seconds", "profiling_seconds",
                                          "train_seconds", "dispatch_seconds", "total_seconds")}
        for c in busy:
            for k in decomposition:
                decomposition[k] += getattr(c, k)
        if busy:
            decomposition = {k: v / len(busy) for k, v in decomposition.items()}
        return RunReport(self.strategy.value, self.seed, correct / total if total else 0.0,
                         correct, total, len(busy), len(self.coord.cycles) - len(busy), per_edge,
                         [c.to_dict() for c in self.coord.cycles], decomposition,
                         self.coord.bytes_up, self.coord.bytes_down,
                         {"sim": self.cfg.to_dict(),
                          "workloads": [w.to_dict() for w in self.workloads]})

    @property
    def workloads_by_id(self) -> dict[str, WorkloadSpec]:
        return {w.edge_id: w for w in self.workloads}


def run_experiment(strategy: Strategy | str, workloads: Sequence[WorkloadSpec],
                   cfg: SimConfig | None = None, seed: int = 0) -> RunReport:
    """Simulate one strategy over ``workloads`` and return its report.

    The same ``workloads`` and ``seed`` give the same streams, labels,
    initial models and report bytes for every strategy.
    """
    if not workloads:
        raise InvariantError("need at least one workload")
    sim = _Sim(Strategy(strategy), workloads, cfg or SimConfig(), seed)
    sim.run()
    rep = sim.report()
    log.info("%s", json.dumps({"event": "run", "strategy": rep.strategy, "seed": seed,
                               "accuracy": rep.overall_accuracy, "updates": rep.update_count}))
    return rep


# ---------------------------------------------------------------------------
# sweeps


def sweep_filter_fraction(fractions: Sequence[float], seeds: Iterable[int],
                          generator: SceneGenerator | None = None, n_edges: int = 2,
                          cfg: SimConfig | None = None,
                          update_interval: float = 100.0) -> list[dict[str, Any]]:
    """Fixed-interval runs with the quality filter at each keep fraction."""
    generator = generator or SceneGenerator()
    cfg = cfg or SimConfig()
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise InvariantError("fractions must lie in (0, 1]")
    rows = []
    for seed in seeds:
        workloads = make_workloads(generator, n_edges, seed)
        for f in fractions:
            c = cfg.replace(fixed_interval=update_interval, fixed_keep_fraction=f)
            rep = run_experiment(Strategy.FIXED_INTERVAL, workloads, c, seed)
            rows.append({"seed": seed, "fraction": f, "accuracy": rep.overall_accuracy,
                         "updates": rep.update_count, "bytes_uploaded": rep.bytes_uploaded})
    return rows


def sweep_edge_count(counts: Sequence[int], seeds: Iterable[int],
                     generator: SceneGenerator | None = None, cfg: SimConfig | None = None,
                     strategies: Sequence[Strategy] = (Strategy.FIXED_INTERVAL,
                                                       Strategy.EDGESYNC)
                     ) -> list[dict[str, Any]]:
    """Mean accuracy per edge count; edge ``i`` keeps its workload as counts grow."""
    generator = generator or SceneGenerator()
    cfg = cfg or SimConfig()
    if any(c < 1 for c in counts):
        raise InvariantError("edge counts must be positive")
    rows = []
    for seed in seeds:
        all_w = make_workloads(generator, max(counts), seed)
        for n in counts:
            for s in strategies:
                rep = run_experiment(s, all_w[:n], cfg, seed)
                rows.append({"seed": seed, "edges": n, "strategy": Strategy(s).value,
                             "accuracy": rep.overall_accuracy, "updates": rep.update_count})
    return rows


def rows_to_csv(rows: Sequence[dict[str, Any]]) -> str:
    if not rows:
        return ""
    keys = list(rows[0])
    lines = [",".join(keys)]
    for r in rows:
        lines.append(",".join(repr(r[k]) if isinstance(r[k], float) else str(r[k])
                              for k in keys))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# offline profiling


@dataclass(frozen=True)
class ProfileConfig:
    bho: BhoConfig = field(default_factory=BhoConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    objective_epochs: int = 15
    segment_length: int = 200
    segments: int = 3
    hidden_dim: int = 32
    seed: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {"bho": self.bho.to_dict(), "refine": self.refine.to_dict(),
                "objective_epochs": self.objective_epochs,
                "segment_length": self.segment_length, "segments": self.segments,
                "hidden_dim": self.hidden_dim, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ProfileConfig":
        d = dict(d)
        if "bho" in d:
            d["bho"] = BhoConfig.from_dict(d["bho"])
        if "refine" in d:
            d["refine"] = RefineConfig.from_dict(d["refine"])
        return cls(**d)


def profile_offline(workloads: Sequence[WorkloadSpec],
                    cfg: ProfileConfig | None = None) -> dict[str, Any]:
    """BHO per workload, average into h_0, then refine on mini-batches.

    Returns the profile as a plain dict; :func:`dump_profile` writes it.
    """
    cfg = cfg or ProfileConfig()
    if not workloads:
        raise InvariantError("manifest lists no workloads")
    space = cfg.bho.space
    w0 = workloads[0]
    frozen = make_frozen_projection(w0.feature_dim, cfg.hidden_dim, cfg.seed)
    base = StudentModel(ModelParams(frozen, np.zeros((w0.num_classes, cfg.hidden_dim + 1)), 0),
                        rng_seed=cfg.seed)
    holdout = HoldoutObjective(base, cfg.objective_epochs, split_seed=cfg.seed)
    data, per_workload, bests = [], [], []
    for i, w in enumerate(workloads):
        X, y = stream_arrays(list(generate_stream(w)))
        data.append((X, y))
        objective = workload_objective(holdout, X, y, space, cfg.segment_length, cfg.segments,
                                       seed=cfg.seed + i)
        res = bho_optimize(objective, dataclasses.replace(cfg.bho, seed=cfg.bho.seed + i))
        bests.append(res.best_point)
        per_workload.append({"edge_id": w.edge_id, "best_point": res.best_point.tolist(),
                             "best_hyperparams": space.denormalize(res.best_point).to_dict(),
                             "best_value": res.best_value,
                             "trace": [t.to_dict() for t in res.trace]})
    h_avg = aggregate_h0(bests, space)
    refined = refine_minibatch(h_avg, data, cfg.refine, holdout, space)
    return {"h0": refined.hyperparams.to_dict(), "h_mean": h_avg.to_dict(),
            "workloads": per_workload, "refine": [s.to_dict() for s in refined.steps],
            "config": cfg.to_dict()}


def dump_profile(profile: dict[str, Any]) -> str:
    return json.dumps(profile, sort_keys=True, indent=2)


def load_h0(path: str) -> HyperParams:
    with open(path) as fh:
        return HyperParams.from_dict(json.load(fh)["h0"])


# ---------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class Manifest:
    """Workload manifest: explicit workloads or a generator plus edge count."""

    generator: SceneGenerator | None = None
    edges: int = 2
    workloads: tuple[WorkloadSpec, ...] = ()
    sim: SimConfig = field(default_factory=SimConfig)
    profile: ProfileConfig = field(default_factory=ProfileConfig)

    def __post_init__(self) -> None:
        if self.generator is None and not self.workloads:
            raise InvariantError("manifest needs a generator or explicit workloads")

    def build_workloads(self, seed: int) -> list[WorkloadSpec]:
        if self.workloads:
            return list(self.workloads)
        return make_workloads(self.generator, self.edges, seed)

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"edges": self.edges, "sim": self.sim.to_dict(),
                             "profile": self.profile.to_dict()}
        if self.generator is not None:
            d["generator"] = self.generator.to_dict()
        if self.workloads:
            d["workloads"] = [w.to_dict() for w in self.workloads]
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Manifest":
        gen = SceneGenerator.from_dict(d["generator"]) if "generator" in d else None
        wl = tuple(WorkloadSpec.from_dict(w) for w in d.get("workloads", ()))
        return cls(gen, int(d.get("edges", 2)), wl, SimConfig.from_dict(d.get("sim", {})),
                   ProfileConfig.from_dict(d.get("profile", {})))

    @classmethod
    def load(cls, path: str) -> "Manifest":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def default_manifest() -> Manifest:
    return Manifest(SceneGenerator(), 2)


__all__ = [
    "Manifest", "ProfileConfig", "RunReport", "SimConfig", "Strategy", "base_model",
    "default_manifest", "dump_profile", "load_h0", "make_workloads", "pretrained_models",
    "profile_offline", "rows_to_csv", "run_experiment", "sweep_edge_count",
    "sweep_filter_fraction",
]
