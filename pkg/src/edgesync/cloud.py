"""Cloud coordinator: label, bank, select, retrain, dispatch.

:class:`Coordinator` is the synchronous core shared by the simulator and
the TCP service. A cycle is split in three so the service can train off
the event loop: :meth:`Coordinator.plan_cycle` picks an edge and snapshots
its data, :meth:`Coordinator.train_planned` trains on the snapshot, and
:meth:`Coordinator.finish_cycle` dispatches and clears the bank.
"""

from __future__ import annotations

import asyncio
import json
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .clock import WallClock
from .core import EdgeSyncError, HyperParams
from .modelkit import StudentModel
from .proto import (ModelUpdate, Register, RegisterReply, RequestBatch, SampleBatch, UpdateAck,
                    encode, read_message, write_message)
from .trainer import (ModelRejectedHyperparamsError, TrainerConfig, TrainReport, train_fixed_epochs,
                      train_until_stop)
from .urgency import EdgeBank, UrgencyConfig, bank_urgency, record_accuracy, select_edge

log = logging.getLogger(__name__)

LabelFn = Callable[[str, int, tuple], int]


class UnknownEdgeError(EdgeSyncError):
    pass


class ChecksumMismatchError(EdgeSyncError):
    pass


class NoTrainableEdgeError(EdgeSyncError):
    pass


@dataclass(frozen=True)
class CostModel:
    """Declared costs in seconds; charged to the clock via ``spend``.

    On the wall clock all defaults are zero so only real work takes time.
    """

    label_per_sample: float = 0.0
    train_per_sample_epoch: float = 0.0
    eval_per_sample: float = 0.0
    profiling_per_cycle: float = 0.0
    upload_per_byte: float = 0.0
    download_per_byte: float = 0.0

    def to_dict(self) -> dict[str, float]:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "CostModel":
        return cls(**d)


class ChargedModel:
    """Wraps a student so every epoch and evaluation spends declared time."""

    def __init__(self, model: StudentModel, clock, costs: CostModel):
        self.model, self.clock, self.costs = model, clock, costs

    def train_epoch(self, X, y, h: HyperParams) -> float:
        loss = self.model.train_epoch(X, y, h)
        self.clock.spend(self.costs.train_per_sample_epoch * len(y))
        return loss

    def evaluate(self, X, y) -> float:
        acc = self.model.evaluate(X, y)
        self.clock.spend(self.costs.eval_per_sample * len(y))
        return acc

    def get_trainable(self) -> np.ndarray:
        return self.model.get_trainable()

    def set_trainable(self, values) -> None:
        self.model.set_trainable(values)

    def reset_optimizer(self) -> None:
        self.model.reset_optimizer()


@dataclass
class EdgeEntry:
    edge_id: str
    bank: EdgeBank
    buffer: deque
    model: StudentModel
    version: int = 0
    last_update_time: float = float("-inf")
    last_update_order: int = -1  # breaks ties between updates at the same clock time
    pending: list = field(default_factory=list)
    updates: int = 0
    fresh: int = 0  # labelled samples received since the last update


@dataclass
class CycleRecord:
    cycle: int
    start: float
    end: float
    selected: str | None
    urgencies: dict[str, float]
    version: int | None = None
    epochs: int = 0
    best_epoch: int = 0
    best_eval: float | None = None
    stop_reason: str | None = None
    train_samples: int = 0
    label_seconds: float = 0.0
    upload_seconds: float = 0.0
    profiling_seconds: float = 0.0
    train_seconds: float = 0.0
    dispatch_seconds: float = 0.0
    update: ModelUpdate | None = field(default=None, repr=False)

    @property
    def total_seconds(self) -> float:
        return self.end - self.start

    @property
    def idle(self) -> bool:
        return self.update is None

    def to_dict(self) -> dict[str, Any]:
        return {"cycle": self.cycle, "start": self.start, "end": self.end,
                "selected": self.selected, "urgencies": dict(sorted(self.urgencies.items())),
                "version": self.version, "epochs": self.epochs, "best_epoch": self.best_epoch,
                "best_eval": self.best_eval, "stop_reason": self.stop_reason,
                "train_samples": self.train_samples, "label_seconds": self.label_seconds,
                "upload_seconds": self.upload_seconds,
                "profiling_seconds": self.profiling_seconds,
                "train_seconds": self.train_seconds, "dispatch_seconds": self.dispatch_seconds,
                "total_seconds": self.total_seconds}


@dataclass
class _Plan:
    edge_id: str
    urgencies: dict[str, float]
    X: np.ndarray
    y: np.ndarray
    model: StudentModel
    report: TrainReport | None = None
    error: str | None = None


class Coordinator:
    """Per-edge banks, labelled buffers and model copies, plus the cycle logic.

    ``policy="edgesync"`` selects by urgency and trains with early stopping;
    ``policy="fixed"`` selects round-robin and trains ``fixed_epochs``
    epochs, shipping the last one.
    """

    def __init__(self, base_model: StudentModel, trainer_cfg: TrainerConfig,
                 urgency_cfg: UrgencyConfig, label_fn: LabelFn, clock=None,
                 costs: CostModel | None = None, buffer_capacity: int = 2000,
                 policy: str = "edgesync", fixed_epochs: int = 30):
        if policy not in ("edgesync", "fixed"):
            raise ValueError(f"unknown policy {policy!r}")
        self.base_model = base_model
        self.checksum = base_model.params.frozen_checksum()
        self.trainer_cfg = trainer_cfg
        self.urgency_cfg = urgency_cfg
        self.label_fn = label_fn
        self.clock = clock or WallClock()
        self.costs = costs or CostModel()
        self.buffer_capacity = buffer_capacity
        self.policy = policy
        self.fixed_epochs = fixed_epochs
        self.edges: dict[str, EdgeEntry] = {}
        self.cycles: list[CycleRecord] = []
        self.training_edge: str | None = None
        self.bytes_up = 0
        self.bytes_down = 0
        self._cycle_start: float | None = None
        self._label_s = self._upload_s = 0.0

    # -- registration -----------------------------------------------------------

    def register(self, msg: Register) -> RegisterReply:
        if msg.frozen_checksum != self.checksum:
            return RegisterReply(msg.edge_id, False, 0, "frozen checksum mismatch")
        if (msg.feature_dim != self.base_model.feature_dim
                or msg.class_count != self.base_model.num_classes):
            return RegisterReply(msg.edge_id, False, 0, "model shape mismatch")
        entry = self.edges.get(msg.edge_id)
        if entry is None:
            entry = self.add_edge(msg.edge_id)
        return RegisterReply(msg.edge_id, True, entry.version)

    def add_edge(self, edge_id: str, model: StudentModel | None = None) -> EdgeEntry:
        """Register ``edge_id`` with a copy of ``model`` (default: the base)."""
        model = (model or self.base_model).copy()
        if model.params.frozen_checksum() != self.checksum:
            raise ChecksumMismatchError(f"edge {edge_id!r} model has a different frozen part")
        entry = EdgeEntry(edge_id, EdgeBank(edge_id, self.urgency_cfg.capacity_n),
                          deque(maxlen=self.buffer_capacity), model, model.version)
        self.edges[edge_id] = entry
        return entry

    # -- ingest -------------------------------------------------------------------

    def begin_cycle(self) -> None:
        self._cycle_start = self.clock.now()
        self._label_s = self._upload_s = 0.0

    def ingest_batch(self, msg: SampleBatch, nbytes: int | None = None) -> None:
        """Label a batch, bank each sample's correctness, buffer the labels."""
        entry = self.edges.get(msg.edge_id)
        if entry is None:
            raise UnknownEdgeError(f"edge {msg.edge_id!r} is not registered")
        nbytes = len(encode(msg)) if nbytes is None else nbytes
        self.bytes_up += nbytes
        up = self.costs.upload_per_byte * nbytes
        self.clock.spend(up)
        self._upload_s += up
        lab = self.costs.label_per_sample * len(msg.samples)
        self.clock.spend(lab)
        self._label_s += lab
        labelled = [(s, self.label_fn(msg.edge_id, s.seq, s.features)) for s in msg.samples]
        if self.training_edge == msg.edge_id:
            entry.pending.append(labelled)
        else:
            self._apply_labelled(entry, labelled)

    def _apply_labelled(self, entry: EdgeEntry, labelled) -> None:
        for s, label in labelled:
            record_accuracy(entry.bank, int(label == s.predicted), s.seq)
            entry.buffer.append((s.features, label))
        entry.fresh += len(labelled)

    def urgencies(self) -> dict[str, float]:
        return {e: bank_urgency(entry.bank, self.urgency_cfg) for e, entry in self.edges.items()}

    # -- cycle --------------------------------------------------------------------

    def plan_cycle(self, force: str | None = None) -> _Plan:
        """Pick the edge to train; ``force`` bypasses selection (baselines)."""
        if not self.edges:
            raise NoTrainableEdgeError("no registered edges")
        degrees = self.urgencies()
        if force is not None:
            if force not in self.edges:
                raise UnknownEdgeError(f"edge {force!r} is not registered")
            if not self.edges[force].buffer:
                raise NoTrainableEdgeError(f"edge {force!r} has no labelled data")
            degrees = {force: 0.0}
        elif self.policy == "fixed":
            degrees = {e: 0.0 for e in degrees}
        else:
            # A FIFO stays full forever once filled, so "full" counts only
            # samples received since that edge's last update.
            any_full_buffer = any(entry.fresh >= self.buffer_capacity
                                  for entry in self.edges.values())
            # Negative urgency means accuracy improved: no drift evidence either.
            if not (any(d > 0 for d in degrees.values()) or any_full_buffer):
                raise NoTrainableEdgeError("no positive urgency and no buffer full")
        candidates = {e: d for e, d in degrees.items() if self.edges[e].buffer}
        if not candidates:
            raise NoTrainableEdgeError("no edge has labelled data")
        last = {e: (self.edges[e].last_update_time, self.edges[e].last_update_order)
                for e in candidates}
        chosen = select_edge(candidates, last)
        entry = self.edges[chosen]
        X = np.array([f for f, _ in entry.buffer], dtype=np.float64)
        y = np.array([lab for _, lab in entry.buffer], dtype=np.int64)
        self.training_edge = chosen
        return _Plan(chosen, self.urgencies(), X, y, entry.model.copy())

    def train_planned(self, plan: _Plan) -> _Plan:
        """The only step that runs off the coordinator's thread in service mode."""
        charged = ChargedModel(plan.model, self.clock, self.costs)
        try:
            if self.policy == "fixed":
                plan.report = train_fixed_epochs(charged, plan.X, plan.y,
                                                 self.trainer_cfg.hyperparams, self.fixed_epochs,
                                                 self.clock)
            else:
                plan.report = train_until_stop(charged, plan.X, plan.y, self.trainer_cfg,
                                               self.clock)
        except ModelRejectedHyperparamsError as exc:
            plan.error = str(exc)
        return plan

    def finish_cycle(self, plan: _Plan, profiling_s: float, train_s: float) -> CycleRecord:
        entry = self.edges[plan.edge_id]
        start = self._cycle_start if self._cycle_start is not None else self.clock.now()
        rec = CycleRecord(len(self.cycles), start, start, plan.edge_id, plan.urgencies,
                          label_seconds=self._label_s, upload_seconds=self._upload_s,
                          profiling_seconds=profiling_s, train_seconds=train_s,
                          train_samples=len(plan.y))
        if plan.report is not None and plan.error is None:
            r = plan.report
            rec.epochs, rec.best_epoch = r.epochs_run, r.best_epoch
            rec.best_eval = None if r.best_eval != r.best_eval else r.best_eval
            rec.stop_reason = r.stop_reason.value
            version = entry.version + 1
            update = ModelUpdate(entry.edge_id, version, plan.model.get_trainable().ravel())
            nbytes = len(encode(update))
            t = self.clock.now()
            self.clock.spend(self.costs.download_per_byte * nbytes)
            rec.dispatch_seconds = self.clock.now() - t
            self.bytes_down += nbytes
            plan.model.version = version
            entry.model = plan.model
            entry.version = version
            entry.updates += 1
            entry.last_update_time = self.clock.now()
            entry.last_update_order = sum(en.updates for en in self.edges.values())
            entry.bank.clear()
            entry.fresh = 0
            rec.version, rec.update = version, update
        else:
            rec.stop_reason = "rejected"
            log.warning("training for %s rejected: %s", plan.edge_id, plan.error)
        self.training_edge = None
        for labelled in entry.pending:
            self._apply_labelled(entry, labelled)
        entry.pending.clear()
        rec.end = self.clock.now()
        self.cycles.append(rec)
        self._cycle_start = None
        self._label_s = self._upload_s = 0.0
        log.info("%s", json.dumps({"event": "cycle", **rec.to_dict()}))
        return rec

    def run_cycle(self, force: str | None = None) -> CycleRecord:
        """One select-train-dispatch cycle; idle cycles return a record with
        ``selected=None``."""
        if self._cycle_start is None:
            self._cycle_start = self.clock.now()
        try:
            t = self.clock.now()
            plan = self.plan_cycle(force)
            self.clock.spend(self.costs.profiling_per_cycle)
            profiling_s = self.clock.now() - t
        except NoTrainableEdgeError as exc:
            return self._idle(str(exc))
        t = self.clock.now()
        self.train_planned(plan)
        return self.finish_cycle(plan, profiling_s, self.clock.now() - t)

    def _idle(self, reason: str) -> CycleRecord:
        start = self._cycle_start if self._cycle_start is not None else self.clock.now()
        rec = CycleRecord(len(self.cycles), start, self.clock.now(), None, self.urgencies(),
                          label_seconds=self._label_s, upload_seconds=self._upload_s,
                          stop_reason="idle")
        self.cycles.append(rec)
        self._cycle_start = None
        self._label_s = self._upload_s = 0.0
        log.debug("idle cycle: %s", reason)
        return rec

    def on_ack(self, msg: UpdateAck) -> None:
        log.debug("edge %s acknowledged v%d", msg.edge_id, msg.version)


# ---------------------------------------------------------------------------
# TCP service


class CloudServer:
    """Asyncio front end for a :class:`Coordinator`.

    Connections ingest concurrently on the event loop; a single cycle task
    asks every edge for its window, waits ``batch_wait`` seconds, then
    trains in a worker thread. Stopping mid-training abandons the session
    without dispatching.
    """

    def __init__(self, coordinator: Coordinator, cycle_interval: float = 0.0,
                 batch_wait: float = 0.2, idle_sleep: float = 0.2,
                 metrics_path: str | None = None):
        self.coord = coordinator
        self.cycle_interval = cycle_interval
        self.batch_wait = batch_wait
        self.idle_sleep = idle_sleep
        self.metrics_path = metrics_path
        self.writers: dict[str, asyncio.StreamWriter] = {}
        self._server: asyncio.base_events.Server | None = None
        self._cycle_task: asyncio.Task | None = None
        self._stopping = False
        self.rejected: list[str] = []

    @property
    def port(self) -> int:
        assert self._server is not None
        return self._server.sockets[0].getsockname()[1]

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> None:
        self._server = await asyncio.start_server(self._handle, host, port)
        self._cycle_task = asyncio.create_task(self._cycle_loop())

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        edge_id = None
        try:
            first = await read_message(reader)
            if not isinstance(first, Register):
                writer.close()
                return
            reply = self.coord.register(first)
            await write_message(writer, reply)
            if not reply.accepted:
                self.rejected.append(first.edge_id)
                log.warning("rejected edge %s: %s", first.edge_id, reply.reason)
                writer.close()
                return
            edge_id = first.edge_id
            self.writers[edge_id] = writer
            while True:
                msg = await read_message(reader)
                if msg is None:
                    break
                if isinstance(msg, SampleBatch):
                    self.coord.ingest_batch(msg)
                elif isinstance(msg, UpdateAck):
                    self.coord.on_ack(msg)
                elif isinstance(msg, Register):
                    await write_message(writer, self.coord.register(msg))
        except (EdgeSyncError, ConnectionError) as exc:
            log.warning("connection for %s closed: %s", edge_id, exc)
        finally:
            if edge_id is not None and self.writers.get(edge_id) is writer:
                del self.writers[edge_id]
            writer.close()

    async def _send(self, edge_id: str, msg) -> None:
        w = self.writers.get(edge_id)
        if w is None:
            return
        try:
            await write_message(w, msg)
        except (ConnectionError, RuntimeError):
            self.writers.pop(edge_id, None)

    async def _cycle_loop(self) -> None:
        loop = asyncio.get_running_loop()
        n = 0
        while not self._stopping:
            if not self.writers:
                await asyncio.sleep(self.idle_sleep)
                continue
            self.coord.begin_cycle()
            for e in list(self.writers):
                await self._send(e, RequestBatch(e, n))
            n += 1
            await asyncio.sleep(self.batch_wait)
            t = self.coord.clock.now()
            try:
                plan = self.coord.plan_cycle()
            except NoTrainableEdgeError:
                self.coord._idle("nothing to train")
                await asyncio.sleep(self.idle_sleep)
                continue
            profiling_s = self.coord.clock.now() - t
            t = self.coord.clock.now()
            await loop.run_in_executor(None, self.coord.train_planned, plan)
            if self._stopping:
                self.coord.training_edge = None
                break
            rec = self.coord.finish_cycle(plan, profiling_s, self.coord.clock.now() - t)
            if rec.update is not None:
                await self._send(rec.selected, rec.update)
            if self.cycle_interval:
                await asyncio.sleep(self.cycle_interval)

    async def stop(self) -> None:
        self._stopping = True
        if self._cycle_task is not None:
            try:
                await asyncio.wait_for(self._cycle_task, timeout=30)
            except asyncio.TimeoutError:
                self._cycle_task.cancel()
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        for w in list(self.writers.values()):
            w.close()
        if self.metrics_path:
            self.write_metrics(self.metrics_path)

    def write_metrics(self, path: str) -> None:
        data = {"cycles": [c.to_dict() for c in self.coord.cycles],
                "edges": {e: {"version": en.version, "updates": en.updates}
                          for e, en in sorted(self.coord.edges.items())},
                "bytes_up": self.coord.bytes_up, "bytes_down": self.coord.bytes_down,
                "rejected": self.rejected}
        with open(path, "w") as fh:
            json.dump(data, fh, indent=2, sort_keys=True)

