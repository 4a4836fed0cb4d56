"""Edge agent: local inference, window cache, filtered upload, model updates.

:class:`EdgeAgent` holds the edge state and is transport-agnostic; the
simulation drives it directly, and :func:`run_edge` wires it to a TCP
connection. Inference always uses the version currently installed, so a
slow or stalled coordinator never blocks the inference loop.
"""

from __future__ import annotations

import asyncio
import json
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from .core import DimensionMismatchError, EdgeSyncError, FilterConfig, InferenceOutput, Sample
from .filter import EmptyCacheError, FilterCache, filter_window
from .modelkit import StudentModel, student_infer_batch
from .proto import (ModelUpdate, Register, RegisterReply, RequestBatch, SampleBatch, UpdateAck,
                    WireSample, read_message, write_message)

log = logging.getLogger(__name__)


class StaleVersionError(EdgeSyncError):
    pass


class VersionGapError(EdgeSyncError):
    """An update skipped a version; the edge must re-register."""


class WrongEdgeError(EdgeSyncError):
    pass


class Transport(Protocol):
    def send(self, msg) -> None: ...


class InMemoryTransport:
    """Outbox queue; never blocks."""

    def __init__(self) -> None:
        self.outbox: deque = deque()

    def send(self, msg) -> None:
        self.outbox.append(msg)

    def drain(self) -> list:
        out = list(self.outbox)
        self.outbox.clear()
        return out


class BlackholeTransport:
    """Accepts and discards everything, like a coordinator that never reads."""

    def __init__(self) -> None:
        self.dropped = 0

    def send(self, msg) -> None:
        self.dropped += 1


@dataclass(frozen=True)
class InferenceRecord:
    seq: int
    timestamp: float
    version: int
    output: InferenceOutput
    label: int | None

    @property
    def correct(self) -> bool | None:
        return None if self.label is None else self.output.predicted == self.label


@dataclass
class WindowStats:
    window_id: int
    version: int
    cache_size: int
    uploaded: int
    correct: int
    total: int
    updates: list[int] = field(default_factory=list)

    @property
    def accuracy(self) -> float | None:
        return self.correct / self.total if self.total else None

    def to_dict(self) -> dict:
        return {"window_id": self.window_id, "mean_accuracy": self.accuracy,
                "version": self.version, "cache_size": self.cache_size,
                "uploaded": self.uploaded, "updates": list(self.updates)}


class EdgeAgent:
    """State and operations of one edge server.

    ``label_fn`` (sample -> teacher label) is only used for accuracy
    statistics in simulation; it never influences inference or filtering.
    """

    def __init__(self, edge_id: str, model: StudentModel, filter_cfg: FilterConfig,
                 transport: Transport | None = None,
                 label_fn: Callable[[Sample], int] | None = None, start_time: float = 0.0):
        self.edge_id = edge_id
        self.model = model
        self.filter_cfg = filter_cfg
        self.transport = transport or InMemoryTransport()
        self.label_fn = label_fn
        self.cache = FilterCache(edge_id, start_time)
        self.current_version = model.version
        self.window_id = 0
        self.correct = 0
        self.total = 0
        self._win_correct = 0
        self._win_total = 0
        self._win_updates: list[int] = []
        self.windows: list[WindowStats] = []
        self.history_correct: list[bool] = []
        self.history_version: list[int] = []
        self.history_time: list[float] = []
        self.bytes_up = 0

    # -- inference ------------------------------------------------------------

    def step(self, sample: Sample) -> InferenceRecord:
        return self.step_batch([sample])[0]

    def step_batch(self, samples: Sequence[Sample]) -> list[InferenceRecord]:
        """Infer a run of samples with the currently installed model."""
        if not samples:
            return []
        X = np.array([s.features for s in samples], dtype=np.float64)
        if X.shape[1] != self.model.feature_dim:
            raise DimensionMismatchError(
                f"edge {self.edge_id} expects {self.model.feature_dim} features, got {X.shape[1]}")
        outputs = student_infer_batch(self.model, X)
        records = []
        for s, out in zip(samples, outputs):
            self.cache.append(s, out)
            label = self.label_fn(s) if self.label_fn else None
            rec = InferenceRecord(s.seq, s.timestamp, self.current_version, out, label)
            if label is not None:
                ok = out.predicted == label
                self.correct += ok
                self.total += 1
                self._win_correct += ok
                self._win_total += 1
                self.history_correct.append(ok)
                self.history_version.append(self.current_version)
                self.history_time.append(s.timestamp)
            records.append(rec)
        return records

    # -- window close -----------------------------------------------------------

    def close_window(self, now: float, cfg: FilterConfig | None = None) -> SampleBatch | None:
        """Filter the cache and package survivors; empty windows send nothing."""
        cfg = cfg or self.filter_cfg
        cache_size = len(self.cache)
        try:
            kept = filter_window(self.cache, cfg, now)
        except EmptyCacheError:
            log.info("edge %s window %d empty, nothing uploaded", self.edge_id, self.window_id)
            self.cache.clear(now)
            kept = []
        # Stream order on the wire: a keep-everything filter is then a no-op.
        kept = sorted(kept, key=lambda k: k.sample.seq)
        msg = None
        if kept:
            msg = SampleBatch(self.edge_id, self.window_id, tuple(
                WireSample(k.sample.seq, k.sample.timestamp, k.sample.features,
                           k.output.probs, k.output.predicted) for k in kept))
        stats = WindowStats(self.window_id, self.current_version, cache_size, len(kept),
                            self._win_correct, self._win_total, self._win_updates)
        self.windows.append(stats)
        log.info("%s", json.dumps({"event": "window", "edge_id": self.edge_id, **stats.to_dict()}))
        self._win_correct = self._win_total = 0
        self._win_updates = []
        self.window_id += 1
        if msg is not None:
            self.transport.send(msg)
        return msg

    # -- updates ------------------------------------------------------------------

    def apply_update(self, msg: ModelUpdate) -> UpdateAck:
        if msg.edge_id != self.edge_id:
            raise WrongEdgeError(f"update for {msg.edge_id!r} delivered to {self.edge_id!r}")
        if msg.version <= self.current_version:
            self.transport.send(UpdateAck(self.edge_id, self.current_version))
            raise StaleVersionError(
                f"update v{msg.version} not newer than installed v{self.current_version}")
        if msg.version > self.current_version + 1:
            raise VersionGapError(
                f"update v{msg.version} skips from installed v{self.current_version}")
        self.model.set_trainable(msg.as_array())
        self.model.version = msg.version
        self.current_version = msg.version
        self._win_updates.append(msg.version)
        ack = UpdateAck(self.edge_id, msg.version)
        self.transport.send(ack)
        return ack

    def register_message(self) -> Register:
        return Register(self.edge_id, self.model.feature_dim, self.model.num_classes,
                        self.model.params.frozen_checksum())

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0


# ---------------------------------------------------------------------------
# socket mode


class _QueueTransport:
    def __init__(self, queue: asyncio.Queue):
        self.queue = queue

    def send(self, msg) -> None:
        self.queue.put_nowait(msg)


async def run_edge(agent: EdgeAgent, samples: Iterable[Sample], host: str, port: int,
                   time_scale: float = 1.0, window_timeout: float | None = None,
                   linger: float = 0.0) -> EdgeAgent:
    """Replay ``samples`` against a coordinator at ``host:port``.

    Samples are paced by their timestamps divided by ``time_scale``. Window
    closes come from the coordinator's ``RequestBatch`` or, if set, a local
    ``window_timeout`` in stream seconds. Sending goes through a queue
    drained by a separate task, so inference never waits on the socket.
    """
    reader, writer = await asyncio.open_connection(host, port)
    outbox: asyncio.Queue = asyncio.Queue()
    agent.transport = _QueueTransport(outbox)
    inbox: asyncio.Queue = asyncio.Queue()

    async def sender() -> None:
        while True:
            msg = await outbox.get()
            await write_message(writer, msg)

    async def receiver() -> None:
        while True:
            msg = await read_message(reader)
            if msg is None:
                break
            await inbox.put(msg)

    await write_message(writer, agent.register_message())
    reply = await read_message(reader)
    if not isinstance(reply, RegisterReply) or not reply.accepted:
        writer.close()
        reason = getattr(reply, "reason", "no reply")
        raise EdgeSyncError(f"registration of {agent.edge_id} rejected: {reason}")

    tasks = [asyncio.create_task(sender()), asyncio.create_task(receiver())]
    loop = asyncio.get_running_loop()
    t0 = loop.time()
    stream_now = 0.0

    def handle(msg) -> None:
        if isinstance(msg, RequestBatch):
            agent.close_window(stream_now)
        elif isinstance(msg, ModelUpdate):
            try:
                agent.apply_update(msg)
            except StaleVersionError as exc:
                log.warning("%s", exc)
            except VersionGapError as exc:
                log.warning("%s; re-registering", exc)
                agent.transport.send(agent.register_message())

    try:
        for s in samples:
            delay = t0 + s.timestamp / time_scale - loop.time()
            if delay > 0:
                await asyncio.sleep(delay)
            while not inbox.empty():
                handle(inbox.get_nowait())
            stream_now = s.timestamp
            agent.step(s)
            if window_timeout is not None and stream_now - agent.cache.window_start >= window_timeout:
                agent.close_window(stream_now)
        end = loop.time() + linger
        while loop.time() < end:
            try:
                handle(await asyncio.wait_for(inbox.get(), timeout=max(end - loop.time(), 0.001)))
            except asyncio.TimeoutError:
                break
        while not outbox.empty():
            await asyncio.sleep(0.01)
    finally:
        for t in tasks:
            t.cancel()
        writer.close()
        try:
            await writer.wait_closed()
        except (ConnectionError, OSError):
            pass
    return agent
