"""Cloud-side accuracy banking and urgency scoring.

Each edge has a bounded FIFO of 0/1 correctness records (edge prediction vs
teacher label). A full bank is cut into ``m`` equal batches, oldest first;
the urgency degree sums how far each batch has fallen below the oldest
batch, weighting recent batches more. The edge with the highest urgency is
retrained next.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Hashable, Mapping, Sequence

from .core import AccuracyRecord, EdgeSyncError, InvariantError


class BankNotFullError(EdgeSyncError):
    """Not enough history to score; callers treat urgency as 0."""


class LengthMismatchError(EdgeSyncError, ValueError):
    pass


class EmptyMapError(EdgeSyncError, ValueError):
    pass


@dataclass(frozen=True)
class UrgencyConfig:
    capacity_n: int = 90
    batch_count_m: int = 10
    decay_constant_tm: float | None = None  # None means tm = m

    def __post_init__(self) -> None:
        if self.capacity_n <= 0 or self.batch_count_m <= 0:
            raise InvariantError("capacity_n and batch_count_m must be positive")
        if self.capacity_n % self.batch_count_m:
            raise InvariantError("capacity_n must be divisible by batch_count_m")
        if self.decay_constant_tm is not None and not self.decay_constant_tm > 0:
            raise InvariantError("decay_constant_tm must be positive")

    @property
    def batch_length(self) -> int:
        return self.capacity_n // self.batch_count_m

    @property
    def tm(self) -> float:
        return float(self.batch_count_m if self.decay_constant_tm is None
                     else self.decay_constant_tm)

    def to_dict(self) -> dict:
        return {"capacity_n": self.capacity_n, "batch_count_m": self.batch_count_m,
                "decay_constant_tm": self.decay_constant_tm}

    @classmethod
    def from_dict(cls, d: Mapping) -> "UrgencyConfig":
        return cls(**d)


@dataclass
class EdgeBank:
    edge_id: str
    capacity: int = 90
    records: deque = field(default_factory=deque)

    def __post_init__(self) -> None:
        if self.capacity <= 0:
            raise InvariantError("capacity must be positive")
        self.records = deque(self.records, maxlen=self.capacity)

    @property
    def full(self) -> bool:
        return len(self.records) == self.capacity

    def clear(self) -> None:
        self.records.clear()

    def __len__(self) -> int:
        return len(self.records)


def record_accuracy(bank: EdgeBank, correct: int, seq: int) -> EdgeBank:
    """Append one record; the oldest is evicted once the bank is full."""
    bank.records.append(AccuracyRecord(int(correct) if isinstance(correct, bool) else correct, seq))
    return bank


def batch_accuracies(bank: EdgeBank, cfg: UrgencyConfig) -> list[float]:
    """Per-batch sums of correct records, oldest batch first."""
    n, l = cfg.capacity_n, cfg.batch_length
    if len(bank.records) < n:
        raise BankNotFullError(f"bank {bank.edge_id!r} holds {len(bank.records)}/{n} records")
    recs = list(bank.records)[-n:]
    return [float(sum(r.correct for r in recs[i * l:(i + 1) * l]))
            for i in range(cfg.batch_count_m)]


def batch_weights(m: int, tm: float) -> list[float]:
    return [m / (1.0 + math.exp(-i / tm)) for i in range(m)]


def urgency_degree(batches: Sequence[float], cfg: UrgencyConfig) -> float:
    """Weighted drop of every batch below the oldest one.

    Positive when accuracy has degraded since the reference batch.
    """
    m = cfg.batch_count_m
    if len(batches) != m:
        raise LengthMismatchError(f"expected {m} batches, got {len(batches)}")
    ref = batches[0]
    return math.fsum((ref - wa) * w for wa, w in zip(batches, batch_weights(m, cfg.tm)))


def bank_urgency(bank: EdgeBank, cfg: UrgencyConfig) -> float:
    try:
        return urgency_degree(batch_accuracies(bank, cfg), cfg)
    except BankNotFullError:
        return 0.0


def select_edge(degrees: Mapping[Hashable, float],
                last_update: Mapping[Hashable, float] | None = None):
    """Edge with the highest urgency.

    Ties go to the edge updated longest ago (missing entries count as never
    updated), then to the lowest edge id.
    """
    if not degrees:
        raise EmptyMapError("no edges to select from")
    last_update = last_update or {}

    def key(e):
        return (-degrees[e], last_update.get(e, -math.inf), e)

    return min(degrees, key=key)
