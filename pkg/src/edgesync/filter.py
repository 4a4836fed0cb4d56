"""Edge-side sample scoring and top-k selection.

A window's cache of ``(sample, output)`` pairs is scored at window close:
entropy of the edge model's output measures how poorly the current model
fits the sample, a sigmoid of the sample's age measures how representative
it is of the current stream, and the weighted sum ranks the cache. Only
the top ``ceil(keep_fraction * n)`` entries are uploaded.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from fractions import Fraction

from .core import EdgeSyncError, FilterConfig, InferenceOutput, InvariantError, Sample, ScoredSample

# keep timeliness strictly inside (0, 1) for extreme ages
_TINY = sys.float_info.min
_ONE_MINUS = 1.0 - sys.float_info.epsilon / 2


class EmptyCacheError(EdgeSyncError):
    pass


class NonPositiveWindowError(EdgeSyncError, ValueError):
    pass


@dataclass
class FilterCache:
    """Per-edge, per-window cache of inference results, ordered by ``seq``."""

    edge_id: str
    window_start: float = 0.0
    entries: list[tuple[Sample, InferenceOutput]] = field(default_factory=list)

    def append(self, sample: Sample, output: InferenceOutput) -> None:
        if sample.edge_id != self.edge_id:
            raise InvariantError(f"sample from {sample.edge_id!r} in cache of {self.edge_id!r}")
        if self.entries and sample.seq <= self.entries[-1][0].seq:
            raise InvariantError("cache entries must have strictly increasing seq")
        self.entries.append((sample, output))

    def clear(self, window_start: float) -> None:
        self.entries = []
        self.window_start = window_start

    def __len__(self) -> int:
        return len(self.entries)


def adaptability_score(output: InferenceOutput) -> float:
    """Shannon entropy (nats) of the output distribution, ``0 * ln 0 = 0``."""
    h = -math.fsum(p * math.log(p) for p in output.probs if p > 0.0)
    return min(max(h, 0.0), math.log(len(output.probs)))


def timeliness_score(age_seconds: float, window_seconds: float,
                     decay_toward_past: bool = True) -> float:
    """Sigmoid recency weight; 0.5 at age 0.

    With ``decay_toward_past`` the score falls with age, otherwise it rises
    (the sign as literally printed).
    """
    if not window_seconds > 0:
        raise NonPositiveWindowError(f"window_seconds must be positive, got {window_seconds}")
    x = age_seconds / window_seconds
    if not decay_toward_past:
        x = -x
    # 1 / (1 + exp(x)), guarded against overflow
    if x >= 0:
        e = math.exp(-x) if x < 745 else 0.0
        t = e / (1.0 + e)
    else:
        t = 1.0 / (1.0 + math.exp(x))
    return min(max(t, _TINY), _ONE_MINUS)


def quality_score(adaptability: float, timeliness: float, cfg: FilterConfig) -> float:
    return cfg.alpha * adaptability + cfg.beta * timeliness


def keep_count(n: int, keep_fraction: float) -> int:
    """``ceil(keep_fraction * n)``, at least 1 for non-empty input.

    The fraction is taken at its shortest decimal repr so that 0.7 * 10 is 7,
    not 8.
    """
    if n <= 0:
        return 0
    k = math.ceil(Fraction(repr(float(keep_fraction))) * n)
    return min(max(k, 1), n)


def filter_window(cache: FilterCache, cfg: FilterConfig, now: float) -> list[ScoredSample]:
    """Score, rank and truncate a window's cache; the cache is cleared.

    Ranking is descending quality, ties going to the higher ``seq``.
    """
    if not cache.entries:
        raise EmptyCacheError(f"cache for edge {cache.edge_id!r} is empty")
    scored = []
    for sample, output in cache.entries:
        e = adaptability_score(output)
        t = timeliness_score(max(now - sample.timestamp, 0.0), cfg.window_seconds,
                             cfg.decay_toward_past)
        scored.append(ScoredSample(sample, output, e, t, quality_score(e, t, cfg)))
    scored.sort(key=lambda s: (s.quality, s.sample.seq), reverse=True)
    kept = scored[:keep_count(len(scored), cfg.keep_fraction)]
    cache.clear(now)
    return kept
