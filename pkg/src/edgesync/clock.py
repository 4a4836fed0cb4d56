"""Time sources.

Components that measure or spend time take a clock object with ``now()``
and ``spend(seconds)``. On the wall clock ``spend`` sleeps; on the
simulated clock it advances time, which is how the harness charges
declared costs (labelling, training, transfer) without real waiting.
"""

from __future__ import annotations

import time


class WallClock:
    def now(self) -> float:
        return time.monotonic()

    def spend(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)

    def __call__(self) -> float:
        return self.now()


class SimClock:
    def __init__(self, start: float = 0.0):
        self._t = float(start)

    def now(self) -> float:
        return self._t

    def spend(self, seconds: float) -> None:
        if seconds < 0:
            raise ValueError("cannot spend negative time")
        self._t += seconds

    def advance_to(self, t: float) -> None:
        if t > self._t:
            self._t = float(t)

    def __call__(self) -> float:
        return self._t
