"""Injected clock sources.

All timestamps in the platform are UTC epoch milliseconds (``int``). Every
component takes a clock so test runs and scenario replays are deterministic;
wall-clock deployment is the thin adapter at the bottom.
"""

from __future__ import annotations

import threading
import time
from datetime import datetime, timezone
from typing import Protocol


class Clock(Protocol):
    def now_ms(self) -> int: ...


class SimulatedClock:
    """Manually driven clock. Time only moves forward."""

    def __init__(self, start_ms: int = 0):
        self._now = int(start_ms)
        self._lock = threading.Lock()

    def now_ms(self) -> int:
        return self._now

    def advance_to(self, t_ms: int) -> int:
        """Move the clock to ``t_ms``; earlier targets are ignored."""
        with self._lock:
            if t_ms > self._now:
                self._now = int(t_ms)
            return self._now

    def advance(self, delta_ms: int) -> int:
        with self._lock:
            self._now += int(delta_ms)
            return self._now


class WallClock:
    def now_ms(self) -> int:
        return int(time.time() * 1000)

    def advance_to(self, t_ms: int) -> int:  # pragma: no cover - trivial
        return self.now_ms()


def iso(ts_ms: int) -> str:
    """Render an epoch-ms timestamp as an ISO-8601 UTC string (for logs)."""
    return datetime.fromtimestamp(ts_ms / 1000.0, tz=timezone.utc).isoformat(timespec="milliseconds")


SECOND_MS = 1_000
MINUTE_MS = 60 * SECOND_MS
HOUR_MS = 60 * MINUTE_MS
DAY_MS = 24 * HOUR_MS
