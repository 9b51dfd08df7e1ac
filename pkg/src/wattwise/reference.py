"""Brute-force reference evaluators for cleaning, ticks, and conditions.

These recompute everything from scratch with ``statistics`` over explicit
list slices. The stream processor never calls into this module; the
simulator uses it to derive ground-truth labels and the test suite uses it
as the independent oracle the processor is checked against.
"""

from __future__ import annotations

import statistics
from typing import Optional, Sequence

MODIFIED_ZSCORE_FACTOR = 0.6745


def reference_accept_flags(
    values: Sequence[float],
    *,
    lo: float,
    hi: float,
    window_size: int = 20,
    zscore_threshold: float = 3.5,
    mad_epsilon: float = 3.0,
) -> list[bool]:
    """Accept/reject flag per sample, recomputing median and MAD per step.

    Two stages: a static plausible range, then a modified z-score
    ``0.6745 * (x - median) / MAD`` over the trailing window of accepted
    samples. While fewer than ``window_size`` samples have been accepted,
    only the range test applies. A zero MAD falls back to the absolute band
    ``|x - median| > mad_epsilon``.
    """
    accepted: list[float] = []
    flags: list[bool] = []
    for x in values:
        if not (lo <= x <= hi):
            flags.append(False)
            continue
        if len(accepted) < window_size:
            flags.append(True)
            accepted.append(x)
            continue
        window = accepted[-window_size:]
        med = statistics.median(window)
        mad = statistics.median([abs(v - med) for v in window])
        if mad == 0:
            ok = abs(x - med) <= mad_epsilon
        else:
            ok = abs(MODIFIED_ZSCORE_FACTOR * (x - med) / mad) <= zscore_threshold
        flags.append(ok)
        if ok:
            accepted.append(x)
    return flags


def reference_ticks(
    samples: Sequence[tuple[int, float]],
    *,
    start_ms: int,
    end_ms: int,
    frequency_ms: int,
    measurement_type: str = "LastValue",
    staleness_multiplier: float = 2.0,
) -> list[tuple[int, Optional[float]]]:
    """Tick values on the grid ``start + k*frequency`` for k = 1..

    ``samples`` must be (observed_at, value) pairs of *cleaned* data sorted
    by time. LastValue picks the newest sample at or before the tick,
    absent when older than the staleness horizon; Window* aggregate over
    ``(tick - frequency, tick]``.
    """
    out: list[tuple[int, Optional[float]]] = []
    horizon = int(frequency_ms * staleness_multiplier)
    tick = start_ms + frequency_ms
    while tick <= end_ms:
        if measurement_type == "LastValue":
            value = None
            for t, v in reversed(samples):
                if t <= tick:
                    value = v if tick - t <= horizon else None
                    break
        else:
            window = [v for t, v in samples if tick - frequency_ms < t <= tick]
            if not window:
                value = None
            elif measurement_type == "WindowAvg":
                value = sum(window) / len(window)
            elif measurement_type == "WindowMin":
                value = min(window)
            elif measurement_type == "WindowMax":
                value = max(window)
            else:
                raise ValueError(f"unknown measurement type {measurement_type!r}")
        out.append((tick, value))
        tick += frequency_ms
    return out


def reference_firings(
    ticks: Sequence[tuple[int, Optional[float]]],
    *,
    comparator: str,
    threshold: float,
    trigger: str = "Level",
    cooldown_ms: int = 0,
) -> list[int]:
    """Timestamps at which the condition fires over a tick trace."""
    compare = {
        ">": lambda v: v > threshold,
        ">=": lambda v: v >= threshold,
        "<": lambda v: v < threshold,
        "<=": lambda v: v <= threshold,
        "=": lambda v: v == threshold,
    }[comparator]
    fired: list[int] = []
    last_fired: Optional[int] = None
    prev_truth = False
    for at, value in ticks:
        if value is None:
            continue
        truth = compare(value)
        cooled = last_fired is None or at - last_fired >= cooldown_ms
        if trigger == "Edge":
            should = truth and not prev_truth and cooled
        else:
            should = truth and cooled
        if should:
            fired.append(at)
            last_fired = at
        prev_truth = truth
    return fired
