"""Deterministic synthetic metric source.

Values are a pure function of (host, metric, tick, seed) via a keyed hash,
so any two runs with the same inputs emit identical streams. Gauges stay
inside declared plausible ranges; the simulated fabric leans on both
properties for its shadow-model checks and fault injection.
"""

from __future__ import annotations

import hashlib
import struct

# metric -> (low, high) plausible range for the synthetic generator
PLAUSIBLE_RANGES: dict[str, tuple[float, float]] = {
    "cpu.load1": (0.0, 8.0),
    "cpu.load5": (0.0, 8.0),
    "cpu.load15": (0.0, 8.0),
    "cpu.util": (0.0, 100.0),
    "mem.used_bytes": (0.0, 16.0 * 2**30),
    "mem.total_bytes": (16.0 * 2**30, 16.0 * 2**30),
    "disk.used_bytes": (0.0, 2.0 * 2**40),
    "disk.total_bytes": (2.0 * 2**40, 2.0 * 2**40),
    "net.rtt_ms": (0.05, 30.0),
    # uptime/idle grow with the tick (reboot wrap at 90 days, boot offset <= 30)
    "sys.uptime_s": (0.0, 120.0 * 86400),
    "sys.idle_s": (0.0, 120.0 * 86400),
}

DEFAULT_RANGE = (0.0, 1.0)

_UPTIME_WRAP_S = 90.0 * 86400


def unit_fraction(host: str, metric: str, tick: int, seed: int) -> float:
    """Stable pseudo-random fraction in [0, 1)."""
    digest = hashlib.blake2b(
        f"{host}|{metric}|{tick}|{seed}".encode(), digest_size=8
    ).digest()
    return struct.unpack(">Q", digest)[0] / 2**64


def plausible_range(metric: str) -> tuple[float, float]:
    return PLAUSIBLE_RANGES.get(metric, DEFAULT_RANGE)


def synthetic_value(host: str, metric: str, tick: int, seed: int) -> float:
    """One deterministic synthetic reading; tick is the sample time in ms."""
    frac = unit_fraction(host, metric, tick, seed)
    if metric == "sys.uptime_s":
        # pseudo boot time up to 30 days back; wraps like a reboot
        boot = unit_fraction(host, "boot", 0, seed) * 30 * 86400
        return round((tick / 1000.0) % _UPTIME_WRAP_S + boot, 3)
    if metric == "sys.idle_s":
        uptime = synthetic_value(host, "sys.uptime_s", tick, seed)
        return round(uptime * (0.2 + 0.6 * frac), 3)
    lo, hi = plausible_range(metric)
    return round(lo + frac * (hi - lo), 4)


def out_of_range_value(metric: str, tick: int, seed: int) -> float:
    """A value guaranteed outside the metric's plausible range."""
    lo, hi = plausible_range(metric)
    span = max(hi - lo, 1.0)
    return round(hi + span * (0.1 + 0.9 * unit_fraction("fault", metric, tick, seed)), 4)
