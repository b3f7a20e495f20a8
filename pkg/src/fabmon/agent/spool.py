"""Bounded disconnect spool: keep the newest samples, count what we shed."""

from __future__ import annotations

from collections import deque

from fabmon.core import MetricSample


class SpoolRing:
    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("spool capacity must be >= 1")
        self.capacity = capacity
        self._ring: deque[MetricSample] = deque()
        self.dropped = 0

    def put(self, sample: MetricSample) -> int:
        """Spool one sample; returns how many old ones fell off (0 or 1)."""
        shed = 0
        if len(self._ring) >= self.capacity:
            self._ring.popleft()
            self.dropped += 1
            shed = 1
        self._ring.append(sample)
        return shed

    def drain(self) -> list[MetricSample]:
        out = list(self._ring)
        self._ring.clear()
        return out

    def __len__(self) -> int:
        return len(self._ring)
