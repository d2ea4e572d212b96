"""Latency sample collection for scenario runs.

Samples are recorded in integer microseconds of (virtual or wall) time and
reported as millisecond medians, overall and per gateway.
"""

from __future__ import annotations

from array import array
from statistics import median
from typing import Optional

BLOCK_CONSENSUS = "block_consensus"
ADD_BLOCK_LEADER = "add_block_leader"
UPDATE_BLOCK = "update_block"
APPEND_TX = "append_tx"
UPDATE_TX = "update_tx"

ALL_METRICS = (
    BLOCK_CONSENSUS,
    ADD_BLOCK_LEADER,
    UPDATE_BLOCK,
    APPEND_TX,
    UPDATE_TX,
)


class MetricsSink:
    """Accumulates latency samples and event counters keyed by gateway."""

    def __init__(self) -> None:
        self._samples: dict[tuple[str, str], array] = {}
        self.counters: dict[tuple[str, str], int] = {}

    def record(self, gateway: str, metric: str, us: int) -> None:
        key = (gateway, metric)
        samples = self._samples.get(key)
        if samples is None:
            samples = self._samples[key] = array("q")
        samples.append(us)

    def bump(self, gateway: str, name: str, by: int = 1) -> None:
        key = (gateway, name)
        self.counters[key] = self.counters.get(key, 0) + by

    def counter_total(self, name: str) -> int:
        return sum(v for (_, n), v in self.counters.items() if n == name)

    def samples(self, metric: str, gateway: Optional[str] = None) -> list[int]:
        if gateway is not None:
            return list(self._samples.get((gateway, metric), ()))
        merged: list[int] = []
        for (gw, m), arr in self._samples.items():
            if m == metric:
                merged.extend(arr)
        return merged

    def count(self, metric: str, gateway: Optional[str] = None) -> int:
        if gateway is not None:
            return len(self._samples.get((gateway, metric), ()))
        return sum(
            len(arr) for (_, m), arr in self._samples.items() if m == metric
        )

    def median_ms(
        self, metric: str, gateway: Optional[str] = None
    ) -> Optional[float]:
        """Median in milliseconds, or ``None`` when no samples exist."""
        values = self.samples(metric, gateway)
        if not values:
            return None
        return median(values) / 1000.0

    def gateways(self) -> list[str]:
        return sorted({gw for gw, _ in self._samples})
