"""Per-host sampling daemon.

One Agent owns its sensor schedule, a latest-value map it serves to probing
consumers, and the publishing link to the importer. When that link is down,
samples land in a bounded drop-oldest spool and flush on reconnect; every
produced sample is accounted for as delivered, spooled or dropped, exactly.

The agent also measures itself: process CPU time over wall time is exported
as agent.overhead (percent), alongside agent.dropped_samples and
agent.sensor_errors.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from fabmon.core import Clock, MetricSample, ResourcePath
from fabmon.agent import external as external_mod
from fabmon.agent import synthetic
from fabmon.agent.scheduling import SensorSchedule
from fabmon.agent.sensors import (
    BUILTIN_METRICS,
    ReadFailure,
    SensorSpec,
    SensorUnavailable,
    read_builtin,
)
from fabmon.agent.spool import SpoolRing
from fabmon.wire.client import ConnectionLost, UpstreamError, WireClient
from fabmon.wire.session import WireHandler, WireServer

log = logging.getLogger(__name__)

SELF_METRICS_TTL_S = 180


def _process_cpu_ms() -> float:
    return time.process_time() * 1000.0


class OverheadLedger:
    """Self-measured cost: agent CPU time as a fraction of wall time."""

    def __init__(self, clock: Clock, cpu_time_ms: Callable[[], float] = _process_cpu_ms):
        self._clock = clock
        self._cpu_time_ms = cpu_time_ms
        self.start_wall = clock.now()
        self.start_cpu = cpu_time_ms()

    @property
    def cpu_time_used(self) -> float:
        return self._cpu_time_ms() - self.start_cpu

    @property
    def wall_elapsed(self) -> float:
        return max(1.0, self._clock.now() - self.start_wall)

    def fraction(self) -> float:
        return self.cpu_time_used / self.wall_elapsed


@dataclass
class AgentConfig:
    host_path: ResourcePath
    sensors: list[SensorSpec]
    importer_endpoint: str = ""
    directory_endpoint: str = ""
    listen_endpoint: str = ""  # how others reach this agent's query server
    seed: int = 0
    spool_capacity: int = 1024
    registration_ttl: int = 120  # seconds
    synthetic: bool = False  # use the deterministic synthetic readers
    emit_self_metrics: bool = True
    sensor_params: dict = field(default_factory=dict)  # per sensor id


@dataclass
class AgentCounters:
    produced: int = 0
    delivered: int = 0
    dropped: int = 0
    sensor_errors: int = 0


class Agent(WireHandler):
    def __init__(self, config: AgentConfig, clock: Clock, dial: Callable | None = None,
                 cpu_time_ms: Callable[[], float] = _process_cpu_ms):
        declared = [d.name for spec in config.sensors for d in spec.metrics]
        if len(declared) != len(set(declared)):
            dupes = sorted({n for n in declared if declared.count(n) > 1})
            raise ValueError(f"metric names must be unique within an agent: {dupes}")
        self.config = config
        self.clock = clock
        self.dial = dial
        self.counters = AgentCounters()
        self.ledger = OverheadLedger(clock, cpu_time_ms)
        self.schedule = SensorSchedule(config.sensors, clock.now(), config.seed)
        self.spool = SpoolRing(config.spool_capacity)
        self.server = WireServer(self, clock, name=f"agent:{config.host_path}")
        self._specs = {s.id: s for s in config.sensors}
        self._disabled: set[str] = set()
        self._latest: dict[str, MetricSample] = {}
        self._latest_lock = threading.Lock()
        self._client: Optional[WireClient] = None
        self._registered_until = 0
        self._stop = threading.Event()
        # simulation hooks: fault lookup for synthetic reads, produce observer
        self.synthetic_fault: Optional[Callable[[str, str, int], Optional[str]]] = None
        self.on_produced: Optional[Callable[[list[MetricSample]], None]] = None

    # -- sampling ----------------------------------------------------------

    def _read_spec(self, spec: SensorSpec, now: int) -> list[tuple[str, float | int | str]]:
        params = dict(spec.params)
        params.update(self.config.sensor_params.get(spec.id, {}))
        if spec.source == "external":
            samples, bad = external_mod.run_external(
                spec.command, spec.timeout, self.config.host_path)
            self.counters.sensor_errors += bad
            return [(s.metric, s.value) for s in samples]
        if spec.source == "synthetic" or self.config.synthetic:
            host = str(self.config.host_path)
            if spec.source == "synthetic":
                metrics = [d.name for d in spec.metrics]
            else:
                metrics = list(BUILTIN_METRICS[spec.source])
            readings = []
            for metric in metrics:
                fault = self.synthetic_fault(host, metric, now) if self.synthetic_fault else None
                if fault == "stale_metrics":
                    continue  # the metric stops updating during the fault window
                if fault == "out_of_range":
                    readings.append((metric, synthetic.out_of_range_value(metric, now, self.config.seed)))
                else:
                    readings.append((metric, synthetic.synthetic_value(host, metric, now, self.config.seed)))
            return readings
        if spec.source == "net_rtt":
            params.setdefault("dial", self.dial)
        return read_builtin(spec.source, params)

    def sample_due(self, now: int) -> list[MetricSample]:
        """Read every due sensor; failures are logged and counted, not raised."""
        out: list[MetricSample] = []
        for sensor_id in self.schedule.due(now):
            if sensor_id in self._disabled:
                self.schedule.mark_run(sensor_id, now)
                continue
            spec = self._specs[sensor_id]
            try:
                readings = self._read_spec(spec, now)
            except SensorUnavailable as exc:
                log.warning("sensor %s disabled: %s", sensor_id, exc)
                self._disabled.add(sensor_id)
                self.schedule.mark_run(sensor_id, now)
                continue
            except ReadFailure as exc:
                log.info("sensor %s read failed: %s", sensor_id, exc)
                self.counters.sensor_errors += 1
                self.schedule.mark_run(sensor_id, now)
                continue
            for metric, value in readings:
                out.append(MetricSample(
                    path=self.config.host_path,
                    metric=metric,
                    timestamp=now,
                    value=value,
                    ttl=spec.metric_ttl(metric),
                ))
            self.schedule.mark_run(sensor_id, now)
        return out

    def _self_metrics(self, now: int) -> list[MetricSample]:
        overhead_pct = round(self.ledger.fraction() * 100.0, 4)
        mk = lambda metric, value: MetricSample(  # noqa: E731
            path=self.config.host_path, metric=metric, timestamp=now,
            value=value, ttl=SELF_METRICS_TTL_S)
        return [
            mk("agent.overhead", overhead_pct),
            mk("agent.dropped_samples", self.counters.dropped),
            mk("agent.sensor_errors", self.counters.sensor_errors),
        ]

    # -- publishing ---------------------------------------------------------

    def _connect(self) -> Optional[WireClient]:
        if self._client is not None:
            return self._client
        if not self.dial or not self.config.importer_endpoint:
            return None
        try:
            channel = self.dial(self.config.importer_endpoint)
            self._client = WireClient(
                channel, role="producer", name=f"agent:{self.config.host_path}")
        except (ConnectionError, OSError, TimeoutError, ConnectionLost) as exc:
            log.debug("importer unreachable: %s", exc)
            self._client = None
        return self._client

    def _spool_all(self, samples: list[MetricSample]) -> None:
        for s in samples:
            self.spool.put(s)
        self.counters.dropped = self.spool.dropped

    def publish(self, samples: list[MetricSample]) -> int:
        """Send spooled then fresh samples in timestamp order; spool on failure."""
        pending = self.spool.drain() + sorted(samples, key=lambda s: s.timestamp)
        client = self._connect()
        if client is None:
            self._spool_all(pending)
            return 0
        delivered = 0
        for i, sample in enumerate(pending):
            try:
                client.publish(sample)
                delivered += 1
            except (ConnectionLost, ConnectionError, OSError) as exc:
                log.info("publish failed, spooling: %s", exc)
                self._client = None
                self._spool_all(pending[i:])
                break
        self.counters.delivered += delivered
        return delivered

    # -- registration ---------------------------------------------------------

    def _maybe_register(self, now: int) -> None:
        if not self.dial or not self.config.directory_endpoint or not self.config.listen_endpoint:
            return
        if now < self._registered_until - (self.config.registration_ttl * 1000) // 2:
            return
        try:
            channel = self.dial(self.config.directory_endpoint)
            client = WireClient(channel, role="producer", name=f"agent:{self.config.host_path}")
            try:
                self._registered_until = client.register(
                    self.config.host_path, "agent",
                    self.config.listen_endpoint, self.config.registration_ttl)
            finally:
                client.close()
        except (ConnectionError, OSError, TimeoutError, ConnectionLost, UpstreamError) as exc:
            log.info("directory registration failed: %s", exc)

    # -- main loop --------------------------------------------------------------

    def tick(self, now: int) -> int:
        """One scheduling step: read due sensors, publish, renew lease."""
        self._maybe_register(now)
        samples = self.sample_due(now)
        if samples and self.config.emit_self_metrics:
            samples += self._self_metrics(now)
        if not samples:
            return 0
        self.counters.produced += len(samples)
        if self.on_produced is not None:
            self.on_produced(samples)
        with self._latest_lock:
            for s in samples:
                prev = self._latest.get(s.metric)
                if prev is None or s.timestamp >= prev.timestamp:
                    self._latest[s.metric] = s
        self.publish(samples)
        return len(samples)

    def run(self) -> None:
        """Wall-clock loop; tick at each due time, wake at least once a second."""
        while not self._stop.is_set():
            now = self.clock.now()
            self.tick(now)
            wake = min(self.schedule.next_due_time(), now + 1000)
            self.clock.sleep_until(max(wake, now + 50))

    def stop(self) -> None:
        self._stop.set()
        if self._client is not None:
            try:
                self._client.close()
            except Exception:
                pass

    # -- the agent's own query server ---------------------------------------------

    def latest(self, metric: str) -> Optional[MetricSample]:
        with self._latest_lock:
            return self._latest.get(metric)

    def on_query_latest(self, path: ResourcePath, metric: str, hops: int):
        if path != self.config.host_path:
            return (None, False, "agent")
        return (self.latest(metric), False, "agent")

    @property
    def accounted(self) -> tuple[int, int, int, int]:
        """(produced, delivered, spooled, dropped) - first equals sum of rest."""
        return (
            self.counters.produced,
            self.counters.delivered,
            len(self.spool),
            self.counters.dropped,
        )
