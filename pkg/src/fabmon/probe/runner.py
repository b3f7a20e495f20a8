"""Blackbox probing: test sequences per host, rolled up per site.

Steps run strictly in order within a host; a failed connect marks the host
unreachable and skips the rest. Hosts run concurrently up to the configured
fanout. Failures are data, never exceptions: every configured host appears
in every cycle's snapshot with a status and a transcript.

Built-in step kinds:
    tcp_connect        reach the host's agent endpoint
    directory_query    expect the directory to hold a metric for this host
    consistency        evaluate the consistency rules over fetched values
    latest_freshness   bound the age of the newest sample of one metric
"""

from __future__ import annotations

import logging
import socket
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

from fabmon.core import Clock, MetricSample, ResourcePath, Status, combine_status
from fabmon.probe.checks import ConsistencyRule, consistency_check
from fabmon.probe.snapshot import SiteReport, Snapshot
from fabmon.wire.client import ConnectionLost, LatestResult, UpstreamError, WireClient

log = logging.getLogger(__name__)

STEP_KINDS = ("tcp_connect", "directory_query", "consistency", "latest_freshness")

DISPLAY_METRICS = ("cpu.load1", "sys.uptime_s", "sys.idle_s")


@dataclass(frozen=True)
class StepSpec:
    kind: str
    name: str
    params: dict = field(default_factory=dict)
    timeout: float = 5.0

    def __post_init__(self):
        if self.kind not in STEP_KINDS:
            raise ValueError(f"unknown step kind {self.kind!r}")


@dataclass
class TestStep:
    name: str
    status: Status
    transcript: list[str]
    started_at: int
    duration_ms: int
    skipped: bool = False

    def __post_init__(self):
        if self.status in (Status.FAIL, Status.UNREACHABLE) and not self.transcript:
            raise ValueError(f"step {self.name} failed without a transcript")


@dataclass(frozen=True)
class HostSpec:
    path: ResourcePath
    endpoint: str


@dataclass
class HostReport:
    host: ResourcePath
    steps: list[TestStep]
    combined: Status
    values: dict = field(default_factory=dict)  # display values for the text view
    duration_ms: int = 0


@dataclass
class ConnectResult:
    ok: bool
    latency_ms: float
    detail: str = ""


class TcpProber:
    def connect(self, endpoint: str, timeout: float) -> ConnectResult:
        host, _, port = endpoint.rpartition(":")
        start = time.perf_counter()
        try:
            sock = socket.create_connection((host, int(port)), timeout=timeout)
            sock.close()
        except (OSError, ValueError) as exc:
            return ConnectResult(False, (time.perf_counter() - start) * 1000, str(exc))
        return ConnectResult(True, (time.perf_counter() - start) * 1000)


@dataclass
class ProbeConfig:
    sites: dict[str, list[HostSpec]]
    sequence: list[StepSpec]
    rules: list[ConsistencyRule] = field(default_factory=list)
    cycle_period_s: int = 300
    fanout: int = 16
    directory_endpoint: str = ""
    display_metrics: tuple = DISPLAY_METRICS


class ThreadDriver:
    """Real concurrency: a bounded pool, wall clock."""

    def __init__(self, fanout: int):
        self.fanout = max(1, fanout)

    def run(self, hosts, run_host):
        if self.fanout == 1 or len(hosts) <= 1:
            return [run_host(h) for h in hosts]
        with ThreadPoolExecutor(max_workers=self.fanout) as pool:
            return list(pool.map(run_host, hosts))


class SimBatchDriver:
    """Deterministic fanout model for simulated time.

    Hosts run in batches of the fanout size; each batch starts at one clock
    reading and the clock then advances by the slowest host in the batch,
    which is what a real pool would cost.
    """

    def __init__(self, fanout: int, clock, advance: bool = True):
        self.fanout = max(1, fanout)
        self.clock = clock
        self.advance = advance

    def run(self, hosts, run_host):
        reports = []
        for i in range(0, len(hosts), self.fanout):
            batch = [run_host(h) for h in hosts[i:i + self.fanout]]
            reports.extend(batch)
            cost = max((r.duration_ms for r in batch), default=0)
            if cost and self.advance and hasattr(self.clock, "advance"):
                self.clock.advance(cost)
        return reports


class ProbeRunner:
    def __init__(
        self,
        config: ProbeConfig,
        clock: Clock,
        dial: Callable | None = None,
        prober=None,
        driver=None,
    ):
        self.config = config
        self.clock = clock
        self.dial = dial
        self.prober = prober or TcpProber()
        self.driver = driver or ThreadDriver(config.fanout)
        self.cycles_completed = 0

    # -- directory access ---------------------------------------------------

    def _dir_client(self) -> Optional[WireClient]:
        if not self.dial or not self.config.directory_endpoint:
            return None
        try:
            channel = self.dial(self.config.directory_endpoint)
            return WireClient(channel, role="consumer", name="probe")
        except (ConnectionError, OSError, TimeoutError, ConnectionLost) as exc:
            log.info("directory unreachable: %s", exc)
            return None

    def _query_latest(self, client, path, metric) -> tuple[Optional[LatestResult], str]:
        """(result, error detail); result None means the query itself failed."""
        if client is None:
            return None, "no directory configured or reachable"
        try:
            return client.query_latest(path, metric), ""
        except UpstreamError as exc:
            return None, f"{exc.code}: {exc.message}"
        except (ConnectionLost, ConnectionError, OSError, TimeoutError) as exc:
            return None, str(exc)

    # -- steps ----------------------------------------------------------------

    def _run_step(self, step: StepSpec, host: HostSpec, client, now: int) -> TestStep:
        lines: list[str] = []
        hint_ms = 0

        if step.kind == "tcp_connect":
            endpoint = step.params.get("endpoint", host.endpoint)
            res = self.prober.connect(endpoint, step.timeout)
            hint_ms = int(res.latency_ms)
            if res.ok:
                status = Status.PASS
                lines.append(f"{step.name}: connected to {endpoint}")
            else:
                status = Status.UNREACHABLE
                lines.append(f"{step.name}: cannot reach {endpoint}: {res.detail}")

        elif step.kind == "directory_query":
            metric = step.params.get("metric", "cpu.load1")
            expect_present = step.params.get("expect_present", True)
            result, err = self._query_latest(client, host.path, metric)
            if result is None:
                status = Status.FAIL
                lines.append(f"{step.name}: query {host.path}/{metric} failed: {err}")
            elif result.absent:
                if expect_present:
                    status = Status.FAIL
                    lines.append(f"{step.name}: no value for {host.path}/{metric}")
                else:
                    status = Status.PASS
                    lines.append(f"{step.name}: {host.path}/{metric} absent as expected")
            else:
                status = Status.PASS
                stale = " (stale)" if result.stale else ""
                lines.append(
                    f"{step.name}: {host.path}/{metric} = {result.sample.value}{stale}")

        elif step.kind == "consistency":
            rules = step.params.get("rules", self.config.rules)
            observed: list[tuple[MetricSample, bool]] = []
            for metric in sorted({r.metric for r in rules}):
                result, err = self._query_latest(client, host.path, metric)
                if result is None:
                    lines.append(f"{step.name}: fetch {metric} failed: {err}")
                elif result.sample is not None:
                    observed.append((result.sample, result.stale))
            violations = consistency_check(observed, rules, now)
            if violations:
                status = combine_status(v.rule.on_violation for v in violations)
                for v in violations:
                    lines.append(f"{step.name}: violation: {v.describe()}")
            else:
                status = Status.PASS
                lines.append(f"{step.name}: {len(observed)} values within bounds")

        elif step.kind == "latest_freshness":
            metric = step.params.get("metric", "cpu.load1")
            max_age_s = step.params.get("max_age_s", 300)
            result, err = self._query_latest(client, host.path, metric)
            if result is None or result.absent:
                status = Status.FAIL
                why = err or "no sample at all"
                lines.append(f"{step.name}: no fresh {metric} for {host.path}: {why}")
            elif result.stale:
                status = Status.FAIL
                lines.append(f"{step.name}: {metric} served stale")
            else:
                age_s = (now - result.sample.timestamp) / 1000.0
                if age_s > max_age_s:
                    status = Status.FAIL
                    lines.append(f"{step.name}: {metric} is {age_s:.1f}s old, limit {max_age_s}s")
                else:
                    status = Status.PASS
                    lines.append(f"{step.name}: {metric} age {age_s:.1f}s within {max_age_s}s")

        else:  # pragma: no cover - StepSpec validates kinds
            raise AssertionError(step.kind)

        return TestStep(
            name=step.name, status=status, transcript=lines,
            started_at=now, duration_ms=hint_ms)

    def run_test_sequence(self, host: HostSpec) -> HostReport:
        """Run all steps against one host; connect failure short-circuits."""
        started = self.clock.now()
        client = self._dir_client()
        steps: list[TestStep] = []
        unreachable = False
        try:
            for spec in self.config.sequence:
                now = self.clock.now()
                if unreachable:
                    steps.append(TestStep(
                        name=spec.name, status=Status.UNREACHABLE,
                        transcript=[f"{spec.name}: skipped, host unreachable"],
                        started_at=now, duration_ms=0, skipped=True))
                    continue
                wall0 = time.perf_counter()
                step = self._run_step(spec, host, client, now)
                measured = int((time.perf_counter() - wall0) * 1000)
                step.duration_ms = max(step.duration_ms, measured)
                steps.append(step)
                if spec.kind == "tcp_connect" and step.status is Status.UNREACHABLE:
                    unreachable = True
            values = self._display_values(host, client)
        finally:
            if client is not None:
                client.close()
        return HostReport(
            host=host.path,
            steps=steps,
            combined=combine_status(s.status for s in steps),
            values=values,
            duration_ms=sum(s.duration_ms for s in steps),
        )

    def _display_values(self, host: HostSpec, client) -> dict:
        """The dynamic numbers the text view shows: load, uptime, idle, age."""
        values: dict = {"cpu_load1": None, "uptime_s": None, "idle_s": None, "age_s": None}
        field_by_metric = {"cpu.load1": "cpu_load1", "sys.uptime_s": "uptime_s",
                           "sys.idle_s": "idle_s"}
        for metric in self.config.display_metrics:
            result, _ = self._query_latest(client, host.path, metric)
            if result is None or result.sample is None:
                continue
            name = field_by_metric.get(metric)
            if name:
                values[name] = result.sample.value
            if metric == "cpu.load1":
                values["age_s"] = round((self.clock.now() - result.sample.timestamp) / 1000.0, 3)
        return values

    # -- cycles -------------------------------------------------------------------

    def run_cycle(self, cycle: int) -> Snapshot:
        started_at = self.clock.now()
        site_reports = []
        for site in sorted(self.config.sites):
            hosts = sorted(self.config.sites[site], key=lambda h: h.path.components)
            reports = self.driver.run(hosts, self.run_test_sequence)
            site_reports.append(SiteReport(
                site=site,
                hosts=reports,
                combined=combine_status(r.combined for r in reports),
                cycle_started_at=started_at,
            ))
        return Snapshot(
            cycle=cycle,
            started_at=started_at,
            completed_at=self.clock.now(),
            sites=site_reports,
        )
