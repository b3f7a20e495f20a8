"""fabmon command line: run daemons, query the stack, render status.

Exit codes: 0 success (absent query results included), 1 operational
failure, 2 usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import threading
import time
from pathlib import Path

from fabmon import config as cfgmod
from fabmon.core import MalformedPath, ResourcePath, SystemClock
from fabmon.archive.filestore import FileSegmentStore
from fabmon.archive.importer import Importer
from fabmon.archive.retention import RetentionPolicy, retention_sweep
from fabmon.archive.store import MemoryStore
from fabmon.agent.daemon import Agent
from fabmon.directory.service import DirectoryService
from fabmon.probe.runner import ProbeRunner
from fabmon.probe.snapshot import IoFailure, publish_snapshot
from fabmon.simfab.fabric import run_sim
from fabmon.surface.httpd import SurfaceConfig, SurfaceServer
from fabmon.surface.textview import render_text_status
from fabmon.wire.channel import TcpWireServer, parse_endpoint, tcp_dial
from fabmon.wire.client import ConnectionLost, UpstreamError, WireClient

log = logging.getLogger(__name__)


def _load(args) -> dict:
    return cfgmod.load_config(args.config) if args.config else {}


def _lease_keeper(directory_endpoint, subtrees, kind, endpoint, ttl, stop: threading.Event):
    """Keep registrations alive; retry quickly while the directory is down."""
    while not stop.is_set():
        try:
            client = WireClient(tcp_dial(directory_endpoint), role="producer", name=endpoint)
            try:
                for subtree in subtrees:
                    client.register(subtree, kind, endpoint, ttl)
            finally:
                client.close()
            stop.wait(max(5.0, ttl / 2))
        except (ConnectionError, OSError, TimeoutError, ConnectionLost, UpstreamError) as exc:
            log.info("registration with %s failed: %s", directory_endpoint, exc)
            stop.wait(5.0)


def cmd_agent_run(args) -> int:
    cfg = _load(args)
    agent_cfg = cfgmod.agent_config(cfg)
    clock = SystemClock()
    agent = Agent(agent_cfg, clock, dial=tcp_dial)
    host, port = parse_endpoint(agent_cfg.listen_endpoint)
    server = TcpWireServer(agent.server, host, port).start()
    log.info("agent %s sampling, serving on %s", agent_cfg.host_path, server.endpoint)
    try:
        agent.run()
    except KeyboardInterrupt:
        pass
    finally:
        agent.stop()
        server.stop()
    return 0


def cmd_importer_run(args) -> int:
    cfg = _load(args)
    sect = cfg.get("importer", {})
    eps = cfgmod.endpoints(cfg)
    clock = SystemClock()
    if sect.get("store", "file") == "file":
        store = FileSegmentStore(sect.get("root", "./telemetry"))
    else:
        store = MemoryStore()
    importer = Importer(store, clock)
    host, port = parse_endpoint(sect.get("listen", eps["importer"]))
    server = TcpWireServer(importer.server, host, port).start()
    log.info("importer listening on %s", server.endpoint)

    stop = threading.Event()
    subtrees = [ResourcePath.parse(s) for s in sect.get("subtrees", [])]
    if subtrees:
        threading.Thread(
            target=_lease_keeper,
            args=(sect.get("directory", eps["directory"]), subtrees, "archive",
                  sect.get("advertise", server.endpoint),
                  sect.get("registration_ttl_s", 120), stop),
            daemon=True,
        ).start()

    retention = sect.get("retention")
    try:
        next_sweep = time.monotonic() + (retention or {}).get("sweep_period_s", 3600)
        while True:
            time.sleep(1)
            if retention and time.monotonic() >= next_sweep:
                policy = RetentionPolicy(retention["max_age_s"], retention["bucket_s"])
                result = retention_sweep(store, policy, clock.now())
                log.info("retention sweep: removed %d compacted %d",
                         result.removed, result.compacted)
                next_sweep = time.monotonic() + retention.get("sweep_period_s", 3600)
    except KeyboardInterrupt:
        pass
    finally:
        stop.set()
        server.stop()
        store.close()
    return 0


def cmd_directory_run(args) -> int:
    cfg = _load(args)
    sect = cfg.get("directory", {})
    eps = cfgmod.endpoints(cfg)
    clock = SystemClock()
    service = DirectoryService(
        clock, tcp_dial,
        freshness_ttls={k: int(v) for k, v in sect.get("freshness_ttls", {}).items()},
        freshness_cap_s=sect.get("freshness_cap_s", 300),
    )
    host, port = parse_endpoint(sect.get("listen", eps["directory"]))
    server = TcpWireServer(service.server, host, port).start()
    admin_host, admin_port = parse_endpoint(sect.get("http", eps["directory_http"]))
    admin = SurfaceServer(SurfaceConfig(
        snapshot_dir=cfg.get("surface", {}).get("snapshot_dir", ""),
        host=admin_host, port=admin_port, directory=service)).start()
    log.info("directory on %s, http on %s", server.endpoint, admin.endpoint)
    try:
        while True:
            time.sleep(sect.get("sweep_period_s", 30))
            removed = service.sweep()
            if removed:
                log.info("expired %d registrations", removed)
    except KeyboardInterrupt:
        pass
    finally:
        admin.stop()
        server.stop()
    return 0


def cmd_probe_run(args) -> int:
    cfg = _load(args)
    sect = cfg.get("probe", {})
    probe_cfg = cfgmod.probe_config(cfg)
    snapshot_dir = sect.get("snapshot_dir", "./snapshots")
    clock = SystemClock()
    runner = ProbeRunner(probe_cfg, clock, dial=tcp_dial)
    cycle = 0
    try:
        while True:
            cycle += 1
            started = clock.now()
            snapshot = runner.run_cycle(cycle)
            try:
                publish_snapshot(snapshot, snapshot_dir)
            except IoFailure as exc:
                log.error("publish failed: %s", exc)
                if args.once:
                    return 1
            statuses = [h.combined for s in snapshot.sites for h in s.hosts]
            log.info("cycle %d: %d hosts, worst %s", cycle, len(statuses),
                     max(statuses).label if statuses else "n/a")
            if args.once:
                return 0
            clock.sleep_until(started + probe_cfg.cycle_period_s * 1000)
    except KeyboardInterrupt:
        return 0


def cmd_serve(args) -> int:
    cfg = _load(args)
    sect = cfg.get("surface", {})
    eps = cfgmod.endpoints(cfg)
    host, port = parse_endpoint(sect.get("listen", eps["http"]))
    server = SurfaceServer(SurfaceConfig(
        snapshot_dir=sect.get("snapshot_dir", cfg.get("probe", {}).get("snapshot_dir", "")),
        directory_endpoint=sect.get("directory", eps["directory"]),
        host=host, port=port,
        dial=tcp_dial,
        extra={"directory_http": sect.get("directory_http", eps["directory_http"])},
    ))
    log.info("surface on %s", server.endpoint)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_status(args) -> int:
    cfg = _load(args)
    snapshot_dir = args.snapshot_dir or cfg.get("surface", {}).get(
        "snapshot_dir", cfg.get("probe", {}).get("snapshot_dir", "./snapshots"))
    path = Path(snapshot_dir) / "snapshot.json"
    try:
        snapshot = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        print(f"no snapshot at {path}: {exc}", file=sys.stderr)
        return 1
    except json.JSONDecodeError as exc:
        print(f"unreadable snapshot {path}: {exc}", file=sys.stderr)
        return 1
    sys.stdout.write(render_text_status(snapshot))
    return 0


def _dir_client(args, cfg) -> WireClient:
    endpoint = args.directory or cfg.get("probe", {}).get(
        "directory", cfgmod.endpoints(cfg)["directory"])
    return WireClient(tcp_dial(endpoint), role="consumer", name="cli")


def cmd_query(args) -> int:
    cfg = _load(args)
    try:
        path = ResourcePath.parse(args.path)
    except MalformedPath as exc:
        print(f"bad path: {exc}", file=sys.stderr)
        return 2
    try:
        client = _dir_client(args, cfg)
        try:
            if args.what == "latest":
                result = client.query_latest(path, args.metric)
                if result.absent:
                    print("absent")
                else:
                    flag = " stale" if result.stale else ""
                    s = result.sample
                    print(f"{s.path} {s.metric} = {s.value} @ {s.timestamp}"
                          f" ttl={s.ttl}s source={result.source}{flag}")
            else:
                samples = client.query_range(path, args.metric, args.t0, args.t1)
                for s in samples:
                    print(f"{s.timestamp} {s.value}")
                if not samples:
                    print("absent")
        finally:
            client.close()
    except (UpstreamError, ConnectionLost, ConnectionError, OSError, TimeoutError) as exc:
        print(f"query failed: {exc}", file=sys.stderr)
        return 1
    return 0


def cmd_registry_ls(args) -> int:
    import http.client

    cfg = _load(args)
    admin = args.directory_http or cfgmod.endpoints(cfg)["directory_http"]
    try:
        conn = http.client.HTTPConnection(admin, timeout=5)
        conn.request("GET", "/registry")
        resp = conn.getresponse()
        body = resp.read()
        conn.close()
    except OSError as exc:
        print(f"directory http unreachable at {admin}: {exc}", file=sys.stderr)
        return 1
    if resp.status != 200:
        print(f"registry fetch failed: {resp.status} {body.decode(errors='replace')}",
              file=sys.stderr)
        return 1
    for entry in json.loads(body).get("registrations", []):
        print(f"{entry['subtree']:<32} {entry['kind']:<10} {entry['endpoint']:<24}"
              f" ttl={entry['ttl']}s expires_at={entry['expires_at']}")
    return 0


def cmd_sim_run(args) -> int:
    cfg = _load(args)
    sim_cfg = cfgmod.sim_config(cfg)
    overrides = {}
    if args.hosts is not None:
        overrides["n_hosts"] = args.hosts
    if args.sites is not None:
        overrides["n_sites"] = args.sites
    if args.minutes is not None:
        overrides["duration_s"] = int(args.minutes * 60)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        import dataclasses

        sim_cfg = dataclasses.replace(sim_cfg, **overrides)
    result = run_sim(sim_cfg)
    report = result.report_dict()
    if args.report:
        Path(args.report).write_bytes(result.report_bytes())
    print(f"hosts={sim_cfg.n_hosts} sites={sim_cfg.n_sites} "
          f"duration={sim_cfg.duration_s}s wall={result.wall_seconds:.1f}s")
    print(f"produced={result.produced} ingested={result.ingested} "
          f"duplicates={result.duplicates} dropped={result.dropped} "
          f"spooled={result.spooled_residual}")
    print(f"cycles={result.cycles} query_checks={result.query_checks} "
          f"query_failures={result.query_check_failures} "
          f"rollup_failures={result.rollup_failures}")
    if result.failures:
        for f in result.failures[:10]:
            print(f"FAILURE: {f}", file=sys.stderr)
        return 1
    print("all invariants held")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fabmon", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="shared JSON config file")
        return p

    agent = sub.add_parser("agent", help="host sampling daemon").add_subparsers(
        dest="action", required=True)
    with_config(agent.add_parser("run")).set_defaults(fn=cmd_agent_run)

    importer = sub.add_parser("importer", help="archive ingest daemon").add_subparsers(
        dest="action", required=True)
    with_config(importer.add_parser("run")).set_defaults(fn=cmd_importer_run)

    directory = sub.add_parser("directory", help="registry and query routing").add_subparsers(
        dest="action", required=True)
    with_config(directory.add_parser("run")).set_defaults(fn=cmd_directory_run)

    probe = sub.add_parser("probe", help="site probing daemon").add_subparsers(
        dest="action", required=True)
    probe_run = with_config(probe.add_parser("run"))
    probe_run.add_argument("--once", action="store_true", help="one cycle, then exit")
    probe_run.set_defaults(fn=cmd_probe_run)

    with_config(sub.add_parser("serve", help="read-only HTTP surface")).set_defaults(fn=cmd_serve)

    status = with_config(sub.add_parser("status", help="text status table"))
    status.add_argument("--snapshot-dir")
    status.set_defaults(fn=cmd_status)

    query = with_config(sub.add_parser("query", help="query the directory"))
    qsub = query.add_subparsers(dest="what", required=True)
    qlatest = with_config(qsub.add_parser("latest"))
    qlatest.add_argument("path")
    qlatest.add_argument("metric")
    qlatest.add_argument("--directory")
    qlatest.set_defaults(fn=cmd_query)
    qrange = with_config(qsub.add_parser("range"))
    qrange.add_argument("path")
    qrange.add_argument("metric")
    qrange.add_argument("t0", type=int)
    qrange.add_argument("t1", type=int)
    qrange.add_argument("--directory")
    qrange.set_defaults(fn=cmd_query)

    registry = sub.add_parser("registry", help="inspect registrations").add_subparsers(
        dest="action", required=True)
    reg_ls = with_config(registry.add_parser("ls"))
    reg_ls.add_argument("--directory-http", dest="directory_http")
    reg_ls.set_defaults(fn=cmd_registry_ls)

    sim = sub.add_parser("sim", help="deterministic simulated fabric").add_subparsers(
        dest="action", required=True)
    sim_run = with_config(sim.add_parser("run"))
    sim_run.add_argument("--seed", type=int)
    sim_run.add_argument("--hosts", type=int)
    sim_run.add_argument("--sites", type=int)
    sim_run.add_argument("--minutes", type=float)
    sim_run.add_argument("--report", help="write the versioned report here")
    sim_run.set_defaults(fn=cmd_sim_run)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - min(args.verbose, 2) * 10
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.fn(args)
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ConnectionError, OSError, TimeoutError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
