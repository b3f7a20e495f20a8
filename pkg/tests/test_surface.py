from __future__ import annotations

import http.client
import json
import os
import subprocess
import sys

import pytest

from conftest import EPOCH_MS, make_sample
from fabmon.core import ResourcePath, SimClock
from fabmon.archive import Importer, MemoryStore
from fabmon.directory import DirectoryService
from fabmon.probe import publish_snapshot
from fabmon.surface import SurfaceConfig, SurfaceServer, render_text_status
from fabmon.wire import connect_memory
from golden_fixtures import fixed_snapshot

P = ResourcePath.parse
GOLDEN = os.path.join(os.path.dirname(__file__), "golden")


def _get(endpoint: str, path: str):
    conn = http.client.HTTPConnection(endpoint, timeout=10)
    conn.request("GET", path)
    resp = conn.getresponse()
    body = resp.read()
    conn.close()
    return resp.status, body


@pytest.fixture
def stack(tmp_path):
    """Published snapshot + directory + archive behind a surface server."""
    clock = SimClock(EPOCH_MS)
    store = MemoryStore()
    importer = Importer(store, clock)
    directory = DirectoryService(
        clock, lambda ep, timeout=None: connect_memory(importer.server), name="dir")
    directory.registry.register(P("bnl"), "archive", "arch:1", 6000, clock.now())
    for i in range(5):
        store.append(make_sample(ts=EPOCH_MS + i * 1000, value=i))
    publish_snapshot(fixed_snapshot(), tmp_path)
    server = SurfaceServer(SurfaceConfig(
        snapshot_dir=str(tmp_path), host="127.0.0.1", port=0, directory=directory)).start()
    yield server, tmp_path, store
    server.stop()


class TestHttp:
    def test_healthz(self, stack):
        server, _, _ = stack
        status, body = _get(server.endpoint, "/healthz")
        assert (status, body) == (200, b"ok\n")

    def test_snapshot_verbatim(self, stack):
        server, tmp_path, _ = stack
        status, body = _get(server.endpoint, "/snapshot")
        assert status == 200
        assert body == (tmp_path / "snapshot.json").read_bytes()

    def test_sites_listing(self, stack):
        server, _, _ = stack
        status, body = _get(server.endpoint, "/sites")
        assert status == 200
        assert json.loads(body) == {
            "schema": 1,
            "sites": [
                {"site": "bnl", "status": "fail"},
                {"site": "uta", "status": "unreachable"},
            ],
        }

    def test_single_site(self, stack):
        server, _, _ = stack
        status, body = _get(server.endpoint, "/sites/bnl")
        assert status == 200
        site = json.loads(body)
        assert site["schema"] == 1
        assert site["site"] == "bnl"
        assert [h["host"] for h in site["hosts"]] == ["bnl/farm/n1", "bnl/farm/n2"]

    def test_unknown_site_404(self, stack):
        server, _, _ = stack
        assert _get(server.endpoint, "/sites/unknown")[0] == 404

    def test_unknown_path_404(self, stack):
        server, _, _ = stack
        assert _get(server.endpoint, "/bogus")[0] == 404

    def test_registry_dump(self, stack):
        server, _, _ = stack
        status, body = _get(server.endpoint, "/registry")
        assert status == 200
        payload = json.loads(body)
        assert payload["schema"] == 1
        entries = payload["registrations"]
        assert [e["subtree"] for e in entries] == ["bnl"]
        assert entries[0]["kind"] == "archive"

    def test_metrics_range_equals_direct_query(self, stack):
        server, _, store = stack
        status, body = _get(
            server.endpoint,
            f"/metrics/bnl/farm/n1/cpu.load1?from={EPOCH_MS}&to={EPOCH_MS + 3000}")
        assert status == 200
        payload = json.loads(body)
        assert payload["schema"] == 1
        got = payload["samples"]
        direct = store.range(P("bnl/farm/n1"), "cpu.load1", EPOCH_MS, EPOCH_MS + 3000)
        assert [s["t"] for s in got] == [s.timestamp for s in direct]
        assert [s["v"] for s in got] == [s.value for s in direct]

    def test_no_snapshot_yet_503(self, tmp_path):
        server = SurfaceServer(SurfaceConfig(
            snapshot_dir=str(tmp_path / "empty"), host="127.0.0.1", port=0)).start()
        try:
            assert _get(server.endpoint, "/snapshot")[0] == 503
            assert _get(server.endpoint, "/sites")[0] == 503
        finally:
            server.stop()

    def test_registry_proxied_from_directory_daemon(self, stack, tmp_path):
        # a standalone surface forwards /registry to the directory's listener
        colocated, _, _ = stack
        standalone = SurfaceServer(SurfaceConfig(
            snapshot_dir=str(tmp_path), host="127.0.0.1", port=0,
            extra={"directory_http": colocated.endpoint})).start()
        try:
            status, body = _get(standalone.endpoint, "/registry")
            assert status == 200
            assert json.loads(body) == json.loads(_get(colocated.endpoint, "/registry")[1])
        finally:
            standalone.stop()

    def test_registry_unavailable_503(self, tmp_path):
        server = SurfaceServer(SurfaceConfig(
            snapshot_dir=str(tmp_path), host="127.0.0.1", port=0)).start()
        try:
            assert _get(server.endpoint, "/registry")[0] == 503
        finally:
            server.stop()

    def test_read_only_surface(self, stack):
        server, tmp_path, store = stack
        before = (tmp_path / "snapshot.json").read_bytes()
        keys_before = store.keys()
        for path in ("/snapshot", "/sites", "/sites/bnl", "/registry",
                     f"/metrics/bnl/farm/n1/cpu.load1?from=1&to={EPOCH_MS + 9000}"):
            _get(server.endpoint, path)
        assert (tmp_path / "snapshot.json").read_bytes() == before
        assert store.keys() == keys_before


class TestTextView:
    def test_golden_rendering(self):
        snapshot = json.loads(open(os.path.join(GOLDEN, "snapshot.json")).read())
        text = render_text_status(snapshot)
        assert text == open(os.path.join(GOLDEN, "status.txt")).read()

    def test_worst_site_first(self):
        snapshot = json.loads(open(os.path.join(GOLDEN, "snapshot.json")).read())
        lines = render_text_status(snapshot).splitlines()
        site_lines = [l for l in lines if l.startswith("SITE")]
        assert site_lines[0].startswith("SITE uta")  # unreachable beats fail

    def test_missing_values_render_dash(self):
        snapshot = json.loads(open(os.path.join(GOLDEN, "snapshot.json")).read())
        row = next(l for l in render_text_status(snapshot).splitlines()
                   if l.startswith("uta/farm/n1"))
        assert row.split()[2:] == ["-", "-", "-", "-"]

    def test_pure_function(self):
        snapshot = json.loads(open(os.path.join(GOLDEN, "snapshot.json")).read())
        assert render_text_status(snapshot) == render_text_status(snapshot)

    def test_latest_overrides(self):
        snapshot = json.loads(open(os.path.join(GOLDEN, "snapshot.json")).read())
        text = render_text_status(snapshot, {"uta/farm/n1": {"cpu_load1": 9.99}})
        row = next(l for l in text.splitlines() if l.startswith("uta/farm/n1"))
        assert "9.99" in row


def _cli(*args, **kwargs):
    return subprocess.run(
        [sys.executable, "-m", "fabmon.surface.cli", *args],
        capture_output=True, text=True, timeout=120, **kwargs)


class TestCli:
    def test_unknown_subcommand_exits_2(self):
        proc = _cli("frobnicate")
        assert proc.returncode == 2
        assert "invalid choice" in proc.stderr

    def test_missing_args_exit_2(self):
        assert _cli("query", "latest").returncode == 2

    def test_status_renders_snapshot(self, tmp_path):
        publish_snapshot(fixed_snapshot(), tmp_path)
        proc = _cli("status", "--snapshot-dir", str(tmp_path))
        assert proc.returncode == 0
        assert proc.stdout == open(os.path.join(GOLDEN, "status.txt")).read()

    def test_status_without_snapshot_exits_1(self, tmp_path):
        proc = _cli("status", "--snapshot-dir", str(tmp_path / "nope"))
        assert proc.returncode == 1

    def test_sim_run_reports(self, tmp_path):
        report = tmp_path / "report.json"
        proc = _cli("sim", "run", "--hosts", "6", "--sites", "2",
                    "--minutes", "2", "--seed", "5", "--report", str(report))
        assert proc.returncode == 0, proc.stderr
        assert "all invariants held" in proc.stdout
        data = json.loads(report.read_text())
        assert data["schema"] == 1
        assert data["counts"]["produced"] == data["counts"]["ingested"]

    def test_sim_run_deterministic_reports(self, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        for out in (a, b):
            proc = _cli("sim", "run", "--hosts", "4", "--sites", "2",
                        "--minutes", "2", "--seed", "9", "--report", str(out))
            assert proc.returncode == 0
        assert a.read_bytes() == b.read_bytes()

    def test_query_against_unreachable_directory_exits_1(self):
        proc = _cli("query", "latest", "bnl/farm/n1", "cpu.load1",
                    "--directory", "127.0.0.1:9")
        assert proc.returncode == 1
