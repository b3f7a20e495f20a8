"""Read-only HTTP surface.

Serves the published snapshot verbatim (byte-for-byte the file on disk),
filtered site views, the directory's live registrations and telemetry
history proxied through the directory. Handlers are stateless and never
mutate anything.

    GET /healthz                         process liveness
    GET /snapshot                        current snapshot.json, verbatim
    GET /sites                           [{site, status}, ...]
    GET /sites/{site}                    one site's report
    GET /registry                        live registrations
    GET /metrics/{path...}/{metric}?from=&to=   history via the directory
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable, Optional
from urllib.parse import parse_qs, urlsplit

from fabmon.core import MalformedPath, ResourcePath
from fabmon.probe.snapshot import SCHEMA_VERSION
from fabmon.wire.client import ConnectionLost, UpstreamError, WireClient
from fabmon.wire.codec import sample_to_obj

log = logging.getLogger(__name__)


@dataclass
class SurfaceConfig:
    snapshot_dir: str = ""
    directory_endpoint: str = ""  # wire endpoint, for /metrics
    host: str = "127.0.0.1"
    port: int = 9800
    dial: Optional[Callable] = None
    # when colocated with a directory, serve /registry straight from it
    directory: object = None  # DirectoryService or None
    extra: dict = field(default_factory=dict)


class _Handler(BaseHTTPRequestHandler):
    server_version = "fabmon-surface/0.1"
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # route through logging, not stderr
        log.debug("http: " + fmt, *args)

    # -- helpers -----------------------------------------------------------

    def _send(self, code: int, body: bytes, content_type: str = "application/json") -> None:
        self.send_response(code)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _json(self, code: int, obj: dict) -> None:
        # every JSON body declares the snapshot schema version it speaks
        body = {"schema": SCHEMA_VERSION}
        body.update(obj)
        self._send(code, (json.dumps(body, sort_keys=True, indent=2) + "\n").encode())

    def _error(self, code: int, message: str) -> None:
        self._json(code, {"error": message})

    def _snapshot_bytes(self) -> bytes | None:
        cfg: SurfaceConfig = self.server.config  # type: ignore[attr-defined]
        if not cfg.snapshot_dir:
            return None
        path = Path(cfg.snapshot_dir) / "snapshot.json"
        try:
            return path.read_bytes()
        except OSError:
            return None

    # -- routes ------------------------------------------------------------

    def do_GET(self):  # noqa: N802 (stdlib naming)
        try:
            self._route()
        except BrokenPipeError:
            pass
        except Exception:
            log.exception("handler failed for %s", self.path)
            try:
                self._error(500, "internal error")
            except OSError:
                pass

    def _route(self):
        url = urlsplit(self.path)
        parts = [p for p in url.path.split("/") if p]
        cfg: SurfaceConfig = self.server.config  # type: ignore[attr-defined]

        if url.path == "/healthz":
            self._send(200, b"ok\n", "text/plain")
            return

        if url.path == "/snapshot":
            raw = self._snapshot_bytes()
            if raw is None:
                self._error(503, "no snapshot published yet")
            else:
                self._send(200, raw)
            return

        if parts and parts[0] == "sites":
            raw = self._snapshot_bytes()
            if raw is None:
                self._error(503, "no snapshot published yet")
                return
            snapshot = json.loads(raw)
            if len(parts) == 1:
                self._json(200, {"sites": [
                    {"site": s["site"], "status": s["status"]} for s in snapshot["sites"]]})
                return
            if len(parts) == 2:
                for s in snapshot["sites"]:
                    if s["site"] == parts[1]:
                        self._json(200, dict(s))
                        return
                self._error(404, f"unknown site {parts[1]!r}")
                return
            self._error(404, "not found")
            return

        if url.path == "/registry":
            if cfg.directory is not None:
                self._json(200, {"registrations": cfg.directory.registry_dump()})
                return
            # standalone surface: proxy the directory daemon's own listener
            admin = cfg.extra.get("directory_http", "")
            if not admin:
                self._error(503, "no directory attached to this surface")
                return
            import http.client

            try:
                conn = http.client.HTTPConnection(admin, timeout=5)
                conn.request("GET", "/registry")
                resp = conn.getresponse()
                self._send(resp.status, resp.read())
                conn.close()
            except OSError as exc:
                self._error(502, f"directory http unreachable: {exc}")
            return

        if parts and parts[0] == "metrics":
            if len(parts) < 3:
                self._error(404, "need /metrics/{path...}/{metric}")
                return
            if not (cfg.dial and cfg.directory_endpoint) and cfg.directory is None:
                self._error(503, "no directory configured")
                return
            path_text = "/".join(parts[1:-1])
            metric = parts[-1]
            query = parse_qs(url.query)
            try:
                path = ResourcePath.parse(path_text)
                t0 = int(query.get("from", ["0"])[0] or 0)
                t1 = int(query.get("to", [str(1 << 62)])[0] or (1 << 62))
            except (MalformedPath, ValueError) as exc:
                self._error(404, f"bad query: {exc}")
                return
            try:
                samples = self._query_range(cfg, path, metric, max(t0, 1), t1)
            except UpstreamError as exc:
                self._error(502, f"{exc.code}: {exc.message}")
                return
            except (ConnectionLost, ConnectionError, OSError, TimeoutError) as exc:
                self._error(502, str(exc))
                return
            self._json(200, {"path": path_text, "metric": metric,
                             "samples": [sample_to_obj(s) for s in samples]})
            return

        self._error(404, "not found")

    def _query_range(self, cfg: SurfaceConfig, path, metric, t0, t1):
        if cfg.directory is not None:
            return cfg.directory.query_history(path, metric, t0, t1)
        channel = cfg.dial(cfg.directory_endpoint)
        client = WireClient(channel, role="consumer", name="surface")
        try:
            return client.query_range(path, metric, t0, t1)
        finally:
            client.close()


class SurfaceServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, config: SurfaceConfig):
        self.config = config
        super().__init__((config.host, config.port), _Handler)
        self._thread: threading.Thread | None = None

    @property
    def endpoint(self) -> str:
        return f"{self.server_address[0]}:{self.server_address[1]}"

    def start(self) -> "SurfaceServer":
        self._thread = threading.Thread(target=self.serve_forever, name="surface", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        if self._thread:
            self._thread.join(timeout=5)
