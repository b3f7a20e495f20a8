"""Client side of the wire protocol: hello, publish, subscribe, query, register."""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass
from typing import Optional

from fabmon.core import MetricSample, ResourcePath
from fabmon.wire import codec
from fabmon.wire.codec import Message
from fabmon.wire.session import ProtocolViolation


class ConnectionLost(ConnectionError):
    """Transport died or the server closed the session."""


class UpstreamError(Exception):
    """ERROR reply from the server, keyed by its code."""

    def __init__(self, code: str, message: str = ""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code
        self.message = message


@dataclass(frozen=True)
class LatestResult:
    sample: Optional[MetricSample]
    stale: bool = False
    source: str = "none"  # cache | upstream | none

    @property
    def absent(self) -> bool:
        return self.sample is None


class WireClient:
    """One session over a channel; does the HELLO exchange on construction."""

    def __init__(self, channel, role: str, name: str = "", timeout: float | None = 5.0):
        self._channel = channel
        self._cids = itertools.count(1)
        self._lock = threading.Lock()
        self._pushed: list[MetricSample] = []
        self.role = role
        self.name = name
        self.timeout = timeout
        self._hello()

    def _hello(self) -> None:
        reply = self._request("HELLO", {"role": self.role, "name": self.name})
        if reply.kind != "HELLO":
            raise ProtocolViolation(f"expected HELLO reply, got {reply.kind}")
        self.server_name = reply.body.get("name", "")

    def _send(self, line: bytes) -> None:
        try:
            self._channel.send(line)
        except (ConnectionError, OSError) as exc:
            raise ConnectionLost(str(exc)) from exc

    def _request(self, kind: str, body: dict) -> Message:
        with self._lock:
            cid = next(self._cids)
            self._send(codec.encode_message(Message(kind, cid, body)))
            while True:
                try:
                    line = self._channel.recv(self.timeout)
                except TimeoutError as exc:
                    raise ConnectionLost(f"no reply to {kind}: {exc}") from None
                if line is None:
                    raise ConnectionLost(f"session closed awaiting reply to {kind}")
                decoded = codec.decode_wire_line(line)
                if isinstance(decoded, MetricSample):
                    self._pushed.append(decoded)
                    continue
                if decoded.cid != cid:
                    # ERROR replies to pushed samples carry a null cid; skip them
                    if decoded.kind == "ERROR" and decoded.cid is None:
                        continue
                    raise ProtocolViolation(f"correlation id mismatch: {decoded}")
                if decoded.kind == "ERROR":
                    raise UpstreamError(decoded.body["code"], decoded.body.get("message", ""))
                return decoded

    # -- producer verbs ---------------------------------------------------

    def publish(self, sample: MetricSample) -> None:
        with self._lock:
            self._send(codec.encode_sample(sample))

    def register(self, subtree: ResourcePath, kind: str, endpoint: str, ttl: int) -> int:
        reply = self._request("REGISTER", {
            "subtree": str(subtree), "kind": kind, "endpoint": endpoint, "ttl": ttl})
        return reply.body["expires_at"]

    def renew(self, subtree: ResourcePath, kind: str, endpoint: str, ttl: int) -> int:
        reply = self._request("RENEW", {
            "subtree": str(subtree), "kind": kind, "endpoint": endpoint, "ttl": ttl})
        return reply.body["expires_at"]

    def deregister(self, subtree: ResourcePath, endpoint: str) -> int:
        reply = self._request("DEREGISTER", {"subtree": str(subtree), "endpoint": endpoint})
        return reply.body.get("removed", 0)

    # -- consumer verbs ---------------------------------------------------

    def subscribe(self, prefix: ResourcePath, metric: str, expires: int) -> None:
        self._request("SUBSCRIBE", {"prefix": str(prefix), "metric": metric, "expires": expires})

    def unsubscribe(self, prefix: ResourcePath, metric: str) -> int:
        reply = self._request("UNSUBSCRIBE", {"prefix": str(prefix), "metric": metric})
        return reply.body.get("removed", 0)

    def query_latest(self, path: ResourcePath, metric: str, hops: int = 0) -> LatestResult:
        body = {"path": str(path), "metric": metric}
        if hops:
            body["hops"] = hops
        reply = self._request("QUERY_LATEST", body)
        obj = reply.body.get("sample")
        if obj is None:
            return LatestResult(None)
        return LatestResult(
            sample=codec.sample_from_obj(obj),
            stale=reply.body.get("stale", False),
            source=reply.body.get("source", "upstream"),
        )

    def query_range(
        self, path: ResourcePath, metric: str, t0: int, t1: int, hops: int = 0
    ) -> list[MetricSample]:
        body = {"path": str(path), "metric": metric, "t0": t0, "t1": t1}
        if hops:
            body["hops"] = hops
        reply = self._request("QUERY_RANGE", body)
        return [codec.sample_from_obj(o) for o in reply.body.get("samples", [])]

    # -- pushed stream -----------------------------------------------------

    def drain_samples(self, timeout: float = 0) -> list[MetricSample]:
        """Collect samples pushed for our subscriptions (plus any buffered)."""
        out, self._pushed = self._pushed, []
        while True:
            try:
                line = self._channel.recv(timeout if not out else 0)
            except TimeoutError:
                break
            if line is None:
                break
            decoded = codec.decode_wire_line(line)
            if isinstance(decoded, MetricSample):
                out.append(decoded)
            elif decoded.kind == "ERROR" and decoded.cid is None:
                continue
            else:
                raise ProtocolViolation(f"unexpected {decoded.kind} outside a request")
        return out

    def close(self) -> None:
        self._channel.close()
