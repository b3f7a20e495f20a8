"""Connection state machine shared by every daemon.

A session opens with a HELLO exchange; the dialing peer declares its role.
Producers push samples and manage registrations, consumers subscribe and
query. Messages out of state order are protocol violations and end the
session; per-message problems (bad schema, rejected sample) get an ERROR
reply and the session stays up.

The server half is transport-agnostic: a WireServer is handed decoded lines
by whatever is pumping the connection (an in-memory channel or a TCP reader
thread) and emits reply lines through the connection's send callback.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

from fabmon.core import Clock, MetricSample, ResourcePath
from fabmon.wire import codec
from fabmon.wire.codec import MalformedRecord, Message, SchemaViolation

log = logging.getLogger(__name__)

PRODUCER_KINDS = frozenset({"REGISTER", "RENEW", "DEREGISTER"})
CONSUMER_KINDS = frozenset({"SUBSCRIBE", "UNSUBSCRIBE", "QUERY_LATEST", "QUERY_RANGE"})


class ProtocolViolation(RuntimeError):
    """Message arrived out of state order; the session is closed."""


class RequestError(Exception):
    """Handler-level rejection of one request; becomes an ERROR reply."""

    def __init__(self, code: str, message: str = ""):
        super().__init__(message or code)
        self.code = code
        self.message = message or code


@dataclass(frozen=True)
class Subscription:
    prefix: ResourcePath
    metric_filter: str  # token or "*"
    expiry: int  # unix ms

    def live(self, now: int) -> bool:
        return now < self.expiry

    def matches(self, sample: MetricSample) -> bool:
        if not self.prefix.is_prefix_of(sample.path):
            return False
        return self.metric_filter == "*" or self.metric_filter == sample.metric


# (sample or None, stale flag, source label)
LatestAnswer = tuple[Optional[MetricSample], bool, str]


class WireHandler:
    """Server-side behaviour behind a wire endpoint; daemons subclass this.

    Unimplemented requests answer ERROR unsupported.
    """

    def on_sample(self, sample: MetricSample) -> None:
        raise RequestError("unsupported", "this endpoint does not accept samples")

    def on_query_latest(self, path: ResourcePath, metric: str, hops: int) -> LatestAnswer:
        raise RequestError("unsupported", "this endpoint does not answer latest queries")

    def on_query_range(
        self, path: ResourcePath, metric: str, t0: int, t1: int, hops: int
    ) -> list[MetricSample]:
        raise RequestError("unsupported", "this endpoint does not answer range queries")

    def on_register(self, subtree: ResourcePath, kind: str, endpoint: str, ttl: int) -> int:
        raise RequestError("unsupported", "this endpoint does not take registrations")

    def on_renew(self, subtree: ResourcePath, kind: str, endpoint: str, ttl: int) -> int:
        raise RequestError("unsupported", "this endpoint does not take registrations")

    def on_deregister(self, subtree: ResourcePath, endpoint: str) -> int:
        raise RequestError("unsupported", "this endpoint does not take registrations")

    def on_bad_line(self, line: bytes, error: Exception) -> None:
        """Called for undecodable data lines; override to count rejects."""


@dataclass
class Connection:
    """One peer connection tracked by a WireServer."""

    send: Callable[[bytes], None]
    server: "WireServer"
    role: str | None = None  # None until HELLO
    peer_name: str = ""
    closed: bool = False
    subscriptions: list[Subscription] = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock)

    def push(self, line: bytes) -> bool:
        with self.lock:
            if self.closed:
                return False
            try:
                self.send(line)
                return True
            except Exception:
                self.closed = True
                return False


class WireServer:
    """Protocol front-end for one daemon: sessions, dispatch, fan-out."""

    def __init__(self, handler: WireHandler, clock: Clock, name: str = "server"):
        self.handler = handler
        self.clock = clock
        self.name = name
        self._conns: list[Connection] = []
        self._subscribed: set[int] = set()  # ids of conns holding subscriptions
        self._lock = threading.Lock()

    def attach(self, send: Callable[[bytes], None]) -> Connection:
        conn = Connection(send=send, server=self)
        with self._lock:
            self._conns.append(conn)
        return conn

    def detach(self, conn: Connection) -> None:
        conn.closed = True
        with self._lock:
            self._subscribed.discard(id(conn))
            if conn in self._conns:
                self._conns.remove(conn)

    def connections(self) -> list[Connection]:
        with self._lock:
            return list(self._conns)

    # -- inbound ---------------------------------------------------------

    def handle_line(self, conn: Connection, line: bytes) -> None:
        if conn.closed:
            return
        try:
            decoded = codec.decode_wire_line(line)
        except SchemaViolation as exc:
            # valid JSON with a "k" is a broken control message; everything
            # else counts as a rejected data line
            if b'"k"' in line:
                conn.push(codec.encode_message(
                    Message("ERROR", None, {"code": "schema_violation", "message": str(exc)})))
            else:
                self.handler.on_bad_line(line, exc)
                conn.push(codec.encode_message(
                    Message("ERROR", None, {"code": "malformed_record", "message": str(exc)})))
            return
        except MalformedRecord as exc:
            self.handler.on_bad_line(line, exc)
            conn.push(codec.encode_message(
                Message("ERROR", None, {"code": "malformed_record", "message": str(exc)})))
            return

        if isinstance(decoded, MetricSample):
            self._handle_sample(conn, decoded)
        else:
            self._handle_message(conn, decoded)

    def _violation(self, conn: Connection, detail: str) -> None:
        conn.push(codec.encode_message(
            Message("ERROR", None, {"code": "protocol_violation", "message": detail})))
        conn.closed = True

    def _handle_sample(self, conn: Connection, sample: MetricSample) -> None:
        if conn.role != "producer":
            self._violation(conn, "SAMPLE requires an open producer session")
            return
        try:
            self.handler.on_sample(sample)
        except RequestError as exc:
            conn.push(codec.encode_message(
                Message("ERROR", None, {"code": exc.code, "message": exc.message})))
        except Exception:
            log.exception("sample handler failed")
            conn.push(codec.encode_message(
                Message("ERROR", None, {"code": "internal", "message": "sample handler failed"})))

    def _handle_message(self, conn: Connection, msg: Message) -> None:
        if msg.kind == "HELLO":
            if conn.role is not None:
                self._violation(conn, "duplicate HELLO")
                return
            role = msg.body.get("role")
            if role is None:
                self._violation(conn, "HELLO must declare a role")
                return
            conn.role = role
            conn.peer_name = msg.body.get("name", "")
            conn.push(codec.encode_message(Message("HELLO", msg.cid, {"name": self.name})))
            return

        if conn.role is None:
            self._violation(conn, f"{msg.kind} before HELLO")
            return
        if msg.kind in PRODUCER_KINDS and conn.role != "producer":
            self._violation(conn, f"{msg.kind} requires a producer session")
            return
        if msg.kind in CONSUMER_KINDS and conn.role != "consumer":
            self._violation(conn, f"{msg.kind} requires a consumer session")
            return
        if msg.kind in ("REPLY", "ERROR"):
            self._violation(conn, f"unexpected {msg.kind} from peer")
            return

        try:
            reply = self._dispatch(conn, msg)
        except RequestError as exc:
            reply = Message("ERROR", msg.cid, {"code": exc.code, "message": exc.message})
        except Exception:
            log.exception("request handler failed for %s", msg.kind)
            reply = Message("ERROR", msg.cid, {"code": "internal", "message": "handler failed"})
        conn.push(codec.encode_message(reply))

    def _dispatch(self, conn: Connection, msg: Message) -> Message:
        body = msg.body
        if msg.kind == "SUBSCRIBE":
            sub = Subscription(
                prefix=ResourcePath.parse(body["prefix"]),
                metric_filter=body["metric"],
                expiry=body["expires"],
            )
            conn.subscriptions.append(sub)
            with self._lock:
                self._subscribed.add(id(conn))
            return Message("REPLY", msg.cid, {"ok": True})
        if msg.kind == "UNSUBSCRIBE":
            prefix = ResourcePath.parse(body["prefix"])
            before = len(conn.subscriptions)
            conn.subscriptions = [
                s for s in conn.subscriptions
                if not (s.prefix == prefix and s.metric_filter == body["metric"])
            ]
            if not conn.subscriptions:
                with self._lock:
                    self._subscribed.discard(id(conn))
            return Message("REPLY", msg.cid, {"ok": True, "removed": before - len(conn.subscriptions)})
        if msg.kind == "QUERY_LATEST":
            sample, stale, source = self.handler.on_query_latest(
                ResourcePath.parse(body["path"]), body["metric"], body.get("hops", 0))
            reply_body = {"sample": codec.sample_to_obj(sample) if sample else None}
            if sample:
                reply_body["stale"] = stale
                reply_body["source"] = source
            return Message("REPLY", msg.cid, reply_body)
        if msg.kind == "QUERY_RANGE":
            samples = self.handler.on_query_range(
                ResourcePath.parse(body["path"]), body["metric"],
                body["t0"], body["t1"], body.get("hops", 0))
            return Message("REPLY", msg.cid, {"samples": [codec.sample_to_obj(s) for s in samples]})
        if msg.kind in ("REGISTER", "RENEW"):
            fn = self.handler.on_register if msg.kind == "REGISTER" else self.handler.on_renew
            expires_at = fn(
                ResourcePath.parse(body["subtree"]), body["kind"], body["endpoint"], body["ttl"])
            return Message("REPLY", msg.cid, {"expires_at": expires_at})
        if msg.kind == "DEREGISTER":
            removed = self.handler.on_deregister(
                ResourcePath.parse(body["subtree"]), body["endpoint"])
            return Message("REPLY", msg.cid, {"ok": True, "removed": removed})
        raise RequestError("unsupported", f"no dispatch for {msg.kind}")  # pragma: no cover

    # -- outbound fan-out --------------------------------------------------

    def publish(self, sample: MetricSample, now: int | None = None) -> int:
        """Push one sample to every consumer with a live matching subscription."""
        with self._lock:
            if not self._subscribed:
                return 0
        now = self.clock.now() if now is None else now
        line = codec.encode_sample(sample)
        delivered = 0
        for conn in self.connections():
            if conn.role != "consumer" or conn.closed:
                continue
            live = [s for s in conn.subscriptions if s.live(now)]
            if len(live) != len(conn.subscriptions):
                conn.subscriptions = live
            if any(s.matches(sample) for s in live):
                if conn.push(line):
                    delivered += 1
        return delivered
