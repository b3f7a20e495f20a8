"""Line codec shared by the wire protocol and the flat-file archive segments.

One record per line, UTF-8 JSON, keys emitted in a fixed order so encoded
bytes are stable. A sample travels as a bare record:

    {"t":1000,"p":"bnl/farm/n1","m":"cpu.load1","v":0.5,"ttl":60}\n

Control messages use the same line discipline but lead with a "k" kind and
a "cid" correlation id:

    {"k":"QUERY_LATEST","cid":7,"path":"bnl/farm/n1","m... }\n

Decoding is strict: unknown keys, missing keys and wrong types are all
rejected, so a control line can never be mistaken for a sample.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

from fabmon.core import MalformedPath, MetricSample, ResourcePath, is_token


class MalformedRecord(ValueError):
    """Line is not one syntactically valid JSON object."""


class SchemaViolation(ValueError):
    """Line parsed but keys/types do not match the record or message schema."""


KINDS = (
    "HELLO",
    "SAMPLE",
    "SUBSCRIBE",
    "UNSUBSCRIBE",
    "QUERY_LATEST",
    "QUERY_RANGE",
    "REGISTER",
    "RENEW",
    "DEREGISTER",
    "REPLY",
    "ERROR",
)

PROVIDER_KINDS = ("agent", "archive", "directory")
ROLES = ("producer", "consumer")

_SAMPLE_KEYS = ("t", "p", "m", "v", "ttl")


def _reject_constant(_value):
    raise MalformedRecord("non-finite numbers are not valid records")


def _loads(line: bytes) -> dict:
    try:
        obj = json.loads(line.decode("utf-8"), parse_constant=_reject_constant)
    except MalformedRecord:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedRecord(f"bad record line: {exc}") from None
    if not isinstance(obj, dict):
        raise MalformedRecord("record line must be a JSON object")
    return obj


def encode_sample(sample: MetricSample) -> bytes:
    """Serialize one sample as a record line, trailing newline included."""
    return (
        json.dumps(
            {
                "t": sample.timestamp,
                "p": str(sample.path),
                "m": sample.metric,
                "v": sample.value,
                "ttl": sample.ttl,
            },
            separators=(",", ":"),
            ensure_ascii=False,
            allow_nan=False,
        ).encode("utf-8")
        + b"\n"
    )


def sample_from_obj(obj: dict) -> MetricSample:
    if set(obj.keys()) != set(_SAMPLE_KEYS):
        missing = set(_SAMPLE_KEYS) - set(obj.keys())
        extra = set(obj.keys()) - set(_SAMPLE_KEYS)
        raise SchemaViolation(f"sample keys off: missing={sorted(missing)} extra={sorted(extra)}")
    t, p, m, v, ttl = obj["t"], obj["p"], obj["m"], obj["v"], obj["ttl"]
    if isinstance(t, bool) or not isinstance(t, int):
        raise SchemaViolation("t must be an integer (unix ms)")
    if not isinstance(p, str):
        raise SchemaViolation("p must be a path string")
    if not isinstance(m, str):
        raise SchemaViolation("m must be a metric token")
    if isinstance(v, bool) or not isinstance(v, (int, float, str)):
        raise SchemaViolation("v must be a number or string")
    if isinstance(ttl, bool) or not isinstance(ttl, int):
        raise SchemaViolation("ttl must be an integer (seconds)")
    try:
        path = ResourcePath.parse(p)
    except MalformedPath as exc:
        raise SchemaViolation(f"bad path: {exc}") from None
    try:
        return MetricSample(path=path, metric=m, timestamp=t, value=v, ttl=ttl)
    except (TypeError, ValueError) as exc:
        raise SchemaViolation(str(exc)) from None


def sample_to_obj(sample: MetricSample) -> dict:
    return {
        "t": sample.timestamp,
        "p": str(sample.path),
        "m": sample.metric,
        "v": sample.value,
        "ttl": sample.ttl,
    }


def decode_sample(line: bytes) -> MetricSample:
    """Strict inverse of encode_sample."""
    return sample_from_obj(_loads(line))


@dataclass(frozen=True)
class Message:
    """One control message; body holds kind-specific JSON-level fields."""

    kind: str
    cid: int | None
    body: dict = field(default_factory=dict)


# Per-kind schema: field name -> (type tag, required). Encoding emits fields
# in this declaration order, which fixes the bytes for a given message.
_NULLABLE_CID = {"ERROR"}

_SCHEMAS: dict[str, tuple[tuple[str, str, bool], ...]] = {
    "HELLO": (
        ("role", "role", False),
        ("name", "str", True),
    ),
    "SUBSCRIBE": (
        ("prefix", "path", True),
        ("metric", "metric_or_star", True),
        ("expires", "int", True),
    ),
    "UNSUBSCRIBE": (
        ("prefix", "path", True),
        ("metric", "metric_or_star", True),
    ),
    "QUERY_LATEST": (
        ("path", "path", True),
        ("metric", "metric", True),
        ("hops", "int", False),
    ),
    "QUERY_RANGE": (
        ("path", "path", True),
        ("metric", "metric", True),
        ("t0", "int", True),
        ("t1", "int", True),
        ("hops", "int", False),
    ),
    "REGISTER": (
        ("subtree", "path", True),
        ("kind", "provider_kind", True),
        ("endpoint", "str", True),
        ("ttl", "int", True),
    ),
    "RENEW": (
        ("subtree", "path", True),
        ("kind", "provider_kind", True),
        ("endpoint", "str", True),
        ("ttl", "int", True),
    ),
    "DEREGISTER": (
        ("subtree", "path", True),
        ("endpoint", "str", True),
    ),
    "REPLY": (
        ("ok", "bool", False),
        ("expires_at", "int", False),
        ("sample", "sample_or_null", False),
        ("stale", "bool", False),
        ("source", "str", False),
        ("samples", "sample_list", False),
        ("removed", "int", False),
    ),
    "ERROR": (
        ("code", "str", True),
        ("message", "str", True),
    ),
}


def _check_type(name: str, tag: str, value: Any) -> None:
    if tag == "int":
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif tag == "str":
        ok = isinstance(value, str)
    elif tag == "bool":
        ok = isinstance(value, bool)
    elif tag == "role":
        ok = value in ROLES
    elif tag == "provider_kind":
        ok = value in PROVIDER_KINDS
    elif tag == "path":
        if isinstance(value, str):
            try:
                ResourcePath.parse(value)
                ok = True
            except MalformedPath:
                ok = False
        else:
            ok = False
    elif tag == "metric":
        ok = is_token(value)
    elif tag == "metric_or_star":
        ok = value == "*" or is_token(value)
    elif tag == "sample_or_null":
        if value is None:
            ok = True
        elif isinstance(value, dict):
            sample_from_obj(value)  # raises SchemaViolation itself
            ok = True
        else:
            ok = False
    elif tag == "sample_list":
        if not isinstance(value, list):
            ok = False
        else:
            for item in value:
                if not isinstance(item, dict):
                    raise SchemaViolation(f"{name} entries must be sample objects")
                sample_from_obj(item)
            ok = True
    else:  # pragma: no cover - schema table bug
        raise AssertionError(f"unknown type tag {tag}")
    if not ok:
        raise SchemaViolation(f"field {name!r} has wrong type or value")


def encode_message(msg: Message) -> bytes:
    if msg.kind not in _SCHEMAS:
        raise ValueError(f"cannot encode message kind {msg.kind!r}")
    schema = _SCHEMAS[msg.kind]
    known = {name for name, _, _ in schema}
    extra = set(msg.body) - known
    if extra:
        raise ValueError(f"unknown fields for {msg.kind}: {sorted(extra)}")
    out: dict[str, Any] = {"k": msg.kind, "cid": msg.cid}
    for name, tag, required in schema:
        if name in msg.body:
            _check_type(name, tag, msg.body[name])
            out[name] = msg.body[name]
        elif required:
            raise ValueError(f"{msg.kind} requires field {name!r}")
    return (
        json.dumps(out, separators=(",", ":"), ensure_ascii=False, allow_nan=False).encode("utf-8")
        + b"\n"
    )


def message_from_obj(obj: dict) -> Message:
    kind = obj.get("k")
    if kind == "SAMPLE":
        raise SchemaViolation("samples travel as bare record lines, not k=SAMPLE")
    if kind not in _SCHEMAS:
        raise SchemaViolation(f"unknown message kind {kind!r}")
    if "cid" not in obj:
        raise SchemaViolation("control messages need a cid")
    cid = obj["cid"]
    if cid is None:
        if kind not in _NULLABLE_CID:
            raise SchemaViolation(f"{kind} needs an integer cid")
    elif isinstance(cid, bool) or not isinstance(cid, int):
        raise SchemaViolation("cid must be an integer")
    schema = _SCHEMAS[kind]
    known = {name for name, _, _ in schema}
    extra = set(obj) - known - {"k", "cid"}
    if extra:
        raise SchemaViolation(f"unknown fields for {kind}: {sorted(extra)}")
    body = {}
    for name, tag, required in schema:
        if name in obj:
            _check_type(name, tag, obj[name])
            body[name] = obj[name]
        elif required:
            raise SchemaViolation(f"{kind} requires field {name!r}")
    return Message(kind=kind, cid=cid, body=body)


def decode_message(line: bytes) -> Message:
    obj = _loads(line)
    if "k" not in obj:
        raise SchemaViolation("not a control message (no k field)")
    return message_from_obj(obj)


def decode_wire_line(line: bytes) -> Message | MetricSample:
    """Classify and decode one wire line: control message or bare sample."""
    obj = _loads(line)
    if "k" in obj:
        return message_from_obj(obj)
    return sample_from_obj(obj)
