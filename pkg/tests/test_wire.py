from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import EPOCH_MS, make_sample, paths, samples, tokens
from fabmon.core import MetricSample, ResourcePath, SimClock
from fabmon.wire import (
    MalformedRecord,
    Message,
    ProtocolViolation,
    RequestError,
    SchemaViolation,
    Subscription,
    UpstreamError,
    WireClient,
    WireHandler,
    WireServer,
    connect_memory,
    decode_message,
    decode_sample,
    encode_message,
    encode_sample,
)
from fabmon.wire.codec import decode_wire_line


class TestSampleCodec:
    def test_spec_record_bytes(self):
        line = encode_sample(make_sample(ts=1000, value=0.5))
        assert line == b'{"t":1000,"p":"bnl/farm/n1","m":"cpu.load1","v":0.5,"ttl":60}\n'

    def test_text_value(self):
        line = encode_sample(make_sample(ts=1000, value="up 14 days"))
        assert line == b'{"t":1000,"p":"bnl/farm/n1","m":"cpu.load1","v":"up 14 days","ttl":60}\n'

    def test_decode_inverse(self):
        s = make_sample(ts=1000, value=0.5)
        assert decode_sample(encode_sample(s)) == s

    def test_missing_key(self):
        with pytest.raises(SchemaViolation):
            decode_sample(b'{"p":"a","m":"m","v":1,"ttl":1}\n')

    def test_extra_key_rejected(self):
        with pytest.raises(SchemaViolation):
            decode_sample(b'{"t":1,"p":"a","m":"m","v":1,"ttl":1,"x":2}\n')

    def test_truncated_line(self):
        with pytest.raises(MalformedRecord):
            decode_sample(b'{"t":1000,"p":"bnl/fa')

    def test_non_object(self):
        with pytest.raises(MalformedRecord):
            decode_sample(b"[1,2]\n")

    def test_nan_literal_rejected(self):
        with pytest.raises(MalformedRecord):
            decode_sample(b'{"t":1,"p":"a","m":"m","v":NaN,"ttl":1}\n')

    @pytest.mark.parametrize("line", [
        b'{"t":true,"p":"a","m":"m","v":1,"ttl":1}\n',
        b'{"t":1,"p":5,"m":"m","v":1,"ttl":1}\n',
        b'{"t":1,"p":"a","m":"m","v":true,"ttl":1}\n',
        b'{"t":1,"p":"a","m":"m","v":1,"ttl":"x"}\n',
        b'{"t":1,"p":"A//b","m":"m","v":1,"ttl":1}\n',
    ])
    def test_wrong_types(self, line):
        with pytest.raises(SchemaViolation):
            decode_sample(line)

    @given(samples())
    @settings(max_examples=300)
    def test_round_trip_property(self, s):
        assert decode_sample(encode_sample(s)) == s


def messages() -> st.SearchStrategy[Message]:
    sample_obj = st.builds(
        lambda s: {"t": s.timestamp, "p": str(s.path), "m": s.metric,
                   "v": s.value, "ttl": s.ttl},
        samples(),
    )
    cid = st.integers(min_value=0, max_value=2**63 - 1)
    metric_or_star = st.one_of(st.just("*"), tokens())
    path_text = st.builds(str, paths())
    return st.one_of(
        st.builds(lambda c, r, n: Message("HELLO", c, {"role": r, "name": n}),
                  cid, st.sampled_from(["producer", "consumer"]), st.text(max_size=16)),
        st.builds(lambda c, p, m, e: Message("SUBSCRIBE", c,
                                             {"prefix": p, "metric": m, "expires": e}),
                  cid, path_text, metric_or_star, st.integers(0, 2**53)),
        st.builds(lambda c, p, m: Message("UNSUBSCRIBE", c, {"prefix": p, "metric": m}),
                  cid, path_text, metric_or_star),
        st.builds(lambda c, p, m: Message("QUERY_LATEST", c, {"path": p, "metric": m}),
                  cid, path_text, tokens()),
        st.builds(lambda c, p, m, t0, t1: Message("QUERY_RANGE", c,
                                                  {"path": p, "metric": m, "t0": t0, "t1": t1}),
                  cid, path_text, tokens(), st.integers(0, 2**53), st.integers(0, 2**53)),
        st.builds(lambda c, p, k, e, t: Message("REGISTER", c,
                                                {"subtree": p, "kind": k, "endpoint": e, "ttl": t}),
                  cid, path_text, st.sampled_from(["agent", "archive", "directory"]),
                  st.text(max_size=24), st.integers(5, 86400)),
        st.builds(lambda c, p, e: Message("DEREGISTER", c, {"subtree": p, "endpoint": e}),
                  cid, path_text, st.text(max_size=24)),
        st.builds(lambda c, s: Message("REPLY", c, {"sample": s, "stale": False,
                                                    "source": "upstream"}),
                  cid, sample_obj),
        st.builds(lambda c, lst: Message("REPLY", c, {"samples": lst}),
                  cid, st.lists(sample_obj, max_size=4)),
        st.builds(lambda c, e: Message("REPLY", c, {"expires_at": e}), cid, st.integers(0, 2**53)),
        st.builds(lambda c, code, msg: Message("ERROR", c, {"code": code, "message": msg}),
                  st.one_of(st.none(), cid), tokens(), st.text(max_size=40)),
    )


class TestMessageCodec:
    @given(messages())
    @settings(max_examples=300)
    def test_round_trip(self, msg):
        assert decode_message(encode_message(msg)) == msg

    def test_unknown_kind(self):
        with pytest.raises(SchemaViolation):
            decode_message(b'{"k":"NOPE","cid":1}\n')

    def test_sample_kind_is_reserved(self):
        with pytest.raises(SchemaViolation):
            decode_message(b'{"k":"SAMPLE","cid":1}\n')

    def test_missing_required_field(self):
        with pytest.raises(SchemaViolation):
            decode_message(b'{"k":"REGISTER","cid":1,"subtree":"a","kind":"agent","ttl":60}\n')

    def test_unknown_field(self):
        with pytest.raises(SchemaViolation):
            decode_message(b'{"k":"HELLO","cid":1,"name":"x","bogus":1}\n')

    def test_cid_required(self):
        with pytest.raises(SchemaViolation):
            decode_message(b'{"k":"HELLO","name":"x"}\n')
        with pytest.raises(SchemaViolation):
            decode_message(b'{"k":"QUERY_LATEST","cid":null,"path":"a","metric":"m"}\n')

    def test_wire_line_classification(self):
        assert isinstance(decode_wire_line(encode_sample(make_sample())), MetricSample)
        assert decode_wire_line(b'{"k":"ERROR","cid":null,"code":"x","message":""}\n').kind == "ERROR"


class _StoreHandler(WireHandler):
    """Tiny handler: remembers samples, answers latest from memory."""

    def __init__(self):
        self.samples: list[MetricSample] = []
        self.bad_lines = 0

    def on_sample(self, sample):
        self.samples.append(sample)

    def on_query_latest(self, path, metric, hops):
        for s in reversed(self.samples):
            if s.path == path and s.metric == metric:
                return (s, False, "test")
        return (None, False, "test")

    def on_bad_line(self, line, error):
        self.bad_lines += 1


def _mem_pair(handler=None, clock=None):
    clock = clock or SimClock(EPOCH_MS)
    server = WireServer(handler or _StoreHandler(), clock, name="test-server")
    return server, clock


class TestSession:
    def test_hello_exchange(self):
        server, _ = _mem_pair()
        client = WireClient(connect_memory(server), role="consumer", name="c1")
        assert client.server_name == "test-server"

    def test_sample_before_hello_is_violation(self):
        server, _ = _mem_pair()
        channel = connect_memory(server)
        channel.send(encode_sample(make_sample()))
        reply = decode_message(channel.recv())
        assert reply.kind == "ERROR" and reply.body["code"] == "protocol_violation"
        assert channel.closed

    def test_double_hello_is_violation(self):
        server, _ = _mem_pair()
        channel = connect_memory(server)
        channel.send(encode_message(Message("HELLO", 1, {"role": "producer", "name": "x"})))
        channel.recv()
        channel.send(encode_message(Message("HELLO", 2, {"role": "producer", "name": "x"})))
        reply = decode_message(channel.recv())
        assert reply.body["code"] == "protocol_violation"

    def test_consumer_cannot_publish(self):
        server, _ = _mem_pair()
        channel = connect_memory(server)
        channel.send(encode_message(Message("HELLO", 1, {"role": "consumer", "name": "x"})))
        channel.recv()
        channel.send(encode_sample(make_sample()))
        assert decode_message(channel.recv()).body["code"] == "protocol_violation"
        assert channel.closed

    def test_producer_cannot_query(self):
        server, _ = _mem_pair()
        channel = connect_memory(server)
        channel.send(encode_message(Message("HELLO", 1, {"role": "producer", "name": "x"})))
        channel.recv()
        channel.send(encode_message(
            Message("QUERY_LATEST", 2, {"path": "a", "metric": "m"})))
        assert decode_message(channel.recv()).body["code"] == "protocol_violation"

    def test_publish_and_query_interleave(self):
        handler = _StoreHandler()
        server, _ = _mem_pair(handler)
        producer = WireClient(connect_memory(server), role="producer", name="p")
        consumer = WireClient(connect_memory(server), role="consumer", name="c")
        s = make_sample(value=1.25)
        producer.publish(s)
        got = consumer.query_latest(ResourcePath.parse("bnl/farm/n1"), "cpu.load1")
        assert got.sample == s

    def test_unsupported_request_gets_error(self):
        server, _ = _mem_pair()
        client = WireClient(connect_memory(server), role="producer", name="p")
        with pytest.raises(UpstreamError) as err:
            client.register(ResourcePath.parse("a"), "agent", "x:1", 60)
        assert err.value.code == "unsupported"

    def test_malformed_line_counted_not_fatal(self):
        handler = _StoreHandler()
        server, _ = _mem_pair(handler)
        client = WireClient(connect_memory(server), role="producer", name="p")
        client._channel.send(b"this is not json\n")
        client.publish(make_sample())
        assert handler.bad_lines == 1
        assert len(handler.samples) == 1

    def test_correlation_completeness(self):
        # every request gets exactly one REPLY or ERROR with its cid
        handler = _StoreHandler()
        server, _ = _mem_pair(handler)
        channel = connect_memory(server)
        channel.send(encode_message(Message("HELLO", 1, {"role": "consumer", "name": "x"})))
        requests = [
            Message("SUBSCRIBE", 2, {"prefix": "a", "metric": "*", "expires": 10}),
            Message("QUERY_LATEST", 3, {"path": "a/b", "metric": "m"}),
            Message("QUERY_RANGE", 4, {"path": "a/b", "metric": "m", "t0": 0, "t1": 1}),
            Message("UNSUBSCRIBE", 5, {"prefix": "a", "metric": "*"}),
        ]
        for m in requests:
            channel.send(encode_message(m))
        replies = []
        while True:
            line = channel.recv(timeout=0)
            if line is None:
                break
            replies.append(decode_message(line))
        hello, rest = replies[0], replies[1:]
        assert hello.kind == "HELLO" and hello.cid == 1
        assert len(rest) == len(requests)
        assert [m.cid for m in rest] == [m.cid for m in requests]
        assert all(m.kind in ("REPLY", "ERROR") for m in rest)


class TestSubscriptions:
    def test_exact_delivery(self, clock):
        server = WireServer(_StoreHandler(), clock, name="s")
        consumer = WireClient(connect_memory(server), role="consumer", name="c")
        consumer.subscribe(ResourcePath.parse("bnl/farm"), "*", expires=clock.now() + 60_000)
        matching = [make_sample(ts=EPOCH_MS + i) for i in range(2)]
        other = make_sample(path="uta/farm/n9", ts=EPOCH_MS + 5)
        for s in matching + [other]:
            server.publish(s)
        assert consumer.drain_samples() == matching

    def test_expiry_stops_delivery(self, clock):
        server = WireServer(_StoreHandler(), clock, name="s")
        consumer = WireClient(connect_memory(server), role="consumer", name="c")
        consumer.subscribe(ResourcePath.parse("bnl"), "*", expires=clock.now() + 1_000)
        assert server.publish(make_sample(ts=clock.now())) == 1
        clock.advance(1_000)  # subscription lapses exactly at expiry
        assert server.publish(make_sample(ts=clock.now())) == 0
        assert len(consumer.drain_samples()) == 1

    def test_unsubscribe(self, clock):
        server = WireServer(_StoreHandler(), clock, name="s")
        consumer = WireClient(connect_memory(server), role="consumer", name="c")
        consumer.subscribe(ResourcePath.parse("bnl"), "cpu.load1", expires=clock.now() + 60_000)
        assert consumer.unsubscribe(ResourcePath.parse("bnl"), "cpu.load1") == 1
        assert server.publish(make_sample(ts=clock.now())) == 0

    def test_filter_soundness_oracle(self, clock):
        # randomized streams against the brute-force prefix+metric filter
        rng = random.Random(1234)
        seg = ["a", "b", "c"]
        metrics = ["m1", "m2", "m3"]
        for trial in range(30):
            server = WireServer(_StoreHandler(), clock, name="s")
            consumer = WireClient(connect_memory(server), role="consumer", name="c")
            prefix = ResourcePath(tuple(rng.choice(seg) for _ in range(rng.randint(1, 2))))
            metric_filter = rng.choice(metrics + ["*"])
            sub = Subscription(prefix, metric_filter, clock.now() + 60_000)
            consumer.subscribe(prefix, metric_filter, expires=sub.expiry)
            stream = [
                make_sample(
                    path="/".join(rng.choice(seg) for _ in range(rng.randint(1, 3))),
                    metric=rng.choice(metrics),
                    ts=clock.now() + i,
                )
                for i in range(40)
            ]
            for s in stream:
                server.publish(s)
            expected = [s for s in stream if sub.matches(s)]
            assert consumer.drain_samples() == expected


class TestRequestErrors:
    def test_handler_request_error_becomes_error_reply(self, clock):
        class Rejecting(WireHandler):
            def on_query_latest(self, path, metric, hops):
                raise RequestError("no_provider", "nothing here")

        server = WireServer(Rejecting(), clock)
        client = WireClient(connect_memory(server), role="consumer", name="c")
        with pytest.raises(UpstreamError) as err:
            client.query_latest(ResourcePath.parse("a"), "m")
        assert err.value.code == "no_provider"

    def test_handler_crash_becomes_internal_error(self, clock):
        class Crashing(WireHandler):
            def on_query_latest(self, path, metric, hops):
                raise RuntimeError("boom")

        server = WireServer(Crashing(), clock)
        client = WireClient(connect_memory(server), role="consumer", name="c")
        with pytest.raises(UpstreamError) as err:
            client.query_latest(ResourcePath.parse("a"), "m")
        assert err.value.code == "internal"

    def test_protocol_violation_exception_type(self):
        assert issubclass(ProtocolViolation, RuntimeError)
