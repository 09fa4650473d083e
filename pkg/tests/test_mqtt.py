"""MQTT codec, topic matching, broker routing, and QoS 1 resilience."""
from __future__ import annotations

import random
import socket
import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chambertwin.mqtt import (
    Connack,
    Connect,
    Disconnect,
    IncompletePacket,
    MiniBroker,
    MqttClient,
    MqttError,
    Pingreq,
    Pingresp,
    Puback,
    Publish,
    Suback,
    Subscribe,
    decode_packet,
    decode_varint,
    encode_packet,
    encode_varint,
    topic_matches,
)
from mqtt_proxy import LossyMqttProxy


class TestVarint:
    @pytest.mark.parametrize(
        "value,wire",
        [
            (0, "00"),
            (127, "7f"),
            (128, "8001"),
            (321, "c102"),
            (16_383, "ff7f"),
            (268_435_455, "ffffff7f"),
        ],
    )
    def test_known_encodings(self, value, wire):
        assert encode_varint(value) == bytes.fromhex(wire)
        assert decode_varint(bytes.fromhex(wire), 0) == (value, len(wire) // 2)

    @given(st.integers(0, 268_435_455))
    def test_round_trip(self, value):
        assert decode_varint(encode_varint(value), 0)[0] == value

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            encode_varint(268_435_456)

    def test_overlong_continuation_names_offset(self):
        with pytest.raises(MqttError, match="offset 4"):
            decode_varint(b"\x80\x80\x80\x80\x80", 1)


class TestPacketCodec:
    @pytest.mark.parametrize(
        "packet",
        [
            Connect("gw-1", 30, True),
            Connack(False, 0),
            Publish("stability/default/A/telemetry", b'{"x":1}', 0),
            Publish("t", b"payload", 1, 7, dup=True),
            Puback(42),
            Subscribe(3, (("stability/#", 1), ("other/+", 0))),
            Suback(3, (1, 0)),
            Pingreq(),
            Pingresp(),
            Disconnect(),
        ],
    )
    def test_round_trip(self, packet):
        wire = encode_packet(packet)
        decoded, used = decode_packet(wire)
        assert decoded == packet
        assert used == len(wire)

    @settings(max_examples=150, deadline=None)
    @given(
        topic=st.text(
            st.characters(min_codepoint=33, max_codepoint=126),
            min_size=1,
            max_size=40,
        ),
        payload=st.binary(max_size=256),
        qos=st.sampled_from([0, 1]),
        dup=st.booleans(),
        retain=st.booleans(),
        packet_id=st.integers(1, 0xFFFF),
    )
    def test_publish_round_trip_property(self, topic, payload, qos, dup, retain, packet_id):
        packet = Publish(topic, payload, qos, packet_id if qos else 0, dup, retain)
        decoded, _ = decode_packet(encode_packet(packet))
        assert decoded == packet

    def test_qos2_rejected_on_decode(self):
        wire = bytearray(encode_packet(Publish("t", b"", 1, 5)))
        wire[0] = (wire[0] & 0xF0) | 0x04  # QoS bits = 2
        with pytest.raises(MqttError, match="QoS 2"):
            decode_packet(bytes(wire))

    def test_qos1_needs_packet_id(self):
        with pytest.raises(ValueError):
            encode_packet(Publish("t", b"", 1, 0))

    def test_truncated_body_incomplete(self):
        wire = encode_packet(Publish("topic", b"data", 0))
        with pytest.raises(IncompletePacket):
            decode_packet(wire[:-3])

    def test_bad_protocol_name(self):
        wire = bytearray(encode_packet(Connect("c")))
        wire[4] ^= 0x20
        with pytest.raises(MqttError, match="protocol name"):
            decode_packet(bytes(wire))


class TestTopicMatching:
    @pytest.mark.parametrize(
        "topic_filter,topic,expected",
        [
            ("stability/+/A/telemetry", "stability/default/A/telemetry", True),
            ("stability/+/A/telemetry", "stability/default/B/telemetry", False),
            ("#", "anything/at/all", True),
            ("#", "x", True),
            ("stability/#", "stability/default/A/telemetry", True),
            ("stability/#", "stab/x", False),
            ("stability/#", "stability", True),
            ("+", "a/b", False),
            ("a/b", "a/b", True),
            ("a/b", "a/B", False),
            ("a/+/c", "a//c", True),
        ],
    )
    def test_table(self, topic_filter, topic, expected):
        assert topic_matches(topic_filter, topic) is expected


def _free_port() -> int:
    with socket.socket() as probe:
        probe.bind(("127.0.0.1", 0))
        return probe.getsockname()[1]


def _collecting_subscriber(broker_addr, topic_filter, client_id="sub"):
    received: list[Publish] = []
    sub = MqttClient(*broker_addr, client_id)
    sub.subscribe(topic_filter, received.append)
    sub.connect()
    return sub, received


def _await(predicate, timeout_s=5.0):
    deadline = time.monotonic() + timeout_s
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(0.01)
    return False


class TestBrokerAndClient:
    def test_publish_routes_to_matching_subscriber(self):
        with MiniBroker() as broker:
            sub, received = _collecting_subscriber(broker.address, "stability/+/A/telemetry")
            pub = MqttClient(*broker.address, "pub")
            pub.connect()
            assert pub.publish("stability/default/A/telemetry", b"hello", qos=1)
            pub.publish("stability/default/B/telemetry", b"other", qos=1)
            assert _await(lambda: len(received) == 1)
            time.sleep(0.1)
            assert [p.payload for p in received] == [b"hello"]
            assert received[0].topic == "stability/default/A/telemetry"
            pub.disconnect()
            sub.disconnect()

    def test_qos0_delivery(self):
        with MiniBroker() as broker:
            sub, received = _collecting_subscriber(broker.address, "#")
            pub = MqttClient(*broker.address, "pub")
            pub.connect()
            pub.publish("a/b", b"fire-and-forget", qos=0)
            assert _await(lambda: received)
            assert received[0].qos == 0
            pub.disconnect()
            sub.disconnect()

    def test_in_order_delivery(self):
        with MiniBroker() as broker:
            sub, received = _collecting_subscriber(broker.address, "seq/#")
            pub = MqttClient(*broker.address, "pub")
            pub.connect()
            for i in range(50):
                assert pub.publish("seq/x", str(i).encode(), qos=1)
            assert _await(lambda: len(received) == 50)
            assert [int(p.payload) for p in received] == list(range(50))
            pub.disconnect()
            sub.disconnect()

    def test_offline_queue_and_backoff_then_flush(self):
        port = _free_port()
        fake_now = [1000.0]
        client = MqttClient(
            "127.0.0.1",
            port,
            "gw",
            sleep_fn=lambda s: None,
            clock=lambda: fake_now[0],
        )
        for i in range(3):
            assert not client.publish("q/t", str(i).encode(), qos=1)
            fake_now[0] += 120.0  # let every backoff window expire
        assert client.reconnect_delays == [1.0, 2.0, 4.0]
        assert len(client.queue) == 3

        with MiniBroker(port=port) as broker:
            sub, received = _collecting_subscriber(broker.address, "q/#")
            fake_now[0] += 120.0
            assert client.publish("q/t", b"3", qos=1)
            assert _await(lambda: len(received) == 4)
            assert [p.payload for p in received] == [b"0", b"1", b"2", b"3"]
            client.disconnect()
            sub.disconnect()

    def test_bounded_queue_drops_oldest(self):
        client = MqttClient("127.0.0.1", _free_port(), "gw", queue_limit=5,
                            sleep_fn=lambda s: None, clock=lambda: 0.0)
        for i in range(8):
            client.publish("t", str(i).encode(), qos=1)
        assert client.dropped_count == 3
        assert [p for _, p, _ in client.queue] == [b"3", b"4", b"5", b"6", b"7"]

    def test_ping_round_trip(self):
        with MiniBroker() as broker:
            client = MqttClient(*broker.address, "p")
            client.connect()
            assert client._send(Pingreq())
            time.sleep(0.1)
            assert client.connected
            client.disconnect()


class TestQos1UnderLoss:
    def test_dropped_puback_triggers_dup_retransmit(self):
        with MiniBroker() as broker:
            state = {"pubacks_dropped": 0}
            upstream_publishes: list[Publish] = []

            def keep(direction, packet):
                if direction == "up" and isinstance(packet, Publish):
                    upstream_publishes.append(packet)
                if direction == "down" and isinstance(packet, Puback) and state["pubacks_dropped"] == 0:
                    state["pubacks_dropped"] += 1
                    return False
                return True

            with LossyMqttProxy(broker.address, keep) as proxy:
                pub = MqttClient(*proxy.address, "pub", ack_timeout_s=0.4)
                pub.connect()
                assert pub.publish("dup/t", b"once", qos=1)
                assert state["pubacks_dropped"] == 1
                # a slow scheduler may squeeze in more than one retransmit,
                # but only the first frame may lack the DUP flag
                assert broker.published_count >= 2
                dups = [p.dup for p in upstream_publishes]
                assert dups[0] is False and len(dups) >= 2 and all(dups[1:])
                assert len({p.packet_id for p in upstream_publishes}) == 1
                pub.disconnect()

    def test_publish_many_single_round_trip_batch(self):
        with MiniBroker() as broker:
            sub, received = _collecting_subscriber(broker.address, "batch/#")
            pub = MqttClient(*broker.address, "pub")
            pub.connect()
            batch = [(f"batch/{i}", f"m{i}".encode()) for i in range(8)]
            assert pub.publish_many(batch, qos=1)
            assert _await(lambda: len(received) >= 8)
            assert {bytes(p.payload) for p in received} == {m for _, m in batch}
            pub.disconnect()
            sub.disconnect()

    def test_publish_many_retransmits_unacked_messages(self):
        rng = random.Random(7)

        def keep(direction, packet):
            if isinstance(packet, Puback) and direction == "down":
                return rng.random() >= 0.5
            return True

        with MiniBroker() as broker:
            sub, received = _collecting_subscriber(broker.address, "pm/#")
            with LossyMqttProxy(broker.address, keep) as proxy:
                pub = MqttClient(*proxy.address, "pub", ack_timeout_s=0.1, max_retries=30)
                pub.connect()
                batch = [(f"pm/{i}", f"m{i}".encode()) for i in range(20)]
                assert pub.publish_many(batch, qos=1)
                want = {m for _, m in batch}
                assert _await(lambda: {bytes(p.payload) for p in received} >= want)
                pub.disconnect()
            sub.disconnect()

    def test_soak_ten_percent_loss_no_sample_loss(self):
        rng = random.Random(20240511)

        def keep(direction, packet):
            if isinstance(packet, Publish) and direction == "up":
                return rng.random() >= 0.10
            if isinstance(packet, Puback) and direction == "down":
                return rng.random() >= 0.10
            return True

        with MiniBroker() as broker:
            sub, received = _collecting_subscriber(broker.address, "soak/#")
            with LossyMqttProxy(broker.address, keep) as proxy:
                pub = MqttClient(*proxy.address, "pub", ack_timeout_s=0.1, max_retries=30)
                pub.connect()
                sent = [f"sample-{i}".encode() for i in range(200)]
                for payload in sent:
                    assert pub.publish("soak/t", payload, qos=1)
                distinct = lambda: {bytes(p.payload) for p in received}
                assert _await(lambda: distinct() >= set(sent), timeout_s=30.0)
                # at-least-once: everything arrives, duplicates allowed
                assert distinct() == set(sent)
                pub.disconnect()
            sub.disconnect()
