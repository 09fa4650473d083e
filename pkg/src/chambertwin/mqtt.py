"""MQTT 3.1.1 subset: packet codec, a small broker, and a resilient client.

Covers CONNECT/CONNACK, PUBLISH/PUBACK (QoS 0 and 1), SUBSCRIBE/SUBACK,
PINGREQ/PINGRESP and DISCONNECT, with single-level (+) and multi-level (#)
topic filters. No retained messages, no QoS 2, no TLS, no will messages;
the gateway only needs a reliable at-least-once pipe with a local test
broker standing in for an external one.
"""
from __future__ import annotations

import socket
import socketserver
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

CONNECT, CONNACK, PUBLISH, PUBACK = 1, 2, 3, 4
SUBSCRIBE, SUBACK = 8, 9
PINGREQ, PINGRESP, DISCONNECT = 12, 13, 14

PROTOCOL_NAME = b"\x00\x04MQTT"
PROTOCOL_LEVEL = 4


class MqttError(Exception):
    """Malformed packet; the message names the failing byte offset."""


class IncompletePacket(Exception):
    def __init__(self, missing: int) -> None:
        super().__init__(f"need at least {missing} more bytes")
        self.missing = missing


def encode_varint(value: int) -> bytes:
    if not 0 <= value <= 268_435_455:
        raise ValueError(f"remaining length {value} out of range")
    out = bytearray()
    while True:
        value, digit = divmod(value, 128)
        out.append(digit | (0x80 if value else 0))
        if not value:
            return bytes(out)


def decode_varint(buf: bytes, pos: int) -> tuple[int, int]:
    value, shift = 0, 0
    for i in range(4):
        if pos + i >= len(buf):
            raise IncompletePacket(1)
        byte = buf[pos + i]
        value |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return value, pos + i + 1
        shift += 7
    raise MqttError(f"remaining-length continuation overruns at offset {pos + 3}")


def _string(text: str) -> bytes:
    raw = text.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError("string too long for a u16 length prefix")
    return len(raw).to_bytes(2, "big") + raw


def _read_string(buf: bytes, pos: int) -> tuple[str, int]:
    if pos + 2 > len(buf):
        raise MqttError(f"truncated string length at offset {pos}")
    n = int.from_bytes(buf[pos : pos + 2], "big")
    end = pos + 2 + n
    if end > len(buf):
        raise MqttError(f"truncated string body at offset {pos + 2}")
    return buf[pos + 2 : end].decode("utf-8"), end


@dataclass(frozen=True)
class Connect:
    client_id: str
    keepalive_s: int = 60
    clean_session: bool = True


@dataclass(frozen=True)
class Connack:
    session_present: bool = False
    code: int = 0


@dataclass(frozen=True)
class Publish:
    topic: str
    payload: bytes
    qos: int = 0
    packet_id: int = 0
    dup: bool = False
    retain: bool = False


@dataclass(frozen=True)
class Puback:
    packet_id: int


@dataclass(frozen=True)
class Subscribe:
    packet_id: int
    filters: tuple[tuple[str, int], ...]


@dataclass(frozen=True)
class Suback:
    packet_id: int
    codes: tuple[int, ...]


@dataclass(frozen=True)
class Pingreq:
    pass


@dataclass(frozen=True)
class Pingresp:
    pass


@dataclass(frozen=True)
class Disconnect:
    pass


Packet = (
    Connect | Connack | Publish | Puback | Subscribe | Suback | Pingreq | Pingresp | Disconnect
)


def encode_packet(packet: Packet) -> bytes:
    if isinstance(packet, Connect):
        flags = 0x02 if packet.clean_session else 0x00
        body = (
            PROTOCOL_NAME
            + bytes([PROTOCOL_LEVEL, flags])
            + packet.keepalive_s.to_bytes(2, "big")
            + _string(packet.client_id)
        )
        return _fixed(CONNECT, 0, body)
    if isinstance(packet, Connack):
        return _fixed(CONNACK, 0, bytes([int(packet.session_present), packet.code]))
    if isinstance(packet, Publish):
        if packet.qos not in (0, 1):
            raise ValueError("only QoS 0 and 1 are supported")
        if packet.qos == 1 and not packet.packet_id:
            raise ValueError("QoS 1 PUBLISH needs a nonzero packet id")
        flags = (int(packet.dup) << 3) | (packet.qos << 1) | int(packet.retain)
        body = _string(packet.topic)
        if packet.qos:
            body += packet.packet_id.to_bytes(2, "big")
        return _fixed(PUBLISH, flags, body + packet.payload)
    if isinstance(packet, Puback):
        return _fixed(PUBACK, 0, packet.packet_id.to_bytes(2, "big"))
    if isinstance(packet, Subscribe):
        body = packet.packet_id.to_bytes(2, "big")
        for topic_filter, qos in packet.filters:
            body += _string(topic_filter) + bytes([qos])
        return _fixed(SUBSCRIBE, 0x02, body)
    if isinstance(packet, Suback):
        return _fixed(SUBACK, 0, packet.packet_id.to_bytes(2, "big") + bytes(packet.codes))
    if isinstance(packet, Pingreq):
        return _fixed(PINGREQ, 0, b"")
    if isinstance(packet, Pingresp):
        return _fixed(PINGRESP, 0, b"")
    if isinstance(packet, Disconnect):
        return _fixed(DISCONNECT, 0, b"")
    raise TypeError(f"cannot encode {packet!r}")


def _fixed(ptype: int, flags: int, body: bytes) -> bytes:
    return bytes([(ptype << 4) | flags]) + encode_varint(len(body)) + body


def decode_packet(buf: bytes) -> tuple[Packet, int]:
    if not buf:
        raise IncompletePacket(2)
    ptype, flags = buf[0] >> 4, buf[0] & 0x0F
    remaining, pos = decode_varint(buf, 1)
    end = pos + remaining
    if len(buf) < end:
        raise IncompletePacket(end - len(buf))
    body = buf[pos:end]

    if ptype == CONNECT:
        if body[:6] != PROTOCOL_NAME:
            raise MqttError("protocol name mismatch at offset 2")
        if body[6] != PROTOCOL_LEVEL:
            raise MqttError(f"unsupported protocol level {body[6]} at offset 8")
        keepalive = int.from_bytes(body[8:10], "big")
        client_id, _ = _read_string(body, 10)
        return Connect(client_id, keepalive, bool(body[7] & 0x02)), end
    if ptype == CONNACK:
        return Connack(bool(body[0] & 1), body[1]), end
    if ptype == PUBLISH:
        qos = (flags >> 1) & 0x03
        if qos > 1:
            raise MqttError("QoS 2 not supported (offset 0)")
        topic, at = _read_string(body, 0)
        packet_id = 0
        if qos:
            packet_id = int.from_bytes(body[at : at + 2], "big")
            at += 2
        return Publish(topic, bytes(body[at:]), qos, packet_id, bool(flags & 0x08), bool(flags & 1)), end
    if ptype == PUBACK:
        return Puback(int.from_bytes(body[:2], "big")), end
    if ptype == SUBSCRIBE:
        if flags != 0x02:
            raise MqttError("SUBSCRIBE flags must be 0010 (offset 0)")
        packet_id = int.from_bytes(body[:2], "big")
        filters = []
        at = 2
        while at < len(body):
            topic_filter, at = _read_string(body, at)
            filters.append((topic_filter, body[at]))
            at += 1
        return Subscribe(packet_id, tuple(filters)), end
    if ptype == SUBACK:
        return Suback(int.from_bytes(body[:2], "big"), tuple(body[2:])), end
    if ptype == PINGREQ:
        return Pingreq(), end
    if ptype == PINGRESP:
        return Pingresp(), end
    if ptype == DISCONNECT:
        return Disconnect(), end
    raise MqttError(f"unknown packet type {ptype} at offset 0")


def topic_matches(topic_filter: str, topic: str) -> bool:
    """MQTT 3.1.1 filter matching with + and # wildcards."""
    flevels = topic_filter.split("/")
    tlevels = topic.split("/")
    for i, level in enumerate(flevels):
        if level == "#":
            return i == len(flevels) - 1
        if i >= len(tlevels):
            return False
        if level != "+" and level != tlevels[i]:
            return False
    return len(flevels) == len(tlevels)


def _recv_packet(sock: socket.socket, buf: bytearray) -> Packet | None:
    while True:
        try:
            packet, used = decode_packet(bytes(buf))
        except IncompletePacket as short:
            chunk = sock.recv(max(short.missing, 1))
            if not chunk:
                if buf:
                    raise MqttError("connection closed mid-packet")
                return None
            buf.extend(chunk)
            continue
        del buf[:used]
        return packet


class _BrokerSession:
    def __init__(self, sock: socket.socket) -> None:
        self.sock = sock
        self.client_id = ""
        self.filters: list[tuple[str, int]] = []
        self.write_lock = threading.Lock()
        self.next_id = 0

    def send(self, packet: Packet) -> None:
        with self.write_lock:
            self.sock.sendall(encode_packet(packet))

    def assign_id(self) -> int:
        self.next_id = self.next_id % 0xFFFF + 1
        return self.next_id


class _BrokerHandler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        broker: MiniBroker = self.server.broker  # type: ignore[attr-defined]
        session = _BrokerSession(self.request)
        buf = bytearray()
        self.request.settimeout(60.0)
        self.request.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        try:
            first = _recv_packet(self.request, buf)
            if not isinstance(first, Connect):
                return
            session.client_id = first.client_id
            broker.attach(session)
            session.send(Connack(False, 0))
            while True:
                packet = _recv_packet(self.request, buf)
                if packet is None or isinstance(packet, Disconnect):
                    return
                if isinstance(packet, Subscribe):
                    session.filters.extend(packet.filters)
                    session.send(Suback(packet.packet_id, tuple(min(q, 1) for _, q in packet.filters)))
                elif isinstance(packet, Publish):
                    if packet.qos == 1:
                        session.send(Puback(packet.packet_id))
                    broker.route(packet)
                elif isinstance(packet, Pingreq):
                    session.send(Pingresp())
                elif isinstance(packet, Puback):
                    pass  # subscriber acknowledged a QoS 1 delivery
                else:
                    return  # protocol violation for this role: drop the client
        except (MqttError, socket.timeout, OSError):
            return
        finally:
            broker.detach(session)


class MiniBroker:
    """In-process broker for tests and self-contained runs."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0) -> None:
        self._server = _ReusableTcp((host, port), _BrokerHandler)
        self._server.broker = self  # type: ignore[attr-defined]
        self._sessions: list[_BrokerSession] = []
        self._lock = threading.Lock()
        self._thread: threading.Thread | None = None
        self.published_count = 0

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    def attach(self, session: _BrokerSession) -> None:
        with self._lock:
            self._sessions.append(session)

    def detach(self, session: _BrokerSession) -> None:
        with self._lock:
            if session in self._sessions:
                self._sessions.remove(session)

    def route(self, packet: Publish) -> None:
        with self._lock:
            self.published_count += 1
            targets = list(self._sessions)
        for session in targets:
            grants = [q for f, q in session.filters if topic_matches(f, packet.topic)]
            if not grants:
                continue
            qos = min(packet.qos, max(grants))
            out = Publish(
                packet.topic,
                packet.payload,
                qos,
                session.assign_id() if qos else 0,
            )
            try:
                session.send(out)
            except OSError:
                pass

    def start(self) -> "MiniBroker":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5.0)

    def __enter__(self) -> "MiniBroker":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


class _ReusableTcp(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class PendingPublishes:
    """Handle for a QoS 1 batch whose acks have not been awaited yet."""

    __slots__ = ("in_flight", "send_ok")

    def __init__(self, in_flight: list[tuple[str, bytes, int, threading.Event]],
                 send_ok: bool) -> None:
        self.in_flight = in_flight
        self.send_ok = send_ok


class MqttClient:
    """Publisher/subscriber with a bounded offline queue and backoff.

    Messages published while disconnected are buffered (drop-oldest beyond
    ``queue_limit``) and flushed in order on the next successful connect.
    Reconnect attempts back off 1, 2, 4, ... seconds capped at 60; the timer
    and sleep are injectable so tests run in virtual time.
    """

    def __init__(
        self,
        host: str,
        port: int,
        client_id: str,
        *,
        queue_limit: int = 10_000,
        ack_timeout_s: float = 2.0,
        max_retries: int = 8,
        sleep_fn: Callable[[float], None] = time.sleep,
        clock: Callable[[], float] = time.monotonic,
    ) -> None:
        self.host = host
        self.port = port
        self.client_id = client_id
        self.queue: deque[tuple[str, bytes, int]] = deque(maxlen=queue_limit)
        self.ack_timeout_s = ack_timeout_s
        self.max_retries = max_retries
        self._sleep = sleep_fn
        self._clock = clock
        self._sock: socket.socket | None = None
        self._reader: threading.Thread | None = None
        self._write_lock = threading.Lock()
        self._acks: dict[int, threading.Event] = {}
        self._subs: list[tuple[str, Callable[[Publish], None]]] = []
        self._next_id = 0
        self._backoff_s = 1.0
        self._next_attempt_at = 0.0
        self.reconnect_delays: list[float] = []
        self.dropped_count = 0
        self.last_error: Exception | None = None

    # connection management

    @property
    def connected(self) -> bool:
        return self._sock is not None

    def connect(self) -> None:
        sock = socket.create_connection((self.host, self.port), timeout=5.0)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.sendall(encode_packet(Connect(self.client_id)))
        buf = bytearray()
        ack = _recv_packet(sock, buf)
        if not isinstance(ack, Connack) or ack.code != 0:
            sock.close()
            raise MqttError(f"broker refused connection: {ack!r}")
        self._sock = sock
        self._backoff_s = 1.0
        self._reader = threading.Thread(target=self._read_loop, args=(sock, buf), daemon=True)
        self._reader.start()
        for topic_filter, _ in self._subs:
            self._send_subscribe(topic_filter)
        self._flush_queue()

    def disconnect(self) -> None:
        sock = self._sock
        if sock is None:
            return
        try:
            sock.sendall(encode_packet(Disconnect()))
        except OSError:
            pass
        self._drop_connection()

    def _drop_connection(self) -> None:
        sock, self._sock = self._sock, None
        if sock is not None:
            try:
                sock.close()
            except OSError:
                pass
        for event in list(self._acks.values()):
            event.set()

    def _try_reconnect(self) -> bool:
        """One backoff-gated attempt; returns True when connected."""
        if self.connected:
            return True
        now = self._clock()
        if now < self._next_attempt_at:
            return False
        try:
            self.connect()
            return True
        except OSError as exc:
            self.reconnect_delays.append(self._backoff_s)
            self._next_attempt_at = now + self._backoff_s
            self._backoff_s = min(self._backoff_s * 2.0, 60.0)
            self.last_error = exc
            return False

    # publishing

    def publish(self, topic: str, payload: bytes, qos: int = 1) -> bool:
        """Returns True when the message made it out (acked for QoS 1)."""
        if not self.connected and not self._try_reconnect():
            self._enqueue(topic, payload, qos)
            return False
        if not self._publish_now(topic, payload, qos):
            self._enqueue(topic, payload, qos)
            return False
        return True

    def _enqueue(self, topic: str, payload: bytes, qos: int) -> None:
        if len(self.queue) == self.queue.maxlen:
            self.dropped_count += 1
        self.queue.append((topic, payload, qos))

    def _flush_queue(self) -> None:
        while self.queue and self.connected:
            topic, payload, qos = self.queue[0]
            if not self._publish_now(topic, payload, qos):
                return
            self.queue.popleft()

    def publish_many(self, messages: list[tuple[str, bytes]], qos: int = 1) -> bool:
        """Publish a batch, overlapping the QoS 1 ack waits.

        All frames go on the wire first; acks are then collected in order,
        so a healthy link pays one round trip for the whole batch instead of
        one per message. Unacked messages are retransmitted individually
        (duplicate flag set) and end up on the retry queue if the link dies,
        exactly as with :meth:`publish`.
        """
        return self.collect_publishes(self.publish_many_nowait(messages, qos))

    def publish_many_nowait(self, messages: list[tuple[str, bytes]], qos: int = 1) -> PendingPublishes:
        """Put a batch on the wire without waiting for its acks.

        The returned handle must be passed to :meth:`collect_publishes`
        eventually; until then the caller is free to do other work while the
        broker processes the batch. Only one batch should be outstanding at
        a time so retransmissions keep their original order.
        """
        if not self.connected and not self._try_reconnect():
            for topic, payload in messages:
                self._enqueue(topic, payload, qos)
            return PendingPublishes([], False)
        if qos == 0:
            return PendingPublishes([], all(self._send(Publish(t, p, 0)) for t, p in messages))
        ok = True
        in_flight: list[tuple[str, bytes, int, threading.Event]] = []
        for topic, payload in messages:
            packet_id = self._assign_id()
            event = threading.Event()
            self._acks[packet_id] = event
            if self._send(Publish(topic, payload, 1, packet_id)):
                in_flight.append((topic, payload, packet_id, event))
            else:
                self._acks.pop(packet_id, None)
                self._enqueue(topic, payload, qos)
                ok = False
        return PendingPublishes(in_flight, ok)

    def collect_publishes(self, pending: PendingPublishes) -> bool:
        """Wait out the acks of a :meth:`publish_many_nowait` batch."""
        ok = pending.send_ok
        for topic, payload, packet_id, event in pending.in_flight:
            try:
                acked = event.wait(self.ack_timeout_s)
                dup_budget = self.max_retries - 1
                while not acked and dup_budget > 0 and self.connected:
                    if not self._send(Publish(topic, payload, 1, packet_id, dup=True)):
                        break
                    acked = event.wait(self.ack_timeout_s)
                    dup_budget -= 1
                if not (acked and self.connected):
                    if self.connected:
                        self._drop_connection()
                    self._enqueue(topic, payload, 1)
                    ok = False
            finally:
                self._acks.pop(packet_id, None)
        pending.in_flight = []
        return ok

    def _publish_now(self, topic: str, payload: bytes, qos: int) -> bool:
        if qos == 0:
            return self._send(Publish(topic, payload, 0))
        packet_id = self._assign_id()
        event = threading.Event()
        self._acks[packet_id] = event
        try:
            dup = False
            for _ in range(self.max_retries):
                if not self._send(Publish(topic, payload, 1, packet_id, dup=dup)):
                    return False
                if event.wait(self.ack_timeout_s):
                    return self.connected
                dup = True  # retransmission carries the duplicate flag
            self._drop_connection()
            return False
        finally:
            self._acks.pop(packet_id, None)

    def _assign_id(self) -> int:
        self._next_id = self._next_id % 0xFFFF + 1
        return self._next_id

    def _send(self, packet: Packet) -> bool:
        sock = self._sock
        if sock is None:
            return False
        try:
            with self._write_lock:
                sock.sendall(encode_packet(packet))
            return True
        except OSError:
            self._drop_connection()
            return False

    # subscribing

    def subscribe(self, topic_filter: str, on_message: Callable[[Publish], None]) -> None:
        self._subs.append((topic_filter, on_message))
        if self.connected:
            self._send_subscribe(topic_filter)

    def _send_subscribe(self, topic_filter: str) -> None:
        self._send(Subscribe(self._assign_id(), ((topic_filter, 1),)))

    def _read_loop(self, sock: socket.socket, buf: bytearray) -> None:
        try:
            while True:
                packet = _recv_packet(sock, buf)
                if packet is None:
                    break
                if isinstance(packet, Puback):
                    event = self._acks.get(packet.packet_id)
                    if event is not None:
                        event.set()
                elif isinstance(packet, Publish):
                    if packet.qos == 1:
                        self._send(Puback(packet.packet_id))
                    for topic_filter, callback in list(self._subs):
                        if topic_matches(topic_filter, packet.topic):
                            try:
                                callback(packet)
                            except Exception:
                                pass  # a broken handler must not kill the session
                # Suback, Pingresp: nothing to do for this client
        except (MqttError, OSError):
            pass
        finally:
            if self._sock is sock:
                self._drop_connection()
