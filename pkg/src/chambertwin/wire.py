"""Compact TCP read/write protocol for the register image.

Frame layout, all integers big-endian::

    magic   u8   0xA7
    version u8   0x01
    op      u8   0x01 READ | 0x02 WRITE | 0x81 READ_RESP | 0x82 WRITE_RESP | 0xFF ERR
    db      u8
    offset  u16
    length  u16
    payload      length bytes for WRITE/READ_RESP, 1 byte code for ERR, else none
    crc     u16  CRC-16/CCITT-FALSE over header+payload

One request, one response, per-connection ordering preserved. Anything the
server cannot parse is answered with ERR code 0x01 and the connection is
closed; semantic errors (bounds, read-only region) keep the connection open.
"""
from __future__ import annotations

import socket
import socketserver
import struct
import threading
from dataclasses import dataclass, field

from .regmap import RegisterError, RegisterHub

MAGIC = 0xA7
VERSION = 0x01

OP_READ = 0x01
OP_WRITE = 0x02
OP_READ_RESP = 0x81
OP_WRITE_RESP = 0x82
OP_ERR = 0xFF

ERR_CRC = 0x01
ERR_BOUNDS = 0x02
ERR_READ_ONLY = 0x03

MAX_LENGTH = 240

_HEADER = struct.Struct(">BBBBHH")

_CRC_TABLE = []
for _byte in range(256):
    _crc = _byte << 8
    for _ in range(8):
        _crc = ((_crc << 1) ^ 0x1021 if _crc & 0x8000 else _crc << 1) & 0xFFFF
    _CRC_TABLE.append(_crc)


def crc16(data: bytes, crc: int = 0xFFFF) -> int:
    for b in data:
        crc = ((crc << 8) & 0xFFFF) ^ _CRC_TABLE[((crc >> 8) ^ b) & 0xFF]
    return crc


class FrameError(Exception):
    """The byte stream does not parse as a valid frame."""


@dataclass(frozen=True)
class Frame:
    op: int
    db: int
    offset: int
    length: int
    payload: bytes = b""


def _payload_size(op: int, length: int) -> int:
    if op in (OP_WRITE, OP_READ_RESP):
        return length
    if op == OP_ERR:
        return 1
    if op in (OP_READ, OP_WRITE_RESP):
        return 0
    raise FrameError(f"unknown op 0x{op:02X}")


def encode_frame(frame: Frame) -> bytes:
    expected = _payload_size(frame.op, frame.length)
    if len(frame.payload) != expected:
        raise ValueError(
            f"op 0x{frame.op:02X} carries {expected} payload bytes, got {len(frame.payload)}"
        )
    head = _HEADER.pack(MAGIC, VERSION, frame.op, frame.db, frame.offset, frame.length)
    body = head + frame.payload
    return body + struct.pack(">H", crc16(body))


def decode_frame(buf: bytes) -> tuple[Frame, int]:
    """Parse one frame from the head of ``buf``; returns (frame, bytes used).

    Raises IncompleteFrame if more bytes are needed and FrameError if the
    head can never become a valid frame.
    """
    if len(buf) < _HEADER.size:
        raise IncompleteFrame(_HEADER.size - len(buf))
    magic, version, op, db, offset, length = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FrameError(f"bad magic 0x{magic:02X}")
    if version != VERSION:
        raise FrameError(f"unsupported version {version}")
    if length > MAX_LENGTH:
        raise FrameError(f"length {length} exceeds {MAX_LENGTH}")
    size = _HEADER.size + _payload_size(op, length) + 2
    if len(buf) < size:
        raise IncompleteFrame(size - len(buf))
    body, crc_raw = buf[: size - 2], buf[size - 2 : size]
    if crc16(body) != struct.unpack(">H", crc_raw)[0]:
        raise FrameError("crc mismatch")
    return Frame(op, db, offset, length, bytes(buf[_HEADER.size : size - 2])), size


class IncompleteFrame(Exception):
    """More bytes are required; ``missing`` says at least how many."""

    def __init__(self, missing: int) -> None:
        super().__init__(f"need {missing} more bytes")
        self.missing = missing


def _recv_frame(sock: socket.socket) -> Frame | None:
    """Read exactly one frame off a blocking socket; None on clean EOF."""
    buf = b""
    while True:
        try:
            frame, _ = decode_frame(buf)
        except IncompleteFrame as short:
            chunk = sock.recv(max(short.missing, 1))
            if not chunk:
                if buf:
                    raise FrameError("connection closed mid-frame")
                return None
            buf += chunk
            continue
        return frame


class _Handler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        hub: RegisterHub = self.server.hub  # type: ignore[attr-defined]
        self.request.settimeout(30.0)
        self.request.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        while True:
            try:
                frame = _recv_frame(self.request)
            except (FrameError, socket.timeout, OSError):
                self._send_err(0, 0, ERR_CRC)
                return  # close: the stream cannot be trusted any more
            if frame is None:
                return
            if frame.op == OP_READ:
                try:
                    data = hub.read(frame.db, frame.offset, frame.length)
                except RegisterError as err:
                    self._send_err(frame.db, frame.offset, err.code)
                    continue
                resp = Frame(OP_READ_RESP, frame.db, frame.offset, len(data), data)
            elif frame.op == OP_WRITE:
                try:
                    hub.write(frame.db, frame.offset, frame.payload)
                except RegisterError as err:
                    self._send_err(frame.db, frame.offset, err.code)
                    continue
                resp = Frame(OP_WRITE_RESP, frame.db, frame.offset, frame.length)
            else:
                self._send_err(frame.db, frame.offset, ERR_CRC)
                return
            try:
                self.request.sendall(encode_frame(resp))
            except OSError:
                return

    def _send_err(self, db: int, offset: int, code: int) -> None:
        try:
            self.request.sendall(
                encode_frame(Frame(OP_ERR, db, offset, 0, bytes([code])))
            )
        except OSError:
            pass


class _TcpServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class RegisterServer:
    """Threaded TCP front end for a RegisterHub."""

    def __init__(self, hub: RegisterHub, host: str = "127.0.0.1", port: int = 0) -> None:
        self._server = _TcpServer((host, port), _Handler)
        self._server.hub = hub  # type: ignore[attr-defined]
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    def start(self) -> "RegisterServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5.0)

    def __enter__(self) -> "RegisterServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


class WireClientError(Exception):
    """The server answered with an ERR frame."""

    def __init__(self, code: int) -> None:
        super().__init__(f"server error 0x{code:02X}")
        self.code = code


@dataclass
class RegisterClient:
    """Blocking client; safe for use from multiple threads."""

    host: str
    port: int
    timeout_s: float = 5.0
    _sock: socket.socket | None = field(default=None, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def connect(self) -> "RegisterClient":
        sock = socket.create_connection((self.host, self.port), timeout=self.timeout_s)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        return self

    def close(self) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None

    def __enter__(self) -> "RegisterClient":
        return self.connect()

    def __exit__(self, *exc) -> None:
        self.close()

    def _exchange(self, request: Frame) -> Frame:
        if self._sock is None:
            self.connect()
        assert self._sock is not None
        with self._lock:
            self._sock.sendall(encode_frame(request))
            resp = _recv_frame(self._sock)
        if resp is None:
            raise FrameError("connection closed by server")
        if resp.op == OP_ERR:
            raise WireClientError(resp.payload[0])
        return resp

    def read(self, db: int, offset: int, length: int) -> bytes:
        resp = self._exchange(Frame(OP_READ, db, offset, length))
        if resp.op != OP_READ_RESP:
            raise FrameError(f"unexpected response op 0x{resp.op:02X}")
        return resp.payload

    def read_many(self, blocks: list[tuple[int, int, int]]) -> list[bytes]:
        """Pipelined reads: every request goes out before the first reply is
        awaited, so a batch costs one round trip instead of one per block.
        The server answers frames in arrival order on a connection, which is
        what lets the replies be matched back up by position."""
        if self._sock is None:
            self.connect()
        assert self._sock is not None
        results: list[bytes] = []
        with self._lock:
            self._sock.sendall(
                b"".join(
                    encode_frame(Frame(OP_READ, db, offset, length))
                    for db, offset, length in blocks
                )
            )
            for _ in blocks:
                resp = _recv_frame(self._sock)
                if resp is None:
                    raise FrameError("connection closed by server")
                if resp.op == OP_ERR:
                    raise WireClientError(resp.payload[0])
                if resp.op != OP_READ_RESP:
                    raise FrameError(f"unexpected response op 0x{resp.op:02X}")
                results.append(resp.payload)
        return results

    def write(self, db: int, offset: int, data: bytes) -> None:
        resp = self._exchange(Frame(OP_WRITE, db, offset, len(data), bytes(data)))
        if resp.op != OP_WRITE_RESP:
            raise FrameError(f"unexpected response op 0x{resp.op:02X}")
