"""Ordered, byte-counted message channels between the two parties.

Every message is a :class:`Frame` serialized as a 13-byte little-endian
header (``u8`` message type, ``u64`` session id, ``u32`` payload length)
followed by the payload.  Both the in-process loopback channel and the TCP
channel move exactly these bytes, so their :class:`ChannelStats` agree.
"""
from __future__ import annotations

import json
import logging
import queue
import socket
import struct
import threading
import time
from collections import defaultdict, deque
from dataclasses import dataclass
from enum import IntEnum

from .ring import FixedPointConfig

__all__ = [
    "MsgType",
    "Frame",
    "ChannelStats",
    "Channel",
    "LoopbackChannel",
    "TcpChannel",
    "TransportError",
    "ChannelClosed",
    "MalformedFrame",
    "ConfigMismatch",
    "PROTOCOL_VERSION",
    "HEADER_SIZE",
    "loopback_pair",
    "connect",
    "connect_loopback",
    "tcp_pair",
    "parse_endpoint",
    "run_parties",
]

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
ROLES = ("rating_party", "social_party")

_HEADER = struct.Struct("<BQI")
HEADER_SIZE = _HEADER.size
MAX_PAYLOAD = (1 << 32) - 1


class TransportError(Exception):
    pass


class ChannelClosed(TransportError):
    pass


class MalformedFrame(TransportError):
    pass


class ConfigMismatch(TransportError):
    pass


class MsgType(IntEnum):
    BUNDLE_A = 1
    BUNDLE_B = 2
    N_MATRIX = 3
    U_SYNC = 4
    CONTROL = 5


@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    session_id: int
    payload: bytes = b""

    @property
    def payload_len(self) -> int:
        return len(self.payload)

    def encode(self) -> bytes:
        if not 0 <= self.session_id < (1 << 64):
            raise MalformedFrame(f"session id out of range: {self.session_id}")
        if len(self.payload) > MAX_PAYLOAD:
            raise MalformedFrame(f"payload too large: {len(self.payload)} bytes")
        return _HEADER.pack(int(self.msg_type), self.session_id, len(self.payload)) + bytes(self.payload)

    @staticmethod
    def parse_header(header: bytes) -> tuple[MsgType, int, int]:
        if len(header) != HEADER_SIZE:
            raise MalformedFrame(f"short header ({len(header)} bytes)")
        tag, sid, length = _HEADER.unpack(header)
        try:
            msg_type = MsgType(tag)
        except ValueError:
            raise MalformedFrame(f"unknown message type tag {tag}") from None
        return msg_type, sid, length

    @classmethod
    def decode(cls, data: bytes) -> "Frame":
        msg_type, sid, length = cls.parse_header(data[:HEADER_SIZE])
        payload = data[HEADER_SIZE:]
        if len(payload) != length:
            raise MalformedFrame(f"declared payload length {length}, got {len(payload)}")
        return cls(msg_type, sid, bytes(payload))

    @property
    def wire_size(self) -> int:
        return HEADER_SIZE + len(self.payload)


@dataclass
class ChannelStats:
    bytes_sent: int = 0
    bytes_received: int = 0
    frames_sent: int = 0
    frames_received: int = 0

    def snapshot(self) -> "ChannelStats":
        return ChannelStats(self.bytes_sent, self.bytes_received, self.frames_sent, self.frames_received)

    def __sub__(self, other: "ChannelStats") -> "ChannelStats":
        return ChannelStats(
            self.bytes_sent - other.bytes_sent,
            self.bytes_received - other.bytes_received,
            self.frames_sent - other.frames_sent,
            self.frames_received - other.frames_received,
        )

    @property
    def total_bytes(self) -> int:
        return self.bytes_sent + self.bytes_received


class Channel:
    """Full-duplex ordered frame channel.

    Subclasses provide ``_send_bytes`` and ``_recv_bytes``.  Frames for a
    session other than the one requested are buffered, so interleaved
    sessions each see their own frames in send order.
    """

    def __init__(self):
        self.stats = ChannelStats()
        self.closed = False
        self.peer_config: FixedPointConfig | None = None
        self._pending: dict[int, deque] = defaultdict(deque)
        self._recv_lock = threading.Lock()

    # subclass hooks
    def _send_bytes(self, data: bytes) -> None:
        raise NotImplementedError

    def _recv_frame_raw(self, timeout: float | None) -> Frame:
        raise NotImplementedError

    def send_frame(self, frame: Frame) -> None:
        if self.closed:
            raise ChannelClosed("send on closed channel")
        data = frame.encode()
        self._send_bytes(data)
        self.stats.bytes_sent += len(data)
        self.stats.frames_sent += 1

    def send(self, msg_type: MsgType, payload: bytes = b"", session_id: int = 0) -> None:
        self.send_frame(Frame(MsgType(msg_type), session_id, payload))

    def recv_frame(self, session_id: int | None = None, timeout: float | None = None) -> Frame:
        """Block until the next frame (of ``session_id``, if given) arrives."""
        with self._recv_lock:
            if session_id is None:
                for sid, q in self._pending.items():
                    if q:
                        return q.popleft()
            elif self._pending[session_id]:
                return self._pending[session_id].popleft()
            while True:
                frame = self._recv_frame_raw(timeout)
                self.stats.bytes_received += frame.wire_size
                self.stats.frames_received += 1
                if session_id is None or frame.session_id == session_id:
                    return frame
                self._pending[frame.session_id].append(frame)

    def expect(self, msg_type: MsgType, session_id: int | None = None, timeout: float | None = None) -> bytes:
        """Receive a frame and check its type; returns the payload."""
        frame = self.recv_frame(session_id, timeout)
        if frame.msg_type != msg_type:
            raise MalformedFrame(f"expected {MsgType(msg_type).name}, got {frame.msg_type.name}")
        return frame.payload

    def send_json(self, obj, session_id: int = 0) -> None:
        self.send(MsgType.CONTROL, json.dumps(obj, separators=(",", ":")).encode(), session_id)

    def recv_json(self, session_id: int | None = None, timeout: float | None = None):
        return json.loads(self.expect(MsgType.CONTROL, session_id, timeout))

    def close(self) -> None:
        self.closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


_CLOSE = object()


class LoopbackChannel(Channel):
    """One end of an in-process channel pair backed by two queues."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        super().__init__()
        self._inbox = inbox
        self._outbox = outbox

    def _send_bytes(self, data: bytes) -> None:
        self._outbox.put(data)

    def _recv_frame_raw(self, timeout):
        if self.closed:
            raise ChannelClosed("recv on closed channel")
        try:
            data = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TransportError(f"no frame within {timeout} s") from None
        if data is _CLOSE:
            self.closed = True
            raise ChannelClosed("peer closed the channel")
        return Frame.decode(data)

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self._outbox.put(_CLOSE)
            self._inbox.put(_CLOSE)


def loopback_pair() -> tuple[LoopbackChannel, LoopbackChannel]:
    """Two connected loopback ends, without handshake."""
    q1, q2 = queue.Queue(), queue.Queue()
    return LoopbackChannel(q1, q2), LoopbackChannel(q2, q1)


class TcpChannel(Channel):
    def __init__(self, sock: socket.socket):
        super().__init__()
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock = sock

    def _send_bytes(self, data: bytes) -> None:
        try:
            self.sock.sendall(data)
        except OSError as exc:
            self.closed = True
            raise ChannelClosed(f"send failed: {exc}") from exc

    def _recv_exact(self, n: int) -> bytes:
        buf = bytearray(n)
        view = memoryview(buf)
        got = 0
        while got < n:
            try:
                k = self.sock.recv_into(view[got:], n - got)
            except socket.timeout:
                raise TransportError("timed out waiting for peer") from None
            except OSError as exc:
                self.closed = True
                raise ChannelClosed(f"recv failed: {exc}") from exc
            if k == 0:
                self.closed = True
                raise ChannelClosed("peer closed the connection")
            got += k
        return bytes(buf)

    def _recv_frame_raw(self, timeout):
        if self.closed:
            raise ChannelClosed("recv on closed channel")
        self.sock.settimeout(timeout)
        msg_type, sid, length = Frame.parse_header(self._recv_exact(HEADER_SIZE))
        return Frame(msg_type, sid, self._recv_exact(length) if length else b"")

    def close(self) -> None:
        if not self.closed:
            self.closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def parse_endpoint(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"endpoint must look like host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


# -- handshake ----------------------------------------------------------------

def _send_hello(ch: Channel, role: str, cfg: FixedPointConfig) -> None:
    if role not in ROLES:
        raise ValueError(f"role must be one of {ROLES}, got {role!r}")
    ch.send_json(
        {"hello": PROTOCOL_VERSION, "role": role, "ring_bits": cfg.ring_bits, "frac_bits": cfg.frac_bits}
    )


def _check_hello(ch: Channel, role: str, cfg: FixedPointConfig, timeout=None) -> None:
    try:
        msg = ch.recv_json(0, timeout)
    except (ValueError, MalformedFrame) as exc:
        ch.close()
        raise ConfigMismatch(f"bad handshake: {exc}") from exc
    problems = []
    if msg.get("hello") != PROTOCOL_VERSION:
        problems.append(f"protocol version {msg.get('hello')} != {PROTOCOL_VERSION}")
    if msg.get("role") == role:
        problems.append(f"both ends claim role {role}")
    if (msg.get("ring_bits"), msg.get("frac_bits")) != (cfg.ring_bits, cfg.frac_bits):
        problems.append(
            f"fixed-point config (l={msg.get('ring_bits')}, l_F={msg.get('frac_bits')}) "
            f"!= local (l={cfg.ring_bits}, l_F={cfg.frac_bits})"
        )
    if problems:
        ch.close()
        raise ConfigMismatch("; ".join(problems))
    ch.peer_config = cfg


def connect_loopback(
    cfg_a: FixedPointConfig = FixedPointConfig(), cfg_b: FixedPointConfig | None = None
) -> tuple[LoopbackChannel, LoopbackChannel]:
    """Handshaken loopback pair: (rating party end, social party end)."""
    a, b = loopback_pair()
    cfg_b = cfg_a if cfg_b is None else cfg_b
    _send_hello(a, "rating_party", cfg_a)
    _send_hello(b, "social_party", cfg_b)
    errors = []
    for ch, role, cfg in ((a, "rating_party", cfg_a), (b, "social_party", cfg_b)):
        try:
            _check_hello(ch, role, cfg, timeout=5)
        except ConfigMismatch as exc:
            errors.append(exc)
    if errors:
        raise errors[0]
    return a, b


def connect(
    role: str,
    cfg: FixedPointConfig = FixedPointConfig(),
    *,
    listen: str | None = None,
    peer: str | None = None,
    timeout: float = 30.0,
) -> TcpChannel:
    """Open a TCP channel to the other party and run the handshake.

    Exactly one of ``listen`` (accept one connection on ``host:port``) or
    ``peer`` (dial ``host:port``, retrying until ``timeout``) is given.
    """
    if role not in ROLES:
        raise ValueError(f"role must be one of {ROLES}, got {role!r}")
    if (listen is None) == (peer is None):
        raise ValueError("give exactly one of listen= or peer=")
    if listen is not None:
        with socket.create_server(parse_endpoint(listen)) as srv:
            srv.settimeout(timeout)
            sock, _ = srv.accept()
    else:
        addr = parse_endpoint(peer)
        deadline = time.monotonic() + timeout
        while True:
            try:
                sock = socket.create_connection(addr, timeout=timeout)
                break
            except ConnectionRefusedError:
                if time.monotonic() > deadline:
                    raise
                time.sleep(0.05)
    sock.settimeout(None)
    ch = TcpChannel(sock)
    _send_hello(ch, role, cfg)
    _check_hello(ch, role, cfg, timeout=timeout)
    return ch


def tcp_pair(
    cfg_a: FixedPointConfig = FixedPointConfig(), cfg_b: FixedPointConfig | None = None
) -> tuple[TcpChannel, TcpChannel]:
    """Two handshaken TCP ends on localhost within one process (for tests)."""
    cfg_b = cfg_a if cfg_b is None else cfg_b
    srv = socket.create_server(("127.0.0.1", 0))
    port = srv.getsockname()[1]
    result = {}

    def accept():
        try:
            sock, _ = srv.accept()
            ch = TcpChannel(sock)
            _send_hello(ch, "social_party", cfg_b)
            _check_hello(ch, "social_party", cfg_b, timeout=10)
            result["b"] = ch
        except Exception as exc:  # surfaced below
            result["err"] = exc
        finally:
            srv.close()

    t = threading.Thread(target=accept, daemon=True)
    t.start()
    a = TcpChannel(socket.create_connection(("127.0.0.1", port)))
    _send_hello(a, "rating_party", cfg_a)
    try:
        _check_hello(a, "rating_party", cfg_a, timeout=10)
    finally:
        t.join(10)
    if "err" in result:
        a.close()
        raise result["err"]
    return a, result["b"]


def run_parties(fn_a, fn_b, channels=()):
    """Run ``fn_b`` in a worker thread and ``fn_a`` in the caller.

    Returns ``(result_a, result_b)``.  If either side raises, the given
    channels are closed so the other side cannot block forever, and the
    first error is re-raised.
    """
    box = {}

    def side_b():
        try:
            box["b"] = fn_b()
        except BaseException as exc:
            box["err_b"] = exc
            for ch in channels:
                ch.close()

    t = threading.Thread(target=side_b, name="social-party", daemon=True)
    t.start()
    try:
        res_a = fn_a()
    except BaseException:
        for ch in channels:
            ch.close()
        t.join()
        if "err_b" in box and not isinstance(box["err_b"], ChannelClosed):
            raise box["err_b"]
        raise
    t.join()
    if "err_b" in box:
        raise box["err_b"]
    return res_a, box.get("b")
