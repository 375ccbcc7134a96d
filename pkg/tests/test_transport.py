import socket
import threading

import numpy as np
import pytest

from sesorec.ring import FixedPointConfig
from sesorec.transport import (
    HEADER_SIZE,
    ChannelClosed,
    ConfigMismatch,
    Frame,
    MalformedFrame,
    MsgType,
    TransportError,
    connect,
    connect_loopback,
    parse_endpoint,
    run_parties,
    tcp_pair,
)


@pytest.fixture(params=["loopback", "tcp"])
def channels(request):
    a, b = connect_loopback() if request.param == "loopback" else tcp_pair()
    yield a, b
    a.close()
    b.close()


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class TestFrame:
    def test_header_layout(self):
        raw = Frame(MsgType.N_MATRIX, 258, b"abc").encode()
        assert len(raw) == HEADER_SIZE + 3 == 16
        assert raw[0] == 3
        assert raw[1:9] == (258).to_bytes(8, "little")
        assert raw[9:13] == (3).to_bytes(4, "little")

    def test_roundtrip(self):
        f = Frame(MsgType.BUNDLE_B, 7, b"\x00\x01")
        assert Frame.decode(f.encode()) == f

    @pytest.mark.parametrize(
        "raw",
        [b"\x09" + b"\x00" * 12, b"\x01" + b"\x00" * 8 + (5).to_bytes(4, "little") + b"ab", b"\x01\x00"],
    )
    def test_malformed(self, raw):
        with pytest.raises(MalformedFrame):
            Frame.decode(raw)

    def test_session_id_range(self):
        with pytest.raises(MalformedFrame):
            Frame(MsgType.CONTROL, -1).encode()


class TestChannel:
    def test_ordered_delivery_and_stats(self, channels):
        a, b = channels
        sa, sb = a.stats.snapshot(), b.stats.snapshot()
        for k in range(5):
            a.send(MsgType.BUNDLE_A, bytes([k]) * k, 1)
        got = [b.recv_frame(1).payload for _ in range(5)]
        assert got == [bytes([k]) * k for k in range(5)]
        sent = a.stats - sa
        recv = b.stats - sb
        assert sent.bytes_sent == recv.bytes_received == 5 * HEADER_SIZE + sum(range(5))
        assert sent.frames_sent == recv.frames_received == 5

    def test_sessions_are_demultiplexed(self, channels):
        a, b = channels
        a.send(MsgType.BUNDLE_A, b"one", 1)
        a.send(MsgType.BUNDLE_A, b"two", 2)
        assert b.recv_frame(2).payload == b"two"
        assert b.recv_frame(1).payload == b"one"

    def test_expect_wrong_type(self, channels):
        a, b = channels
        a.send(MsgType.N_MATRIX, b"", 0)
        with pytest.raises(MalformedFrame):
            b.expect(MsgType.BUNDLE_A, 0)

    def test_json(self, channels):
        a, b = channels
        a.send_json({"op": "batch", "users": [1, 2]})
        assert b.recv_json(0) == {"op": "batch", "users": [1, 2]}

    def test_large_payload(self, channels):
        a, b = channels
        blob = np.arange(300_000, dtype=np.uint64).tobytes()
        t = threading.Thread(target=a.send, args=(MsgType.BUNDLE_A, blob, 4))
        t.start()
        assert b.expect(MsgType.BUNDLE_A, 4) == blob
        t.join()

    def test_timeout(self, channels):
        _, b = channels
        with pytest.raises(TransportError):
            b.recv_frame(0, timeout=0.05)

    def test_peer_close(self, channels):
        a, b = channels
        a.close()
        with pytest.raises(ChannelClosed):
            b.recv_frame(0, timeout=2)

    def test_send_after_close(self, channels):
        a, _ = channels
        a.close()
        with pytest.raises(ChannelClosed):
            a.send(MsgType.CONTROL, b"")


def test_loopback_and_tcp_count_identical_bytes():
    totals = []
    for a, b in (connect_loopback(), tcp_pair()):
        a.send(MsgType.BUNDLE_A, b"x" * 100, 3)
        b.expect(MsgType.BUNDLE_A, 3)
        totals.append((a.stats.bytes_sent, b.stats.bytes_received))
        a.close()
        b.close()
    assert totals[0] == totals[1]


class TestHandshake:
    def test_config_mismatch(self):
        with pytest.raises(ConfigMismatch):
            connect_loopback(FixedPointConfig(64, 20), FixedPointConfig(64, 16))

    def test_config_mismatch_tcp(self):
        with pytest.raises(ConfigMismatch):
            tcp_pair(FixedPointConfig(64, 20), FixedPointConfig(32, 10))

    def test_same_role_rejected(self):
        port = free_port()
        errs = []

        def server():
            try:
                connect("rating_party", listen=f"127.0.0.1:{port}", timeout=5)
            except ConfigMismatch as exc:
                errs.append(exc)

        t = threading.Thread(target=server)
        t.start()
        with pytest.raises(ConfigMismatch):
            connect("rating_party", peer=f"127.0.0.1:{port}", timeout=5)
        t.join()
        assert errs

    def test_connect_listen_peer(self):
        port = free_port()
        box = {}
        t = threading.Thread(target=lambda: box.setdefault("b", connect("social_party", listen=f"127.0.0.1:{port}")))
        t.start()
        a = connect("rating_party", peer=f"127.0.0.1:{port}")
        t.join()
        a.send(MsgType.CONTROL, b"{}")
        assert box["b"].recv_json(0) == {}
        assert a.peer_config == FixedPointConfig()
        a.close()
        box["b"].close()

    def test_connect_needs_one_endpoint(self):
        with pytest.raises(ValueError):
            connect("rating_party")
        with pytest.raises(ValueError):
            connect("rating_party", listen="127.0.0.1:1", peer="127.0.0.1:2")

    def test_bad_role(self):
        port = free_port()
        with pytest.raises(ValueError):
            connect("eavesdropper", peer=f"127.0.0.1:{port}", timeout=0.1)


@pytest.mark.parametrize("text, expected", [("127.0.0.1:80", ("127.0.0.1", 80)), (":9000", ("127.0.0.1", 9000))])
def test_parse_endpoint(text, expected):
    assert parse_endpoint(text) == expected


@pytest.mark.parametrize("text", ["localhost", "host:port"])
def test_parse_endpoint_invalid(text):
    with pytest.raises(ValueError):
        parse_endpoint(text)


class TestRunParties:
    def test_results(self):
        assert run_parties(lambda: 1, lambda: 2) == (1, 2)

    def test_b_error_unblocks_a(self):
        a, b = connect_loopback()

        def fail():
            raise RuntimeError("boom")

        with pytest.raises((RuntimeError, ChannelClosed)):
            run_parties(lambda: a.recv_frame(0, timeout=5), fail, (a, b))

    def test_a_error_unblocks_b(self):
        a, b = connect_loopback()

        def fail():
            raise KeyError("boom")

        with pytest.raises(KeyError):
            run_parties(fail, lambda: b.recv_frame(0, timeout=5), (a, b))
