import socket
import struct
import threading
import time
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cosurf import protocol as pr
from cosurf.collab import Session
from cosurf.frame import Z_MAX, Z_MIN, RgbdFrame
from cosurf.geometry import Intrinsics

K = Intrinsics.default()


def _frame(camera=0, index=0, depth=1.0, k=K):
    h, w = k.shape
    color = np.full((h, w, 3), 90, np.uint8)
    return RgbdFrame(camera, index, index / 30.0, color, np.full((h, w), depth), k)


def test_hello_and_bye_round_trip():
    for m in (pr.hello(5, K), pr.bye(5), pr.status(5, pr.ErrorCode.DUPLICATE_CAMERA)):
        assert pr.decode(pr.encode(m)) == m


def test_constant_depth_is_exact():
    msg = pr.decode(pr.encode(pr.frame_message(_frame(depth=1.0))))
    assert msg.depth_mm.shape == (120, 160)
    assert np.all(msg.depth_mm == 1000)
    np.testing.assert_array_equal(pr.to_frame(msg).depth, 1.0)


@given(st.one_of(st.just(0.0), st.floats(Z_MIN, Z_MAX)))
def test_depth_quantisation_below_half_millimetre(d):
    k = Intrinsics.default(8, 6)
    back = pr.to_frame(pr.decode(pr.encode(pr.frame_message(_frame(depth=d, k=k)))))
    assert np.all(np.abs(back.depth - d) <= 0.0005 + 1e-12)


@given(st.integers(0, 2**32 - 1), st.integers(0, 2**64 - 1), st.integers(1, 9), st.integers(1, 9),
       st.integers(0, 2**31))
def test_frame_round_trip(cam, stamp, w, h, seed):
    rng = np.random.default_rng(seed)
    depth = rng.integers(0, 65536, (h, w)).astype(np.uint16)
    color = rng.integers(0, 256, (h, w, 3)).astype(np.uint8)
    intr = (float(w), float(w), w / 2, h / 2, float(w), float(h))
    m = pr.FrameMessage(pr.MessageType.FRAME, cam, stamp, intr, depth, color)
    assert pr.decode(pr.encode(m)) == m


def test_invalid_depth_encodes_as_zero():
    d = np.array([[np.nan, np.inf, -1.0, 70.0]])
    np.testing.assert_array_equal(pr.depth_to_mm(d), [[0, 0, 0, 65535]])


def test_error_codes_are_distinct():
    wire = pr.encode(pr.frame_message(_frame(k=Intrinsics.default(8, 6))))
    cases = {
        pr.BadMagic: b"XXXX" + wire[4:],
        pr.VersionMismatch: wire[:4] + struct.pack("<H", 2) + wire[6:],
        pr.CrcMismatch: wire[:-5] + bytes([wire[-5] ^ 0xFF]) + wire[-4:],
        pr.Truncated: wire[:-1],
        pr.Malformed: wire + b"\0",
    }
    codes = set()
    for cls, data in cases.items():
        with pytest.raises(cls) as err:
            pr.decode(data)
        codes.add(err.value.code)
    assert len(codes) == len(cases)


def test_header_only_truncation_and_unknown_type():
    with pytest.raises(pr.Truncated):
        pr.decode(pr.encode(pr.bye(1))[:20])
    body = struct.pack("<4sHHIQ6dII", b"CSLM", 1, 9, 1, 0, *([0.0] * 6), 0, 0)
    with pytest.raises(pr.Malformed):
        pr.decode(body + struct.pack("<I", zlib.crc32(body[4:])))


def test_encode_rejects_shape_mismatch():
    m = pr.frame_message(_frame())
    bad = pr.FrameMessage(m.type, m.camera_id, 0, m.intrinsics, m.depth_mm[:10], m.color)
    with pytest.raises(pr.Malformed):
        pr.encode(bad)
    with pytest.raises(pr.Malformed):
        pr.to_frame(pr.bye(0))


def test_stream_of_messages():
    msgs = [pr.hello(1, K), pr.frame_message(_frame(1, k=Intrinsics.default(8, 6))), pr.bye(1)]
    data = b"".join(pr.encode(m) for m in msgs)
    assert list(pr.iter_messages(data)) == msgs
    with pytest.raises(pr.Truncated):
        list(pr.iter_messages(data[:-2]))


def test_duplicate_camera_is_refused():
    s = Session()
    with pr.FrameServer(s, process=False) as srv:
        host, port = srv.address
        with pr.CameraClient(host, port, 4, K):
            with pytest.raises(pr.Refused) as err:
                pr.CameraClient(host, port, 4, K).hello()
            assert err.value.code == pr.ErrorCode.DUPLICATE_CAMERA
    assert list(s.camera_ref) == [4]


def test_frame_before_hello_is_rejected():
    s = Session()
    with pr.FrameServer(s, process=False) as srv:
        conn = socket.create_connection(srv.address)
        conn.sendall(pr.encode(pr.frame_message(_frame(2, k=Intrinsics.default(8, 6)))))
        reply = pr.read_message(conn.makefile("rb"))
        conn.close()
    assert reply.type == pr.MessageType.STATUS and reply.status_code == pr.ErrorCode.NOT_REGISTERED
    assert s.pending() == 0


def test_broken_client_does_not_affect_others():
    k = Intrinsics.default(32, 24)
    s = Session()
    with pr.FrameServer(s, process=False) as srv:
        host, port = srv.address
        bad = pr.CameraClient(host, port, 1, k).hello()
        bad._sock.sendall(pr.encode(pr.frame_message(_frame(1, 0, k=k)))[:30])
        bad._in.close()
        bad._sock.close()  # disconnect mid-message
        good = threading.Thread(target=_stream, args=(host, port, 0, k, 5))
        good.start()
        good.join()
        assert srv.wait_finished([0])
        _wait_for(lambda: srv.stats.errors)
    assert srv.stats.received.get(0) == 5 and 1 not in srv.stats.received
    assert [code for _, code in srv.stats.errors] == [pr.ErrorCode.TRUNCATED]
    assert s.pending() == 5


def test_corrupt_stream_drops_only_that_connection():
    k = Intrinsics.default(32, 24)
    s = Session()
    with pr.FrameServer(s, process=False) as srv:
        host, port = srv.address
        cl = pr.CameraClient(host, port, 1, k).hello()
        wire = bytearray(pr.encode(pr.frame_message(_frame(1, 0, k=k))))
        wire[80] ^= 0x10
        cl._sock.sendall(bytes(wire))
        reply = pr.read_message(cl._in)
        assert reply.status_code == pr.ErrorCode.CRC_MISMATCH
        cl._in.close()
        cl._sock.close()
        _stream(host, port, 0, k, 2)
        assert srv.wait_finished([0])
    assert srv.stats.received == {0: 2}


def _stream(host, port, camera, k, n):
    with pr.CameraClient(host, port, camera, k) as cl:
        for i in range(n):
            cl.send(_frame(camera, i, k=k))


def _wait_for(cond, timeout=5.0):
    deadline = time.monotonic() + timeout
    while not cond() and time.monotonic() < deadline:
        time.sleep(0.01)
