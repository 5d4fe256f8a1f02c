"""Binary wire protocol between camera clients and the mapping server.

Every message is one little-endian frame::

    offset size  field
    0      4     magic b"CSLM"
    4      2     version (u16, currently 1)
    6      2     type (u16): 1 hello, 2 frame, 3 bye, 4 status
    8      4     camera id (u32)
    12     8     timestamp (u64, microseconds)
    20     48    intrinsics fx fy cx cy width height (6 x f64)
    68     4     depth payload length (u32)
    72     4     colour payload length (u32)
    76     ...   depth payload: zlib(u16 millimetres, row-major)
    ...    ...   colour payload: zlib(RGB8, row-major)
    -4     4     CRC32 of every byte from offset 4 up to the CRC

Status messages (type 4, server to client) have no payload; their error
code travels in the depth-length field.
"""

from __future__ import annotations

import enum
import io
import logging
import socket
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from .frame import RgbdFrame
from .geometry import Intrinsics

log = logging.getLogger(__name__)

MAGIC = b"CSLM"
VERSION = 1
HEADER = struct.Struct("<4sHHIQ6dII")
CRC = struct.Struct("<I")
MAX_PAYLOAD = 64 << 20


class MessageType(enum.IntEnum):
    HELLO = 1
    FRAME = 2
    BYE = 3
    STATUS = 4


class ErrorCode(enum.IntEnum):
    OK = 0
    BAD_MAGIC = 1
    VERSION_MISMATCH = 2
    CRC_MISMATCH = 3
    TRUNCATED = 4
    MALFORMED = 5
    DUPLICATE_CAMERA = 6
    NOT_REGISTERED = 7


class ProtocolError(Exception):
    code = ErrorCode.MALFORMED


class BadMagic(ProtocolError):
    code = ErrorCode.BAD_MAGIC


class VersionMismatch(ProtocolError):
    code = ErrorCode.VERSION_MISMATCH


class CrcMismatch(ProtocolError):
    code = ErrorCode.CRC_MISMATCH


class Truncated(ProtocolError):
    code = ErrorCode.TRUNCATED


class Malformed(ProtocolError):
    code = ErrorCode.MALFORMED


class Refused(ProtocolError):
    """The server answered a hello with an error status."""

    def __init__(self, code: int, message: str = ""):
        super().__init__(message or f"server refused connection: {ErrorCode(code).name}")
        self.code = ErrorCode(code)


@dataclass(frozen=True, eq=False)
class FrameMessage:
    type: MessageType
    camera_id: int
    timestamp_us: int = 0
    intrinsics: tuple = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    depth_mm: np.ndarray | None = None  # (h, w) uint16
    color: np.ndarray | None = None  # (h, w, 3) uint8
    status_code: int = 0  # status messages only

    def __eq__(self, other):
        if not isinstance(other, FrameMessage):
            return NotImplemented
        same = lambda a, b: (a is None and b is None) or (a is not None and b is not None and np.array_equal(a, b))
        return (self.type == other.type and self.camera_id == other.camera_id
                and self.timestamp_us == other.timestamp_us
                and tuple(self.intrinsics) == tuple(other.intrinsics) and self.status_code == other.status_code
                and same(self.depth_mm, other.depth_mm) and same(self.color, other.color))

    @property
    def size(self) -> tuple[int, int]:
        return int(self.intrinsics[4]), int(self.intrinsics[5])


def hello(camera_id: int, k: Intrinsics) -> FrameMessage:
    return FrameMessage(MessageType.HELLO, camera_id, 0, _intrinsics_tuple(k))


def bye(camera_id: int) -> FrameMessage:
    return FrameMessage(MessageType.BYE, camera_id)


def status(camera_id: int, code: int) -> FrameMessage:
    return FrameMessage(MessageType.STATUS, camera_id, status_code=int(code))


def _intrinsics_tuple(k: Intrinsics) -> tuple:
    return (float(k.fx), float(k.fy), float(k.cx), float(k.cy), float(k.width), float(k.height))


def depth_to_mm(depth: np.ndarray) -> np.ndarray:
    d = np.where(np.isfinite(depth), depth, 0.0)
    return np.clip(np.rint(d * 1000.0), 0, 65535).astype(np.uint16)


def frame_message(frame: RgbdFrame) -> FrameMessage:
    return FrameMessage(MessageType.FRAME, frame.camera_id, int(round(frame.stamp * 1e6)),
                        _intrinsics_tuple(frame.intrinsics), depth_to_mm(frame.depth), frame.color.copy())


def to_frame(m: FrameMessage, index: int = 0) -> RgbdFrame:
    if m.type != MessageType.FRAME:
        raise Malformed(f"message type {m.type} carries no frame")
    fx, fy, cx, cy, w, h = m.intrinsics
    k = Intrinsics(fx, fy, cx, cy, int(w), int(h))
    return RgbdFrame(m.camera_id, index, m.timestamp_us / 1e6, m.color, m.depth_mm.astype(float) / 1000.0, k)


# ---------------------------------------------------------------------------
# Encoding


def encode(m: FrameMessage) -> bytes:
    depth = color = b""
    if m.type == MessageType.FRAME:
        w, h = m.size
        if m.depth_mm is None or m.color is None:
            raise Malformed("frame message needs depth and colour")
        if m.depth_mm.shape != (h, w) or m.color.shape != (h, w, 3):
            raise Malformed(f"payload shape does not match intrinsics {w}x{h}")
        depth = zlib.compress(np.ascontiguousarray(m.depth_mm, dtype="<u2").tobytes())
        color = zlib.compress(np.ascontiguousarray(m.color, dtype=np.uint8).tobytes())
    if not 0 <= m.camera_id < 1 << 32 or not 0 <= m.timestamp_us < 1 << 64:
        raise Malformed("camera id or timestamp out of range")
    depth_len = len(depth) if m.type != MessageType.STATUS else m.status_code
    head = HEADER.pack(MAGIC, VERSION, int(m.type), m.camera_id, m.timestamp_us, *m.intrinsics,
                       depth_len, len(color))
    body = head + depth + color
    return body + CRC.pack(zlib.crc32(body[4:]))


def _parse(head: bytes, payload: bytes, crc: bytes) -> FrameMessage:
    magic, version, mtype, cam, stamp, *rest = HEADER.unpack(head)
    intr, depth_len, color_len = tuple(rest[:6]), rest[6], rest[7]
    if CRC.unpack(crc)[0] != zlib.crc32(payload, zlib.crc32(head[4:])):
        raise CrcMismatch("CRC32 check failed")
    try:
        mtype = MessageType(mtype)
    except ValueError:
        raise Malformed(f"unknown message type {mtype}") from None
    if mtype == MessageType.STATUS:
        return FrameMessage(mtype, cam, stamp, intr, status_code=depth_len)
    if mtype != MessageType.FRAME:
        if payload:
            raise Malformed(f"{mtype.name} message with a payload")
        return FrameMessage(mtype, cam, stamp, intr)
    w, h = int(intr[4]), int(intr[5])
    if w <= 0 or h <= 0 or w != intr[4] or h != intr[5]:
        raise Malformed("invalid image size")
    try:
        d = zlib.decompress(payload[:depth_len])
        c = zlib.decompress(payload[depth_len:])
    except zlib.error as e:
        raise Malformed(f"payload does not decompress: {e}") from None
    if len(d) != 2 * w * h or len(c) != 3 * w * h:
        raise Malformed("payload size does not match intrinsics")
    depth = np.frombuffer(d, dtype="<u2").reshape(h, w).astype(np.uint16)
    color = np.frombuffer(c, dtype=np.uint8).reshape(h, w, 3).copy()
    return FrameMessage(mtype, cam, stamp, intr, depth, color)


def _check_head(head: bytes):
    if head[:4] != MAGIC:
        raise BadMagic(f"bad magic {head[:4]!r}")
    version = struct.unpack_from("<H", head, 4)[0]
    if version != VERSION:
        raise VersionMismatch(f"protocol version {version}, expected {VERSION}")
    mtype = struct.unpack_from("<H", head, 6)[0]
    depth_len, color_len = struct.unpack_from("<II", head, 68)
    if mtype == MessageType.STATUS:
        depth_len = 0
    if depth_len + color_len > MAX_PAYLOAD:
        raise Malformed("payload too large")
    return depth_len + color_len


def decode(data: bytes) -> FrameMessage:
    """Decode exactly one message; trailing bytes are an error."""
    data = bytes(data)
    if len(data) < HEADER.size + CRC.size:
        if len(data) >= 4 and data[:4] != MAGIC:
            raise BadMagic(f"bad magic {data[:4]!r}")
        raise Truncated(f"{len(data)} bytes is shorter than a header")
    n = _check_head(data[:HEADER.size])
    end = HEADER.size + n
    if len(data) < end + CRC.size:
        raise Truncated(f"message needs {end + CRC.size} bytes, got {len(data)}")
    if len(data) > end + CRC.size:
        raise Malformed(f"{len(data) - end - CRC.size} trailing bytes")
    return _parse(data[:HEADER.size], data[HEADER.size:end], data[end:end + CRC.size])


def _read_exact(stream, n: int, at_boundary: bool = False) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            if at_boundary and not buf:
                return None
            raise Truncated(f"stream ended after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


def read_message(stream) -> FrameMessage | None:
    """Next message from a binary stream, or None on a clean end of stream."""
    head = _read_exact(stream, HEADER.size, at_boundary=True)
    if head is None:
        return None
    n = _check_head(head)
    payload = _read_exact(stream, n)
    crc = _read_exact(stream, CRC.size)
    return _parse(head, payload, crc)


def iter_messages(data: bytes):
    stream = io.BytesIO(data)
    while (m := read_message(stream)) is not None:
        yield m


# ---------------------------------------------------------------------------
# Server and client


@dataclass
class ServerStats:
    received: dict = field(default_factory=dict)  # camera -> frames received
    finished: set = field(default_factory=set)
    errors: list = field(default_factory=list)  # (peer, ErrorCode)


class FrameServer:
    """Accepts camera connections and feeds their frames to a session's queues.

    With ``process=True`` a worker thread runs session timesteps whenever
    frames are queued. ``on_bye(camera)`` is called when a camera signs off.
    """

    def __init__(self, session, host: str = "127.0.0.1", port: int = 0, process: bool = True,
                 on_bye=None):
        self.session = session
        self.process = process
        self.on_bye = on_bye
        self.stats = ServerStats()
        self._sock = socket.create_server((host, port))
        self._sock.settimeout(0.2)
        self._stop = threading.Event()
        self._session_lock = threading.Lock()
        self._claimed: set[int] = set()  # camera ids ever announced; rejoining is not supported
        self._conn_lock = threading.Lock()
        self._threads: list[threading.Thread] = []
        self._frame_index: dict[int, int] = {}

    @property
    def address(self) -> tuple[str, int]:
        return self._sock.getsockname()[:2]

    def start(self) -> "FrameServer":
        self._spawn(self._accept_loop)
        if self.process:
            self._spawn(self._process_loop)
        return self

    def _spawn(self, fn, *args):
        t = threading.Thread(target=fn, args=args, daemon=True)
        t.start()
        self._threads.append(t)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def stop(self, drain: bool = True, timeout: float = 30.0) -> None:
        if drain and self.process:
            deadline = time.monotonic() + timeout
            while self.session.pending() and time.monotonic() < deadline:
                time.sleep(0.01)
        self._stop.set()
        for t in self._threads:
            t.join(timeout=5.0)
        self._sock.close()

    def wait_finished(self, cameras, timeout: float = 30.0) -> bool:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if set(cameras) <= self.stats.finished:
                return True
            time.sleep(0.01)
        return False

    def process_pending(self) -> list:
        with self._session_lock:
            return self.session.process_timestep() if self.session.pending() else []

    def _process_loop(self):
        while not self._stop.is_set():
            if self.session.pending():
                self.process_pending()
            else:
                time.sleep(0.005)

    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                conn, peer = self._sock.accept()
            except (socket.timeout, OSError):
                continue
            self._spawn(self._serve_connection, conn, peer)

    def _serve_connection(self, conn: socket.socket, peer):
        conn.settimeout(None)
        stream = conn.makefile("rb")
        camera = None
        try:
            while not self._stop.is_set():
                m = read_message(stream)
                if m is None:
                    break
                if m.type == MessageType.HELLO:
                    camera = self._hello(conn, m)
                    if camera is None:
                        break
                elif camera is None or m.camera_id != camera:
                    conn.sendall(encode(status(m.camera_id, ErrorCode.NOT_REGISTERED)))
                    break
                elif m.type == MessageType.FRAME:
                    i = self._frame_index.get(camera, 0)
                    self._frame_index[camera] = i + 1
                    self.session.submit(to_frame(m, i))  # drops the oldest queued frame when full
                    self.stats.received[camera] = self.stats.received.get(camera, 0) + 1
                elif m.type == MessageType.BYE:
                    self.stats.finished.add(camera)
                    if self.on_bye is not None:
                        self.on_bye(camera)
                    break
        except ProtocolError as e:
            log.warning("dropping connection %s: %s", peer, e)
            self.stats.errors.append((peer, e.code))
            try:
                conn.sendall(encode(status(camera or 0, e.code)))
            except OSError:
                pass
        except Exception as e:  # isolate the session from any single bad client
            log.warning("dropping connection %s: %s", peer, e)
            self.stats.errors.append((peer, ErrorCode.MALFORMED))
        finally:
            stream.close()
            conn.close()

    def _hello(self, conn, m: FrameMessage) -> int | None:
        cam = m.camera_id
        with self._conn_lock:
            if cam in self._claimed:
                conn.sendall(encode(status(cam, ErrorCode.DUPLICATE_CAMERA)))
                self.stats.errors.append((cam, ErrorCode.DUPLICATE_CAMERA))
                return None
            self._claimed.add(cam)
        fx, fy, cx, cy, w, h = m.intrinsics
        with self._session_lock:
            if cam not in self.session.camera_ref:
                self.session.register_camera(cam, Intrinsics(fx, fy, cx, cy, int(w), int(h)))
        conn.sendall(encode(status(cam, ErrorCode.OK)))
        return cam


class CameraClient:
    """Streams one camera's frames to a :class:`FrameServer`."""

    def __init__(self, host: str, port: int, camera_id: int, intrinsics: Intrinsics):
        self.camera_id = camera_id
        self.intrinsics = intrinsics
        self._sock = socket.create_connection((host, port))
        self._in = self._sock.makefile("rb")
        self._said_bye = False

    def __enter__(self):
        return self.hello()

    def __exit__(self, *exc):
        self.close()

    def hello(self) -> "CameraClient":
        self._sock.sendall(encode(hello(self.camera_id, self.intrinsics)))
        reply = read_message(self._in)
        if reply is None or reply.type != MessageType.STATUS:
            raise Malformed("no status reply to hello")
        if reply.status_code != ErrorCode.OK:
            raise Refused(reply.status_code)
        return self

    def send(self, frame: RgbdFrame) -> None:
        if frame.camera_id != self.camera_id:
            raise ValueError("frame belongs to another camera")
        self._sock.sendall(encode(frame_message(frame)))

    def bye(self) -> None:
        if not self._said_bye:
            self._said_bye = True
            self._sock.sendall(encode(bye(self.camera_id)))

    def close(self) -> None:
        try:
            self.bye()
        except OSError:
            pass
        self._in.close()
        self._sock.close()
