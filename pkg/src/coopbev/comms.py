"""Receiver-agnostic feature sharing over a simulated lossy channel.

The sender broadcasts one message containing its feature map in its own
frame plus its pose and grid geometry; every receiver warps locally, so
the encoded bytes are identical no matter who is listening. The channel
is a deterministic event simulation (no sockets): each message is
dropped with a configured probability and otherwise delivered after a
base latency plus uniform jitter, all driven by a seeded generator.

Wire layout (little-endian), checksummed with CRC-32 over header+payload:

    magic "SICP" (4s) | version (u16) | sender_id (u32) | timestamp_us (u64)
    | pose x,y,yaw (3 f64) | grid H (u32), W (u32), resolution (f64),
    origin x,y,yaw (3 f64) | shape C,H,W (3 u32) | dtype tag (u8)
    | payload (row-major) | crc32 (u32)

The header before the payload is 95 bytes.
"""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptPayload, MalformedMessage, Truncated
from .geometry import BEVFeatureMap, GridSpec, Pose2D

MAGIC = b"SICP"
WIRE_VERSION = 1
_HEADER_FMT = "<4sHIQ3dIId3d3IB"
HEADER_LEN = struct.calcsize(_HEADER_FMT)  # 95
_CRC_LEN = 4
_DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


@dataclass
class FeatureMessage:
    sender_id: int
    timestamp_us: int
    pose: Pose2D
    grid: GridSpec
    shape: tuple[int, int, int]
    dtype: np.dtype
    payload: np.ndarray          # (C, H, W), row-major
    crc: int

    def feature_map(self) -> BEVFeatureMap:
        from .autodiff import Tensor
        return BEVFeatureMap(data=Tensor(self.payload), pose=self.pose,
                             grid=self.grid, source_id=self.sender_id)


def encode_message(f: BEVFeatureMap, sender_id: int, timestamp_us: int) -> bytes:
    """Serialize a feature map with its pose and grid; receiver-agnostic."""
    arr = f.data.data if hasattr(f.data, "data") else np.asarray(f.data)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_TAGS:
        dt = np.dtype("<f8")
    arr = np.ascontiguousarray(arr, dtype=dt)
    c, h, w = arr.shape
    header = struct.pack(
        _HEADER_FMT, MAGIC, WIRE_VERSION, sender_id, timestamp_us,
        f.pose.x, f.pose.y, f.pose.yaw,
        f.grid.h, f.grid.w, f.grid.resolution,
        f.grid.origin.x, f.grid.origin.y, f.grid.origin.yaw,
        c, h, w, _DTYPE_TAGS[dt])
    payload = arr.tobytes()
    crc = zlib.crc32(header + payload)
    return header + payload + struct.pack("<I", crc)


def decode_message(blob: bytes) -> FeatureMessage:
    """Parse and validate message bytes.

    Raises MalformedMessage on a bad magic/version/field, Truncated when
    bytes end early, CorruptPayload on a checksum mismatch.
    """
    if len(blob) >= 4 and blob[:4] != MAGIC:
        raise MalformedMessage(f"bad magic {blob[:4]!r}")
    if len(blob) < HEADER_LEN + _CRC_LEN:
        raise Truncated(f"message is {len(blob)} bytes, header needs {HEADER_LEN + _CRC_LEN}")
    (magic, version, sender_id, timestamp_us,
     px, py, pyaw, gh, gw, gres, ox, oy, oyaw,
     c, h, w, dtype_tag) = struct.unpack_from(_HEADER_FMT, blob, 0)
    if magic != MAGIC:
        raise MalformedMessage(f"bad magic {magic!r}")
    if version != WIRE_VERSION:
        raise MalformedMessage(f"unsupported wire version {version}")
    if dtype_tag not in _TAG_DTYPES:
        raise MalformedMessage(f"unknown dtype tag {dtype_tag}")
    dt = _TAG_DTYPES[dtype_tag]
    payload_len = c * h * w * dt.itemsize
    expected = HEADER_LEN + payload_len + _CRC_LEN
    if len(blob) < expected:
        raise Truncated(f"message is {len(blob)} bytes, expected {expected}")
    if len(blob) > expected:
        raise MalformedMessage(f"{len(blob) - expected} trailing bytes")
    crc, = struct.unpack_from("<I", blob, expected - _CRC_LEN)
    if zlib.crc32(blob[:expected - _CRC_LEN]) != crc:
        raise CorruptPayload("crc32 mismatch")
    payload = np.frombuffer(
        blob, dtype=dt, count=c * h * w, offset=HEADER_LEN).reshape(c, h, w).copy()
    try:
        pose = Pose2D(px, py, pyaw)
        grid = GridSpec(gh, gw, gres, Pose2D(ox, oy, oyaw))
    except ValueError as e:
        raise MalformedMessage(f"invalid pose/grid fields: {e}") from e
    return FeatureMessage(sender_id=sender_id, timestamp_us=timestamp_us,
                          pose=pose, grid=grid, shape=(c, h, w),
                          dtype=dt, payload=payload, crc=crc)


# -- lossy channel simulation ---------------------------------------------------

@dataclass
class ChannelModel:
    drop_prob: float = 0.0
    base_latency_ms: float = 10.0
    jitter_ms: float = 0.0
    seed: int = 0


@dataclass
class Delivered:
    arrival_ms: float
    send_ms: float
    sender_id: int
    blob: bytes


@dataclass
class _InFlight:
    arrival_ms: float
    send_ms: float
    sender_id: int
    blob: bytes
    seq: int


class LossyChannel:
    """Deterministic drop/latency simulation over a single logical clock.

    Per-message fate is drawn from one seeded generator in send order,
    so the full delivery trace is reproducible.
    """

    def __init__(self, model: ChannelModel):
        self.model = model
        self._rng = np.random.default_rng(model.seed)
        self._in_flight: list[_InFlight] = []
        self._seq = 0
        self.trace: list[dict] = []

    def send(self, blob: bytes, send_ms: float, sender_id: int) -> None:
        u_drop = float(self._rng.random())
        u_jit = float(self._rng.random())
        self._seq += 1
        if u_drop < self.model.drop_prob:
            self.trace.append({"event": "drop", "send_ms": send_ms,
                               "sender_id": sender_id})
            return
        arrival = send_ms + self.model.base_latency_ms + self.model.jitter_ms * u_jit
        self._in_flight.append(_InFlight(arrival, send_ms, sender_id, blob, self._seq))
        self.trace.append({"event": "send", "send_ms": send_ms,
                           "arrival_ms": arrival, "sender_id": sender_id})

    def step(self, now_ms: float) -> list[Delivered]:
        """Messages whose arrival time has passed, in (arrival, sender) order."""
        due = [m for m in self._in_flight if m.arrival_ms <= now_ms]
        self._in_flight = [m for m in self._in_flight if m.arrival_ms > now_ms]
        due.sort(key=lambda m: (m.arrival_ms, m.sender_id, m.seq))
        return [Delivered(m.arrival_ms, m.send_ms, m.sender_id, m.blob) for m in due]


def channel_step(in_flight: list[tuple[bytes, float, int]], model: ChannelModel,
                 now_ms: float) -> list[Delivered]:
    """One-shot functional form: send everything, then poll at now_ms."""
    chan = LossyChannel(model)
    for blob, send_ms, sender_id in in_flight:
        chan.send(blob, send_ms, sender_id)
    return chan.step(now_ms)


@dataclass
class Deadline:
    budget_ms: float = 100.0

    def __post_init__(self):
        if self.budget_ms <= 0:
            raise ValueError(f"deadline budget must be positive, got {self.budget_ms}")


def select_partner_fcfs(delivered: list[Delivered], deadline: Deadline,
                        frame_time_ms: float, ego_pose: Pose2D,
                        comm_range: float) -> FeatureMessage | None:
    """First valid arrival within the frame budget, or None (individual mode).

    Validity: decodable (magic/crc/length), sender within comm_range of
    the ego pose, arrival no later than frame_time + budget.
    """
    cutoff = frame_time_ms + deadline.budget_ms
    for d in sorted(delivered, key=lambda m: (m.arrival_ms, m.sender_id)):
        if d.arrival_ms > cutoff:
            continue
        try:
            msg = decode_message(d.blob)
        except (MalformedMessage, CorruptPayload, Truncated):
            continue
        if msg.pose.distance_to(ego_pose) > comm_range:
            continue
        return msg
    return None


# -- loopback byte-stream transport ----------------------------------------------

class StreamTransport:
    """Length-prefixed message framing over a pair of binary streams."""

    def __init__(self, rx: io.BufferedIOBase, tx: io.BufferedIOBase):
        self._rx = rx
        self._tx = tx

    def send_bytes(self, blob: bytes) -> None:
        self._tx.write(struct.pack("<I", len(blob)))
        self._tx.write(blob)
        self._tx.flush()

    def recv_bytes(self) -> bytes | None:
        head = self._rx.read(4)
        if head is None or len(head) < 4:
            return None
        n, = struct.unpack("<I", head)
        blob = self._rx.read(n)
        if blob is None or len(blob) < n:
            raise Truncated(f"stream ended mid-frame ({0 if blob is None else len(blob)}/{n})")
        return blob


class _PipeBuffer(io.RawIOBase):
    def __init__(self):
        self._buf = bytearray()

    def write(self, b):
        self._buf.extend(b)
        return len(b)

    def read(self, n=-1):
        if n < 0:
            n = len(self._buf)
        out = bytes(self._buf[:n])
        del self._buf[:n]
        return out

    def flush(self):
        pass


def loopback_pair() -> tuple[StreamTransport, StreamTransport]:
    """Two connected in-memory endpoints for integration tests."""
    a_to_b = _PipeBuffer()
    b_to_a = _PipeBuffer()
    return StreamTransport(b_to_a, a_to_b), StreamTransport(a_to_b, b_to_a)
