"""Simulated broadcast channel with a bit-exact wire format and byte accounting.

Envelope header (10 bytes, little-endian): type u8 | sender u8 | seq u32 |
payload length u32.  Scalars are float64 for plane/pose state and float32 for
point clouds and descriptor matrices.  The channel delivers per-sender FIFO to
every other agent and tallies bytes per (sender, message type); accounting is
either per send ("broadcast") or per receiver-delivery ("per-receiver").
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .descriptor import RoomDescriptor
from .distill import DistilledGraph, DistilledRoom, DistilledWall
from .geometry import Plane

MSG_DISTILLED = 1
MSG_DESCRIPTOR = 2
MSG_CLOUD_REQUEST = 3
MSG_CLOUD_RESPONSE = 4

MSG_NAMES = {
    MSG_DISTILLED: "distilled_graph",
    MSG_DESCRIPTOR: "room_descriptor",
    MSG_CLOUD_REQUEST: "cloud_request",
    MSG_CLOUD_RESPONSE: "cloud_response",
}

_HEADER = struct.Struct("<BBII")


class MalformedMessageError(ValueError):
    """Buffer cannot be decoded: truncated, bad type, or length mismatch."""


class UnknownRoomError(KeyError):
    """A cloud request referenced a room the responder does not have."""


@dataclass
class CloudRequest:
    target: int
    room_index: int


@dataclass
class CloudResponse:
    target: int
    room_index: int
    found: bool
    points: np.ndarray  # (N, 3) float32, room-frame

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32).reshape(-1, 3)


@dataclass
class Envelope:
    msg_type: int
    sender: int
    seq: int
    payload: bytes

    @property
    def nbytes(self) -> int:
        return _HEADER.size + len(self.payload)

    def message(self):
        return decode_payload(self.msg_type, self.sender, self.payload)


# ---------------------------------------------------------------------------
# payload codecs
# ---------------------------------------------------------------------------


def _pack_f64(values) -> bytes:
    return np.asarray(values, dtype="<f8").tobytes()


def _pack_f32(values) -> bytes:
    return np.asarray(values, dtype="<f4").tobytes()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise MalformedMessageError("payload truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").copy()

    def f32(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * n), dtype="<f4").copy()

    def done(self):
        if self.pos != len(self.buf):
            raise MalformedMessageError("trailing bytes in payload")


def encode_payload(msg) -> tuple[int, bytes]:
    if isinstance(msg, DistilledGraph):
        parts = [struct.pack("<I", msg.seq)]
        if msg.floor is not None:
            parts.append(b"\x01" + _pack_f64(msg.floor))
        else:
            parts.append(b"\x00")
        parts.append(struct.pack("<H", len(msg.walls)))
        for w in msg.walls:
            parts.append(struct.pack("<I", w.index))
            parts.append(_pack_f64([*w.plane.normal, w.plane.offset]))
            parts.append(_pack_f64(w.covariance.ravel()))
        parts.append(struct.pack("<H", len(msg.rooms)))
        for r in msg.rooms:
            parts.append(struct.pack("<I", r.index))
            parts.append(_pack_f64(r.center))
            parts.append(struct.pack("<4I", *r.wall_indices))
        return MSG_DISTILLED, b"".join(parts)

    if isinstance(msg, RoomDescriptor):
        head = struct.pack("<IHH", msg.room_index, msg.n_sectors, msg.n_rings)
        meta = _pack_f64([msg.max_radius, msg.frame_yaw]) + _pack_f32(msg.extents)
        return MSG_DESCRIPTOR, head + meta + _pack_f32(msg.matrix.ravel())

    if isinstance(msg, CloudRequest):
        return MSG_CLOUD_REQUEST, struct.pack("<BI", msg.target, msg.room_index)

    if isinstance(msg, CloudResponse):
        head = struct.pack("<BIBI", msg.target, msg.room_index,
                           1 if msg.found else 0, len(msg.points))
        return MSG_CLOUD_RESPONSE, head + _pack_f32(msg.points.ravel())

    raise TypeError(f"cannot encode {type(msg).__name__}")


def decode_payload(msg_type: int, sender: int, payload: bytes):
    r = _Reader(payload)
    if msg_type == MSG_DISTILLED:
        seq = r.u32()
        floor = r.f64(3) if r.u8() else None
        walls = []
        for _ in range(r.u16()):
            idx = r.u32()
            nd = r.f64(4)
            cov = r.f64(9).reshape(3, 3)
            walls.append(DistilledWall(idx, Plane(nd[:3], nd[3], cov), cov))
        rooms = []
        for _ in range(r.u16()):
            idx = r.u32()
            center = r.f64(2)
            wall_idx = struct.unpack("<4I", r.take(16))
            rooms.append(DistilledRoom(idx, center, wall_idx))
        r.done()
        return DistilledGraph(sender, seq, walls, rooms, floor)

    if msg_type == MSG_DESCRIPTOR:
        room_index = r.u32()
        n_s, n_r = r.u16(), r.u16()
        if n_s == 0 or n_r == 0 or n_s > 4096 or n_r > 4096:
            raise MalformedMessageError("implausible descriptor dimensions")
        meta = r.f64(2)
        extents = r.f32(2)
        mat = r.f32(n_s * n_r).reshape(n_s, n_r)
        r.done()
        return RoomDescriptor(sender, room_index, mat, extents,
                              float(meta[1]), n_s, n_r, float(meta[0]))

    if msg_type == MSG_CLOUD_REQUEST:
        target = r.u8()
        room_index = r.u32()
        r.done()
        return CloudRequest(target, room_index)

    if msg_type == MSG_CLOUD_RESPONSE:
        target = r.u8()
        room_index = r.u32()
        found = bool(r.u8())
        n = r.u32()
        pts = r.f32(3 * n).reshape(-1, 3)
        r.done()
        return CloudResponse(target, room_index, found, pts)

    raise MalformedMessageError(f"unknown message type {msg_type}")


def encode(msg, sender: int, seq: int) -> bytes:
    msg_type, payload = encode_payload(msg)
    return _HEADER.pack(msg_type, sender, seq, len(payload)) + payload


def decode(data: bytes) -> Envelope:
    if len(data) < _HEADER.size:
        raise MalformedMessageError("buffer shorter than header")
    msg_type, sender, seq, length = _HEADER.unpack_from(data)
    if msg_type not in MSG_NAMES:
        raise MalformedMessageError(f"bad type byte {msg_type}")
    if len(data) != _HEADER.size + length:
        raise MalformedMessageError("payload length mismatch")
    return Envelope(msg_type, sender, seq, data[_HEADER.size:])


# ---------------------------------------------------------------------------
# channel
# ---------------------------------------------------------------------------


@dataclass
class ChannelStats:
    counts: dict = field(default_factory=dict)   # (sender, type) -> [msgs, bytes]
    events: list = field(default_factory=list)   # (tick, sender, type, bytes)

    def record(self, tick: int, sender: int, msg_type: int, nbytes: int) -> None:
        key = (sender, msg_type)
        entry = self.counts.setdefault(key, [0, 0])
        entry[0] += 1
        entry[1] += nbytes
        self.events.append((tick, sender, msg_type, nbytes))

    def bytes_by_type(self) -> dict[str, int]:
        out = {name: 0 for name in MSG_NAMES.values()}
        for (_, msg_type), (_, b) in self.counts.items():
            out[MSG_NAMES[msg_type]] += b
        return out

    def messages_by_type(self) -> dict[str, int]:
        out = {name: 0 for name in MSG_NAMES.values()}
        for (_, msg_type), (c, _) in self.counts.items():
            out[MSG_NAMES[msg_type]] += c
        return out

    @property
    def total_bytes(self) -> int:
        return sum(b for _, b in self.counts.values())


class Channel:
    """Deterministic broadcast medium between agents.

    Delivery is per-sender FIFO to every agent except the sender; direct
    sends reach only their target.  `accounting` chooses whether a broadcast
    is billed once or once per receiver.
    """

    def __init__(self, agent_ids, accounting: str = "broadcast",
                 drop_probability: float = 0.0,
                 rng: np.random.Generator | None = None):
        if accounting not in ("broadcast", "per-receiver"):
            raise ValueError(f"unknown accounting mode {accounting!r}")
        self.agents = list(agent_ids)
        self.accounting = accounting
        self.drop_probability = drop_probability
        self.rng = rng or np.random.default_rng(0)
        self.queues: dict[int, list[bytes]] = {a: [] for a in self.agents}
        self.stats = ChannelStats()
        self.tick = 0
        self._seq = {a: 0 for a in self.agents}
        self._pending_requests: set[tuple[int, int, int]] = set()

    def advance_tick(self) -> None:
        self.tick += 1

    def _next_seq(self, sender: int) -> int:
        s = self._seq[sender]
        self._seq[sender] += 1
        return s

    def _deliver(self, data: bytes, receivers) -> None:
        for a in receivers:
            if self.drop_probability > 0 and self.rng.random() < self.drop_probability:
                continue
            self.queues[a].append(data)

    def broadcast(self, sender: int, msg) -> int:
        data = encode(msg, sender, self._next_seq(sender))
        receivers = [a for a in self.agents if a != sender]
        mult = len(receivers) if self.accounting == "per-receiver" else 1
        env = decode(data)
        self.stats.record(self.tick, sender, env.msg_type, len(data) * mult)
        self._deliver(data, receivers)
        return len(data)

    def send(self, sender: int, target: int, msg) -> int:
        if target not in self.queues:
            raise KeyError(f"unknown agent {target}")
        data = encode(msg, sender, self._next_seq(sender))
        env = decode(data)
        self.stats.record(self.tick, sender, env.msg_type, len(data))
        if env.msg_type == MSG_CLOUD_RESPONSE:
            self._pending_requests.discard((target, sender, env.message().room_index))
        self._deliver(data, [target])
        return len(data)

    def request_cloud(self, requester: int, responder: int, room_index: int) -> bool:
        """Point-to-point cloud request; duplicates of an outstanding request
        are suppressed without sending bytes."""
        key = (requester, responder, room_index)
        if key in self._pending_requests:
            return False
        self._pending_requests.add(key)
        self.send(requester, responder, CloudRequest(responder, room_index))
        return True

    def poll(self, agent: int) -> list[Envelope]:
        """Drain this agent's queue in delivery order."""
        out = [decode(d) for d in self.queues[agent]]
        self.queues[agent] = []
        return out
