import numpy as np
import pytest

from collabslam.comms import (
    Channel,
    CloudRequest,
    CloudResponse,
    MalformedMessageError,
    MSG_CLOUD_REQUEST,
    MSG_DESCRIPTOR,
    MSG_DISTILLED,
    decode,
    encode,
)
from collabslam.descriptor import RoomDescriptor
from collabslam.distill import DistilledGraph, DistilledRoom, DistilledWall
from collabslam.geometry import Plane, make_plane


def random_distilled(rng, sender=0):
    walls = []
    for i in range(rng.integers(0, 6)):
        n = rng.normal(size=3)
        cov = np.diag(rng.uniform(1e-6, 1e-2, 3))
        walls.append(DistilledWall(int(i), make_plane(n, rng.uniform(-8, 8)), cov))
    rooms = []
    if len(walls) >= 4:
        for j in range(rng.integers(0, 3)):
            idx = rng.choice(len(walls), 4, replace=False)
            rooms.append(DistilledRoom(int(j), rng.uniform(-5, 5, 2),
                                       tuple(int(k) for k in idx)))
    floor = rng.uniform(-5, 5, 3) if rng.random() < 0.5 else None
    return DistilledGraph(sender, int(rng.integers(0, 1000)), walls, rooms, floor)


def random_descriptor(rng, sender=0):
    return RoomDescriptor(sender, int(rng.integers(0, 50)),
                          rng.uniform(0, 3, (60, 20)).astype(np.float32),
                          rng.uniform(2, 8, 2).astype(np.float32),
                          float(rng.uniform(-np.pi, np.pi)))


def random_response(rng, sender=0):
    n = int(rng.integers(0, 300))
    return CloudResponse(int(rng.integers(0, 4)), int(rng.integers(0, 50)),
                         bool(rng.random() < 0.9),
                         rng.uniform(-5, 5, (n, 3)).astype(np.float32))


def assert_distilled_equal(a: DistilledGraph, b: DistilledGraph):
    assert (a.sender, a.seq) == (b.sender, b.seq)
    assert len(a.walls) == len(b.walls) and len(a.rooms) == len(b.rooms)
    for wa, wb in zip(a.walls, b.walls):
        assert wa.index == wb.index
        np.testing.assert_array_equal(wa.plane.normal, wb.plane.normal)
        assert wa.plane.offset == wb.plane.offset
        np.testing.assert_array_equal(wa.covariance, wb.covariance)
    for ra, rb in zip(a.rooms, b.rooms):
        assert ra.index == rb.index and ra.wall_indices == rb.wall_indices
        np.testing.assert_array_equal(ra.center, rb.center)
    if a.floor is None:
        assert b.floor is None
    else:
        np.testing.assert_array_equal(a.floor, b.floor)


class TestRoundTrip:
    def test_distilled_fuzz(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            msg = random_distilled(rng)
            env = decode(encode(msg, 0, 7))
            assert env.msg_type == MSG_DISTILLED and env.seq == 7
            assert_distilled_equal(env.message(), msg)

    def test_descriptor_fuzz(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            msg = random_descriptor(rng)
            got = decode(encode(msg, 0, 1)).message()
            assert got.room_index == msg.room_index
            assert (got.n_sectors, got.n_rings) == (60, 20)
            assert got.max_radius == msg.max_radius
            assert got.frame_yaw == msg.frame_yaw
            np.testing.assert_array_equal(got.matrix, msg.matrix)
            np.testing.assert_array_equal(got.extents, msg.extents)

    def test_request_fuzz(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            msg = CloudRequest(int(rng.integers(0, 255)), int(rng.integers(0, 10000)))
            got = decode(encode(msg, 3, 2)).message()
            assert (got.target, got.room_index) == (msg.target, msg.room_index)

    def test_response_fuzz(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            msg = random_response(rng)
            got = decode(encode(msg, 1, 9)).message()
            assert (got.target, got.room_index, got.found) == (
                msg.target, msg.room_index, msg.found)
            np.testing.assert_array_equal(got.points, msg.points)

    def test_descriptor_payload_size(self):
        rng = np.random.default_rng(4)
        msg = random_descriptor(rng)
        env = decode(encode(msg, 0, 0))
        # 60*20 float32 matrix plus fixed metadata
        assert len(env.payload) == 60 * 20 * 4 + 4 + 2 + 2 + 16 + 8


class TestMalformed:
    def test_truncated(self):
        rng = np.random.default_rng(5)
        data = encode(random_descriptor(rng), 0, 0)
        with pytest.raises(MalformedMessageError):
            decode(data[:-3])
        with pytest.raises(MalformedMessageError):
            decode(data[:5])

    def test_bad_type_byte(self):
        data = bytearray(encode(CloudRequest(1, 2), 0, 0))
        data[0] = 99
        with pytest.raises(MalformedMessageError):
            decode(bytes(data))

    def test_payload_length_mismatch(self):
        data = encode(CloudRequest(1, 2), 0, 0) + b"xx"
        with pytest.raises(MalformedMessageError):
            decode(data)

    def test_inner_truncation(self):
        rng = np.random.default_rng(6)
        msg = random_distilled(rng)
        while not msg.walls:
            msg = random_distilled(rng)
        good = encode(msg, 0, 0)
        # shrink the payload but fix up the header length so only the inner
        # structure is inconsistent
        import struct
        payload = good[10:-8]
        header = struct.pack("<BBII", good[0], good[1], 0, len(payload))
        with pytest.raises(MalformedMessageError):
            decode(header + payload).message()


class TestChannel:
    def test_broadcast_reaches_others_only(self):
        ch = Channel([0, 1, 2])
        ch.broadcast(0, CloudRequest(1, 5))
        assert ch.poll(0) == []
        assert len(ch.poll(1)) == 1
        assert len(ch.poll(2)) == 1
        assert ch.poll(1) == []  # drained

    def test_empty_poll(self):
        ch = Channel([0, 1])
        assert ch.poll(0) == []

    def test_fifo_order(self):
        ch = Channel([0, 1])
        for i in range(5):
            ch.broadcast(0, CloudRequest(1, i))
        got = [env.message().room_index for env in ch.poll(1)]
        assert got == list(range(5))

    def test_accounting_modes(self):
        rng = np.random.default_rng(7)
        msg = random_descriptor(rng)
        one = Channel([0, 1, 2], accounting="broadcast")
        n = one.broadcast(0, msg)
        assert one.stats.total_bytes == n
        per = Channel([0, 1, 2], accounting="per-receiver")
        per.broadcast(0, msg)
        assert per.stats.total_bytes == 2 * n

    def test_conservation(self):
        rng = np.random.default_rng(8)
        ch = Channel([0, 1, 2])
        expect = 0
        for _ in range(50):
            sender = int(rng.integers(0, 3))
            msg = random_descriptor(rng, sender)
            expect += ch.broadcast(sender, msg)
        assert ch.stats.total_bytes == expect
        by_type = ch.stats.bytes_by_type()
        assert sum(by_type.values()) == expect

    def test_request_dedup(self):
        ch = Channel([0, 1])
        assert ch.request_cloud(0, 1, 7)
        before = ch.stats.total_bytes
        assert not ch.request_cloud(0, 1, 7)  # suppressed, no bytes
        assert ch.stats.total_bytes == before
        # the response clears the pending slot
        ch.send(1, 0, CloudResponse(0, 7, True, np.zeros((1, 3), np.float32)))
        assert ch.request_cloud(0, 1, 7)

    def test_direct_send_targets_one(self):
        ch = Channel([0, 1, 2])
        ch.send(0, 2, CloudResponse(2, 1, True, np.zeros((0, 3), np.float32)))
        assert ch.poll(1) == []
        assert len(ch.poll(2)) == 1
