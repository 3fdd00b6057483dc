import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swarmlio.manifold import so3_exp
from swarmlio.swarm_net import (
    EGO_SIZE,
    OBS_SIZE,
    BadMagic,
    ChannelModel,
    EgoStateMsg,
    InvalidField,
    MessageBus,
    ObservationMsg,
    StaleFilter,
    Truncated,
    UnknownType,
    UnsupportedVersion,
    WireError,
    decode,
    encode,
    fuzz_decode,
    read_capture,
)


def ego(sender=2, seq=0, t=0.0, rot=np.eye(3), pos=(0, 0, 0), vel=(0, 0, 0)):
    return EgoStateMsg.from_arrays(sender, seq, t, rot, pos, vel)


def test_ego_header_and_length():
    data = encode(ego())
    assert data[:6] == bytes([0x53, 0x4C, 0x49, 0x4F, 0x01, 0x01])
    # 6 header + 1 sender + 4 seq + 8 stamp + 72 rot + 24 pos + 24 vel
    assert len(data) == EGO_SIZE == 139


def test_obs_length():
    data = encode(ObservationMsg(1, 3, 0.1, 2, (1.0, 2.0, 3.0)))
    # 6 header + 1 sender + 4 seq + 8 stamp + 1 observed + 24 pos
    assert len(data) == OBS_SIZE == 44
    assert data[5] == 2


def test_roundtrip_random_messages_bit_exact():
    rng = np.random.default_rng(0)
    for k in range(1000):
        if k % 2:
            m = ego(
                int(rng.integers(0, 256)),
                int(rng.integers(0, 2**32)),
                float(rng.uniform(0, 1e5)),
                so3_exp(rng.normal(size=3)),
                rng.normal(size=3) * 100,
                rng.normal(size=3),
            )
        else:
            s = int(rng.integers(0, 255))
            m = ObservationMsg(s, int(rng.integers(0, 2**32)), float(rng.normal()), s + 1,
                               tuple(float(v) for v in rng.normal(size=3)))
        data = encode(m)
        back = decode(data)
        assert back == m
        assert encode(back) == data


def test_bad_magic():
    data = bytearray(encode(ego()))
    data[0] = ord("X")
    with pytest.raises(BadMagic):
        decode(bytes(data))


def test_unsupported_version():
    data = bytearray(encode(ego()))
    data[4] = 2
    with pytest.raises(UnsupportedVersion):
        decode(bytes(data))


def test_unknown_type():
    data = bytearray(encode(ego()))
    data[5] = 9
    with pytest.raises(UnknownType):
        decode(bytes(data))


def test_truncated_reports_offset():
    data = encode(ego())[:50]
    with pytest.raises(Truncated) as info:
        decode(data)
    assert info.value.offset == 50


def test_non_orthonormal_rotation_rejected():
    m = EgoStateMsg(1, 0, 0.0, (1.0, 0, 0, 0, 1.0, 0, 0, 0, 1.1), (0, 0, 0), (0, 0, 0))
    with pytest.raises(InvalidField):
        decode(encode(m))


def test_self_observation_rejected():
    with pytest.raises(ValueError):
        encode(ObservationMsg(1, 0, 0.0, 1, (0, 0, 0)))


@settings(max_examples=500, deadline=None)
@given(st.binary(max_size=200))
def test_decode_never_crashes(data):
    try:
        decode(data)
    except WireError:
        pass


def test_fuzz_harness_small():
    out = fuzz_decode(20000, seed=1)
    assert out["ok"] + out["error"] == 20000
    assert out["ok"] > 0


def test_stale_filter():
    f = StaleFilter()
    assert f.accept(ego(t=1.0))
    assert not f.accept(ego(t=1.0))
    assert not f.accept(ego(t=0.5))
    assert f.accept(ObservationMsg(2, 0, 0.5, 1, (0, 0, 0)))
    assert f.dropped == 2


def test_bus_lossless_broadcast():
    bus = MessageBus([1, 2, 3])
    bus.send(1, b"hello", 0.3)
    for rid in (2, 3):
        got = bus.poll(rid, 0.3)
        assert [(d.data, d.arrival_time) for d in got] == [(b"hello", 0.3)]
    assert bus.poll(1, 0.3) == []


def test_bus_drop_everything():
    bus = MessageBus([1, 2], ChannelModel(drop_prob=1.0))
    for k in range(100):
        bus.send(1, b"x", k * 0.1)
    assert bus.poll(2, 1e9) == []


def test_bus_delivery_rate():
    n = 100_000
    bus = MessageBus([1, 2], ChannelModel(drop_prob=0.2, seed=5))
    for _ in range(n):
        bus.send(1, b"", 0.0)
    rate = len(bus.poll(2, 0.0)) / n
    # binomial std is sqrt(0.16 / 1e5) = 0.0013, so +-0.01 is a ~8 sigma band
    assert abs(rate - 0.8) < 0.01


def test_bus_delay_ordering_and_determinism():
    def trace(seed):
        bus = MessageBus([1, 2, 3], ChannelModel(0.1, 0.05, 0.03, seed))
        for k in range(200):
            bus.send(1 + k % 3, bytes([k % 256]), k * 0.01)
        return [(d.data, d.arrival_time, d.sender_id) for d in bus.poll(2, 10.0)]

    a, b = trace(3), trace(3)
    assert a == b
    assert [x[1] for x in a] == sorted(x[1] for x in a)
    assert a != trace(4)


def test_bus_no_duplicates():
    bus = MessageBus([1, 2, 3], ChannelModel(0.0, 0.02, 0.05, 1))
    for k in range(500):
        bus.send(1, encode(ego(1, k, k * 0.1)), k * 0.1)
    got = [decode(d.data).seq for d in bus.poll(2, 1e9)]
    assert len(got) == len(set(got)) == 500


def test_bus_rejects_unregistered():
    bus = MessageBus([1, 2])
    with pytest.raises(KeyError):
        bus.send(7, b"", 0.0)
    with pytest.raises(KeyError):
        bus.poll(7, 0.0)


def test_capture_roundtrip(tmp_path):
    bus = MessageBus([1, 2], capture=True)
    bus.send(1, encode(ego(1, 1, 0.1)), 0.1)
    path = tmp_path / "cap.jsonl"
    bus.write_capture(path)
    recs = read_capture(path)
    assert len(recs) == 1 and decode(recs[0]["bytes"]).seq == 1
