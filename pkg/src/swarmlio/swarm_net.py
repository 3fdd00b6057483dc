"""Swarm message schema, little-endian wire codec, and a simulated broadcast bus.

Wire layout (all little-endian, no padding)::

    offset  size  field
    0       4     magic  b"SLIO"
    4       1     version (u8) = 1
    5       1     type (u8): 1 = ego state, 2 = observation
    6       1     sender_id (u8)
    7       4     seq (u32)
    11      8     timestamp (f64, seconds)
    ego state (type 1):
    19      72    rot, 9 x f64 row-major
    91      24    pos, 3 x f64
    115     24    vel, 3 x f64        -> 139 bytes total
    observation (type 2):
    19      1     observed_id (u8)
    20      24    pos_body, 3 x f64   -> 44 bytes total
"""

from __future__ import annotations

import heapq
import json
import math
import struct
import threading
from dataclasses import dataclass
from typing import Union

import numpy as np

MAGIC = b"SLIO"
VERSION = 1
TYPE_EGO = 1
TYPE_OBS = 2

_HEADER = struct.Struct("<4sBB")
_COMMON = struct.Struct("<BId")
_EGO_BODY = struct.Struct("<9d3d3d")
_OBS_BODY = struct.Struct("<B3d")

EGO_SIZE = _HEADER.size + _COMMON.size + _EGO_BODY.size
OBS_SIZE = _HEADER.size + _COMMON.size + _OBS_BODY.size

_ROT_TOL = 1e-6


class WireError(ValueError):
    """Structured decode failure; ``offset`` is the byte position of the problem."""

    kind = "wire-error"

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{self.kind} at byte {offset}: {message}")
        self.offset = offset


class BadMagic(WireError):
    kind = "bad-magic"


class UnsupportedVersion(WireError):
    kind = "unsupported-version"


class UnknownType(WireError):
    kind = "unknown-type"


class Truncated(WireError):
    kind = "truncated"


class TrailingBytes(WireError):
    kind = "trailing-bytes"


class InvalidField(WireError):
    kind = "invalid-field"


@dataclass(frozen=True)
class EgoStateMsg:
    sender_id: int
    seq: int
    timestamp: float
    rot: tuple  # 9 floats, row-major
    pos: tuple
    vel: tuple

    @classmethod
    def from_arrays(cls, sender_id, seq, timestamp, rot, pos, vel) -> EgoStateMsg:
        return cls(
            int(sender_id),
            int(seq),
            float(timestamp),
            tuple(float(v) for v in np.asarray(rot).reshape(9)),
            tuple(float(v) for v in pos),
            tuple(float(v) for v in vel),
        )

    def rot_matrix(self) -> np.ndarray:
        return np.array(self.rot).reshape(3, 3)


@dataclass(frozen=True)
class ObservationMsg:
    sender_id: int
    seq: int
    timestamp: float
    observed_id: int
    pos_body: tuple


Message = Union[EgoStateMsg, ObservationMsg]


def encode(msg: Message) -> bytes:
    if isinstance(msg, EgoStateMsg):
        return (
            _HEADER.pack(MAGIC, VERSION, TYPE_EGO)
            + _COMMON.pack(msg.sender_id, msg.seq, msg.timestamp)
            + _EGO_BODY.pack(*msg.rot, *msg.pos, *msg.vel)
        )
    if isinstance(msg, ObservationMsg):
        if msg.observed_id == msg.sender_id:
            raise ValueError("a drone cannot report an observation of itself")
        return (
            _HEADER.pack(MAGIC, VERSION, TYPE_OBS)
            + _COMMON.pack(msg.sender_id, msg.seq, msg.timestamp)
            + _OBS_BODY.pack(msg.observed_id, *msg.pos_body)
        )
    raise TypeError(f"cannot encode {type(msg).__name__}")


def _is_rotation(r) -> bool:
    # plain-python check: decode sits on the fuzz hot path
    for i in range(3):
        for j in range(3):
            dot = r[3 * i] * r[3 * j] + r[3 * i + 1] * r[3 * j + 1] + r[3 * i + 2] * r[3 * j + 2]
            if not abs(dot - (1.0 if i == j else 0.0)) <= _ROT_TOL:
                return False
    det = (
        r[0] * (r[4] * r[8] - r[5] * r[7])
        - r[1] * (r[3] * r[8] - r[5] * r[6])
        + r[2] * (r[3] * r[7] - r[4] * r[6])
    )
    return abs(det - 1.0) <= _ROT_TOL


def decode(data: bytes) -> Message:
    """Strict parse. Every malformed input raises a ``WireError`` subclass."""
    data = bytes(data)
    n = len(data)
    if n < _HEADER.size:
        if data != MAGIC[:n]:
            raise BadMagic("magic mismatch", 0)
        raise Truncated(f"header needs {_HEADER.size} bytes, got {n}", n)
    magic, version, mtype = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, got {magic!r}", 0)
    if version != VERSION:
        raise UnsupportedVersion(f"version {version}", 4)
    if mtype == TYPE_EGO:
        size = EGO_SIZE
    elif mtype == TYPE_OBS:
        size = OBS_SIZE
    else:
        raise UnknownType(f"type {mtype}", 5)
    if n < size:
        raise Truncated(f"payload needs {size} bytes, got {n}", n)
    if n > size:
        raise TrailingBytes(f"{n - size} unexpected bytes", size)

    sender, seq, stamp = _COMMON.unpack_from(data, _HEADER.size)
    if not math.isfinite(stamp):
        raise InvalidField("timestamp is not finite", 11)
    body = _HEADER.size + _COMMON.size
    if mtype == TYPE_EGO:
        vals = _EGO_BODY.unpack_from(data, body)
        rot, pos, vel = vals[0:9], vals[9:12], vals[12:15]
        if not _is_rotation(rot):
            raise InvalidField("rot is not orthonormal", body)
        if not all(math.isfinite(v) for v in pos + vel):
            raise InvalidField("pos/vel not finite", body + 72)
        return EgoStateMsg(sender, seq, stamp, rot, pos, vel)
    observed, *pos = _OBS_BODY.unpack_from(data, body)
    if observed == sender:
        raise InvalidField("observed_id equals sender_id", body)
    if not all(math.isfinite(v) for v in pos):
        raise InvalidField("pos_body not finite", body + 1)
    return ObservationMsg(sender, seq, stamp, observed, tuple(pos))


def message_to_dict(msg: Message) -> dict:
    kind = "ego" if isinstance(msg, EgoStateMsg) else "obs"
    d = {"type": kind}
    d.update(msg.__dict__)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


@dataclass(frozen=True)
class ChannelModel:
    drop_prob: float = 0.0
    delay_mean: float = 0.0
    delay_jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError("drop_prob must lie in [0, 1]")
        if self.delay_mean < 0.0 or self.delay_jitter < 0.0:
            raise ValueError("delays must be non-negative")


@dataclass(frozen=True)
class Delivery:
    data: bytes
    arrival_time: float
    sender_id: int
    send_time: float


class MessageBus:
    """Broadcast datagram bus over virtual time.

    Each sender draws drop/delay decisions from its own RNG stream, so delivery
    traces depend only on the seed and each sender's send sequence, not on how
    sends from different threads interleave. Receivers get messages ordered by
    (arrival_time, sender_id, send counter).
    """

    def __init__(self, ids, channel: ChannelModel | None = None, capture: bool = False):
        self.channel = channel or ChannelModel()
        self.ids = sorted(int(i) for i in ids)
        self._rngs = {i: np.random.default_rng([self.channel.seed, 0xB05, i]) for i in self.ids}
        self._queues: dict[int, list] = {i: [] for i in self.ids}
        self._send_count = {i: 0 for i in self.ids}
        self.bytes_sent = {i: 0 for i in self.ids}
        self.capture: list[dict] | None = [] if capture else None
        self._lock = threading.Lock()

    def _check(self, drone_id: int) -> None:
        if drone_id not in self._queues:
            raise KeyError(f"drone {drone_id} is not registered on the bus")

    def send(self, from_id: int, data: bytes, t_now: float) -> None:
        self._check(from_id)
        ch = self.channel
        with self._lock:
            rng = self._rngs[from_id]
            counter = self._send_count[from_id]
            self._send_count[from_id] += 1
            self.bytes_sent[from_id] += len(data)
            for to_id in self.ids:
                if to_id == from_id:
                    continue
                # draw both numbers unconditionally: keeps streams aligned across drop settings
                u, z = rng.random(), rng.standard_normal()
                if u < ch.drop_prob:
                    continue
                arrival = t_now + max(0.0, ch.delay_mean + ch.delay_jitter * z)
                heapq.heappush(self._queues[to_id], (arrival, from_id, counter, data, t_now))
                if self.capture is not None:
                    self.capture.append(
                        {
                            "from": from_id,
                            "to": to_id,
                            "send_time": t_now,
                            "arrival_time": arrival,
                            "hex": data.hex(),
                        }
                    )

    def poll(self, to_id: int, t_now: float) -> list[Delivery]:
        self._check(to_id)
        out = []
        with self._lock:
            q = self._queues[to_id]
            while q and q[0][0] <= t_now:
                arrival, sender, _, data, sent = heapq.heappop(q)
                out.append(Delivery(data, arrival, sender, sent))
        return out

    def write_capture(self, path) -> None:
        if self.capture is None:
            raise RuntimeError("bus was created without capture enabled")
        with open(path, "w") as fh:
            for rec in self.capture:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_capture(path) -> list[dict]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                rec["bytes"] = bytes.fromhex(rec["hex"])
            except (ValueError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: bad capture record ({exc})") from exc
            records.append(rec)
    return records


def fuzz_decode(n: int, seed: int = 0) -> dict:
    """Feed ``n`` random and mutated buffers to ``decode``; count outcomes.

    Any exception other than ``WireError`` propagates, which is what the
    fuzz harness treats as a crash.
    """
    rng = np.random.default_rng(seed)
    seeds = [
        encode(EgoStateMsg.from_arrays(1, 7, 1.5, np.eye(3), [1, 2, 3], [0.1, 0.2, 0.3])),
        encode(ObservationMsg(2, 9, 2.5, 3, (0.5, -1.0, 2.0))),
    ]
    counts = {"ok": 0, "error": 0}
    kinds: dict[str, int] = {}
    # pre-draw in chunks; per-call numpy overhead dominates otherwise
    chunk = 4096
    done = 0
    while done < n:
        m = min(chunk, n - done)
        modes = rng.integers(0, 4, size=m)
        lens = rng.integers(0, 160, size=m)
        raw = rng.integers(0, 256, size=(m, 160), dtype=np.uint8)
        picks = rng.integers(0, 2, size=m)
        flips = rng.integers(0, 139 * 8, size=(m, 3))
        for k in range(m):
            mode = modes[k]
            if mode == 0:
                buf = raw[k, : lens[k]].tobytes()
            elif mode == 1:
                base = seeds[picks[k]]
                buf = base[: lens[k] % (len(base) + 1)]
            else:
                b = bytearray(seeds[picks[k]])
                for f in flips[k, : mode]:
                    if f // 8 < len(b):
                        b[f // 8] ^= 1 << (f % 8)
                buf = bytes(b)
            try:
                decode(buf)
                counts["ok"] += 1
            except WireError as exc:
                counts["error"] += 1
                kinds[exc.kind] = kinds.get(exc.kind, 0) + 1
        done += m
    counts["kinds"] = kinds
    counts["n"] = n
    return counts


class StaleFilter:
    """Drops messages whose timestamp does not advance per stream.

    A stream is (sender, type), and for observations also the observed id,
    since one scan can report several teammates under the same timestamp.
    """

    def __init__(self):
        self._last: dict[tuple[int, type], float] = {}
        self.dropped = 0

    def accept(self, msg: Message) -> bool:
        key = (msg.sender_id, type(msg), getattr(msg, "observed_id", None))
        last = self._last.get(key)
        if last is not None and msg.timestamp <= last:
            self.dropped += 1
            return False
        self._last[key] = msg.timestamp
        return True
