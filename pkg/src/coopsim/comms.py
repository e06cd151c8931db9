"""Object-level V2V messages: wire codec, simulated link, inbox buffering and fusion."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from coopsim.core import ObjectClass, ObjectState, Pose2D, ValidationError

MAGIC = b"CPDV"
VERSION = 1
HEADER = struct.Struct("<4sBIIIfffHB")
DETECTION = struct.Struct("<3f3ff2fBHiB4x")
HEADER_SIZE = HEADER.size
DETECTION_SIZE = DETECTION.size
MAX_DETECTIONS = 255
NO_TRACK = 255
Q16 = 65535

assert HEADER_SIZE == 32 and DETECTION_SIZE == 48

_F32_PI = float(np.nextafter(np.float32(math.pi), np.float32(0.0)))
_F32_MAX = float(np.finfo(np.float32).max)


class EncodeError(ValidationError):
    def __init__(self, reason: str, message: str) -> None:
        super().__init__(f"{reason}: {message}")
        self.reason = reason


class DecodeError(ValidationError):
    """Typed decode failure; ``reason`` is one of ``DECODE_REASONS``."""

    def __init__(self, reason: str, message: str) -> None:
        super().__init__(f"{reason}: {message}")
        self.reason = reason


DECODE_REASONS = ("bad_magic", "bad_version", "truncated", "count_mismatch", "invalid_field")


@dataclass(frozen=True)
class V2VMessage:
    """One broadcast: the sender's refined pose plus its world-frame detections."""

    sender_id: int
    sequence: int
    send_timestamp: int  # microseconds
    sender_pose: Pose2D
    pose_quality: float
    detections: tuple[ObjectState, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "detections", tuple(self.detections))
        if not 0.0 <= self.pose_quality <= 1.0:
            raise ValidationError(f"pose_quality must be in [0, 1], got {self.pose_quality}")


# -- codec -------------------------------------------------------------------


def _f32(v: float, what: str) -> float:
    if not math.isfinite(v) or abs(v) > _F32_MAX:
        raise EncodeError("invalid_field", f"{what}={v!r} does not fit a 32-bit float")
    return float(np.float32(v))


def _f32_angle(v: float, what: str) -> float:
    """float32 angle kept inside (-pi, pi] so re-wrapping after decode is a no-op."""
    f = _f32(v, what)
    return min(max(f, -_F32_PI), _F32_PI)


def _u16(v: float) -> int:
    return int(round(v * Q16))


def quantize(msg: V2VMessage) -> V2VMessage:
    """The message exactly as it will come out of ``decode_message(encode_message(msg))``."""
    ts = msg.send_timestamp
    dets = []
    for d in msg.detections:
        dets.append(
            ObjectState(
                center=tuple(_f32(v, "center") for v in d.center),
                size=tuple(_f32(v, "size") for v in d.size),
                yaw=_f32_angle(d.yaw, "yaw"),
                velocity=tuple(_f32(v, "velocity") for v in d.velocity),
                class_id=d.class_id,
                confidence=_u16(d.confidence) / Q16,
                timestamp=d.timestamp,
                source_id=msg.sender_id,
                track_id=d.track_id if 0 <= d.track_id < NO_TRACK else -1,
            )
        )
    pose = msg.sender_pose
    return V2VMessage(
        msg.sender_id,
        msg.sequence,
        ts,
        Pose2D(_f32(pose.x, "pose.x"), _f32(pose.y, "pose.y"), _f32_angle(pose.theta, "pose.theta")),
        _u16(msg.pose_quality) / Q16,
        tuple(dets),
    )


def encode_message(msg: V2VMessage) -> bytes:
    """Fixed little-endian layout: 32-byte header then 48 bytes per detection."""
    n = len(msg.detections)
    if n > MAX_DETECTIONS:
        raise EncodeError("count_overflow", f"{n} detections exceed the limit of {MAX_DETECTIONS}")
    for name, v in (("sender_id", msg.sender_id), ("sequence", msg.sequence), ("send_timestamp", msg.send_timestamp)):
        if not 0 <= v < 2**32:
            raise EncodeError("invalid_field", f"{name}={v} does not fit 32 bits")
    q = quantize(msg)
    p = q.sender_pose
    out = bytearray(HEADER.pack(MAGIC, VERSION, q.sender_id, q.sequence, q.send_timestamp, p.x, p.y, p.theta, _u16(msg.pose_quality), n))
    for d in q.detections:
        delta = d.timestamp - q.send_timestamp
        if not -(2**31) <= delta < 2**31:
            raise EncodeError("invalid_field", f"detection timestamp delta {delta} us does not fit 32 bits")
        out += DETECTION.pack(
            *d.center,
            *d.size,
            d.yaw,
            *d.velocity,
            int(d.class_id),
            _u16(d.confidence),
            delta,
            d.track_id if d.track_id >= 0 else NO_TRACK,
        )
    return bytes(out)


def _check_angle(v: float, what: str) -> None:
    if not -math.pi < v <= math.pi:
        raise DecodeError("invalid_field", f"{what}={v!r} outside (-pi, pi]")


def _check_finite(values: Iterable[float], what: str) -> None:
    if not all(math.isfinite(v) for v in values):
        raise DecodeError("invalid_field", f"{what} contains a non-finite value")


def decode_message(data: bytes) -> V2VMessage:
    """Inverse of :func:`encode_message`; raises :class:`DecodeError` on any malformed input."""
    data = bytes(data)
    if data[:4] != MAGIC[: len(data)]:
        raise DecodeError("bad_magic", f"expected {MAGIC!r}, got {data[:4]!r}")
    if len(data) < 5:
        raise DecodeError("truncated", f"{len(data)} bytes is shorter than the header")
    if data[4] != VERSION:
        raise DecodeError("bad_version", f"unsupported version {data[4]}")
    if len(data) < HEADER_SIZE:
        raise DecodeError("truncated", f"{len(data)} bytes is shorter than the {HEADER_SIZE}-byte header")
    _, _, sender, seq, ts, px, py, pth, quality, n = HEADER.unpack_from(data)
    need = HEADER_SIZE + n * DETECTION_SIZE
    if len(data) < need:
        raise DecodeError("truncated", f"header announces {n} detections ({need} bytes), got {len(data)}")
    if len(data) > need:
        raise DecodeError("count_mismatch", f"header announces {n} detections but {len(data) - need} extra bytes follow")
    _check_finite((px, py, pth), "sender pose")
    _check_angle(pth, "sender pose heading")
    dets = []
    for i in range(n):
        off = HEADER_SIZE + i * DETECTION_SIZE
        if any(data[off + DETECTION_SIZE - 4 : off + DETECTION_SIZE]):
            raise DecodeError("invalid_field", f"detection {i}: reserved bytes are not zero")
        cx, cy, cz, sl, sw, sh, yaw, vx, vy, cls, conf, delta, track = DETECTION.unpack_from(data, off)
        _check_finite((cx, cy, cz, sl, sw, sh, yaw, vx, vy), f"detection {i}")
        _check_angle(yaw, f"detection {i} yaw")
        if min(sl, sw, sh) <= 0.0:
            raise DecodeError("invalid_field", f"detection {i}: non-positive box size")
        try:
            klass = ObjectClass(cls)
        except ValueError:
            raise DecodeError("invalid_field", f"detection {i}: unknown class {cls}") from None
        dets.append(
            ObjectState(
                center=(cx, cy, cz),
                size=(sl, sw, sh),
                yaw=yaw,
                velocity=(vx, vy),
                class_id=klass,
                confidence=conf / Q16,
                timestamp=ts + delta,
                source_id=sender,
                track_id=-1 if track == NO_TRACK else track,
            )
        )
    return V2VMessage(sender, seq, ts, Pose2D(px, py, pth), quality / Q16, tuple(dets))


# -- link --------------------------------------------------------------------


@dataclass(frozen=True)
class LinkModel:
    """Radio stand-in: fixed latency, uniform jitter and Bernoulli loss (times in ms)."""

    base_latency: float = 20.0
    jitter: float = 0.0
    loss_rate: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.base_latency < 0 or self.jitter < 0 or self.jitter > self.base_latency:
            raise ValidationError("need 0 <= jitter <= base_latency")
        if not 0.0 <= self.loss_rate <= 1.0:
            raise ValidationError(f"loss_rate must be in [0, 1], got {self.loss_rate}")


def link_deliver(link: LinkModel, msg: V2VMessage, send_time: int) -> int | None:
    """Delivery time in microseconds, or ``None`` if the message is lost.

    The draw is keyed on (seed, sender, sequence), so the outcome for a
    message does not depend on the order in which messages are offered.
    """
    rng = np.random.default_rng([link.seed, msg.sender_id, msg.sequence])
    lost, jitter = rng.random(2)
    if link.loss_rate > 0.0 and lost < link.loss_rate:
        return None
    delay_ms = link.base_latency + (2.0 * jitter - 1.0) * link.jitter if link.jitter > 0 else link.base_latency
    return int(send_time) + int(round(delay_ms * 1000.0))


@dataclass
class Inbox:
    """Per-receiver buffer.

    Messages become visible once their delivery time has passed; anything
    delivered between ticks is therefore applied at the next tick. For each
    sender only sequences newer than the last one handed out are released,
    which keeps per-sender ordering.
    """

    pending: list[tuple[int, V2VMessage]] = field(default_factory=list)
    last_sequence: dict[int, int] = field(default_factory=dict)
    discarded_out_of_order: int = 0

    def push(self, msg: V2VMessage, deliver_time: int) -> None:
        self.pending.append((int(deliver_time), msg))

    def collect(self, now: int) -> list[tuple[V2VMessage, int]]:
        """Newest deliverable message per sender, ordered by sender id."""
        ready = [(t, m) for t, m in self.pending if t <= now]
        self.pending = [(t, m) for t, m in self.pending if t > now]
        newest: dict[int, tuple[V2VMessage, int]] = {}
        for t, m in sorted(ready, key=lambda tm: (tm[1].sender_id, tm[1].sequence)):
            if m.sequence <= self.last_sequence.get(m.sender_id, -1):
                self.discarded_out_of_order += 1
                continue
            if m.sender_id in newest:
                self.discarded_out_of_order += 1
            newest[m.sender_id] = (m, t)
        for sid, (m, _) in newest.items():
            self.last_sequence[sid] = m.sequence
        return [newest[k] for k in sorted(newest)]


@dataclass
class BandwidthMeter:
    """Byte log of transmitted messages."""

    records: list[tuple[int, int]] = field(default_factory=list)  # (time us, bytes)

    def add(self, t_us: int, nbytes: int) -> None:
        self.records.append((int(t_us), int(nbytes)))

    @property
    def total_bytes(self) -> int:
        return sum(b for _, b in self.records)

    def bits_per_second(self, window_s: float) -> float:
        """Total transmitted bits divided by ``window_s``."""
        if window_s <= 0:
            raise ValidationError("window must be positive")
        return self.total_bytes * 8 / window_s


# -- fusion ------------------------------------------------------------------


@dataclass(frozen=True)
class FusionPolicy:
    trust: Mapping[int, float] = field(default_factory=dict)
    tau_ms: float = 300.0
    confidence_floor: float = 0.1
    dedup_m: float = 2.0
    stale_ms: float = 500.0
    default_trust: float = 0.0

    ego_weight = 1.0

    def __post_init__(self) -> None:
        if self.tau_ms <= 0 or self.stale_ms <= 0 or self.dedup_m < 0:
            raise ValidationError("tau, staleness cutoff and dedup distance must be positive")
        for v in (*self.trust.values(), self.confidence_floor, self.default_trust):
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"trust and confidence floor must lie in [0, 1], got {v}")

    def trust_of(self, sender_id: int) -> float:
        return float(self.trust.get(sender_id, self.default_trust))


def remote_weight(policy: FusionPolicy, sender_id: int, confidence: float, age_us: int) -> float:
    """trust * max(confidence, floor) * exp(-age / tau); never above the ego weight."""
    age_ms = max(age_us, 0) / 1000.0
    return policy.trust_of(sender_id) * max(confidence, policy.confidence_floor) * math.exp(-age_ms / policy.tau_ms)


@dataclass(frozen=True)
class FusedObject:
    obj: ObjectState
    weight: float
    remote: bool


@dataclass(frozen=True)
class FusionResult:
    objects: tuple[FusedObject, ...]
    stale_messages: int = 0
    merged: int = 0
    self_echoes: int = 0

    def __iter__(self) -> Iterator[tuple[ObjectState, float]]:
        return ((f.obj, f.weight) for f in self.objects)

    def __len__(self) -> int:
        return len(self.objects)

    def pairs(self) -> list[tuple[ObjectState, float]]:
        return list(self)


def fuse_detections(
    ego: Sequence[ObjectState],
    inbox: Sequence[tuple[V2VMessage, int]],
    policy: FusionPolicy,
    now: int,
    receiver_xy: Sequence[float] | None = None,
) -> FusionResult:
    """Weighted union of ego and remote detections (all world frame, times in us).

    Ego detections are always kept with weight 1. Remote detections are
    advanced by constant velocity to ``now``, weighted, and dropped when a
    kept detection of the same class lies within ``dedup_m``; remotes are
    considered in decreasing weight so the heavier copy survives. Remote
    reports of the receiver itself (within ``dedup_m`` of ``receiver_xy``)
    are discarded.
    """
    kept = [FusedObject(o, policy.ego_weight, False) for o in ego]
    stale = 0
    candidates: list[tuple[float, int, int, ObjectState]] = []
    for msg, deliver_time in inbox:
        if deliver_time > now:
            raise ValidationError("inbox contains a message not yet delivered")
        if now - msg.send_timestamp > policy.stale_ms * 1000.0:
            stale += 1
            continue
        for i, d in enumerate(msg.detections):
            w = remote_weight(policy, msg.sender_id, d.confidence, now - msg.send_timestamp)
            moved = replace(d.advanced((now - d.timestamp) / 1e6), timestamp=now)
            candidates.append((w, msg.sender_id, i, moved))
    candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
    merged = echoes = 0
    me = None if receiver_xy is None else np.asarray(receiver_xy, dtype=float)[:2]
    for w, _, _, obj in candidates:
        if w <= 0.0:
            continue
        if me is not None and float(np.hypot(*(obj.xy - me))) < policy.dedup_m:
            echoes += 1
            continue
        dup = any(k.obj.class_id == obj.class_id and float(np.hypot(*(k.obj.xy - obj.xy))) < policy.dedup_m for k in kept)
        if dup:
            merged += 1
            continue
        kept.append(FusedObject(obj, w, True))
    return FusionResult(tuple(kept), stale, merged, echoes)
