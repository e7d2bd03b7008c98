"""Samples, fragments, stream configuration and fragmentation arithmetic.

All durations are integer microseconds. Sizes are bytes. These are pure
value types shared by every other layer; nothing in here touches the
simulation clock.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

# Canonical on-air byte sizes charged against channel occupancy.
FRAGMENT_HEADER_BYTES = 64
HEARTBEAT_BYTES = 32
NACK_BASE_BYTES = 32
ACK_BYTES = 32
CONTROL_MSG_BYTES = 32
PROBE_BYTES = 32


class ConfigError(ValueError):
    """A stream or scenario parameter violates an invariant."""


@dataclass(frozen=True)
class StreamConfig:
    """Per-stream protocol timing and size parameters.

    sample_deadline may exceed sample_period: overlapping samples are
    legal and required for burst protection.
    """

    sample_period_us: int
    sample_deadline_us: int
    sample_size: int
    fragment_size: int
    heartbeat_period_us: int
    retx_timeout_us: int
    arbitration_us: int
    slot_budget: int
    frame_size: int = 0  # 0 -> fragment_size + FRAGMENT_HEADER_BYTES

    def __post_init__(self):
        if self.frame_size == 0:
            object.__setattr__(
                self, "frame_size", self.fragment_size + FRAGMENT_HEADER_BYTES
            )
        self.validate()

    def validate(self) -> None:
        if self.fragment_size <= 0:
            raise ConfigError("fragment_size must be positive")
        if self.fragment_size + FRAGMENT_HEADER_BYTES > self.frame_size:
            raise ConfigError(
                "fragment_size %d + header %d exceeds frame_size %d"
                % (self.fragment_size, FRAGMENT_HEADER_BYTES, self.frame_size)
            )
        if self.sample_size <= 0:
            raise ConfigError("sample_size must be positive")
        if self.sample_period_us <= 0 or self.sample_deadline_us <= 0:
            raise ConfigError("sample_period and sample_deadline must be positive")
        if self.arbitration_us <= 0:
            raise ConfigError("arbitration_us must be positive")
        if self.heartbeat_period_us < self.arbitration_us:
            raise ConfigError("heartbeat_period_us must be >= arbitration_us")
        if self.retx_timeout_us < self.heartbeat_period_us:
            raise ConfigError("retx_timeout_us must be >= heartbeat_period_us")
        if self.slot_budget < 1:
            raise ConfigError("slot_budget must be >= 1")

    @property
    def total_fragments(self) -> int:
        return math.ceil(self.sample_size / self.fragment_size)

    @property
    def max_pending(self) -> int:
        """Upper bound on simultaneously pending samples."""
        return math.ceil(self.sample_deadline_us / self.sample_period_us)


@dataclass(frozen=True)
class Sample:
    """One large application data object generated at t_gen.

    payload may be None in structural runs where only fragment accounting
    matters; byte-exactness is then established by the payload-carrying
    test path.
    """

    stream_id: str
    seq: int
    size: int
    t_gen: int
    t_deadline: int
    payload: bytes | None = None

    def __post_init__(self):
        if self.t_deadline <= self.t_gen:
            raise ConfigError("sample deadline must lie after generation time")
        if self.payload is not None and len(self.payload) != self.size:
            raise ConfigError("payload length does not match declared size")
        if self.size <= 0:
            raise ConfigError("sample size must be positive")


@dataclass(frozen=True)
class Fragment:
    """Fixed-size transmission unit of a sample; the unit of loss."""

    stream_id: str
    sample_seq: int
    frag_index: int
    offset: int
    length: int
    total_frags: int
    payload: bytes | None = None


@dataclass
class FragmentBitmap:
    """Received-fragment tracking; bit i set means fragment i arrived."""

    sample_seq: int
    total_frags: int
    bits: int = 0

    def mark(self, index: int) -> None:
        if index < 0 or index >= self.total_frags:
            raise ValueError("fragment index %d out of range" % index)
        self.bits |= 1 << index

    def has(self, index: int) -> bool:
        return bool(self.bits >> index & 1)

    @property
    def popcount(self) -> int:
        return self.bits.bit_count()

    @property
    def complete(self) -> bool:
        return self.bits == (1 << self.total_frags) - 1

    def missing_mask(self) -> int:
        return ~self.bits & (1 << self.total_frags) - 1

    def missing_indices(self) -> list[int]:
        return mask_to_indices(self.missing_mask())


@dataclass
class Incomplete:
    """Reassembly result when fragments are still outstanding."""

    sample_seq: int
    missing: set[int] = field(default_factory=set)


class IntegrityError(ValueError):
    """Two fragments claim the same index with different payloads."""


def mask_to_indices(mask: int) -> list[int]:
    out = []
    while mask:
        low = mask & -mask
        out.append(low.bit_length() - 1)
        mask ^= low
    return out


def indices_to_mask(indices) -> int:
    mask = 0
    for i in indices:
        mask |= 1 << i
    return mask


def fragment_payload(
    stream_id: str,
    sample_seq: int,
    payload_size: int,
    fragment_size: int,
    payload: bytes | None = None,
) -> list[Fragment]:
    """Split an arbitrary-length payload into <= fragment_size pieces.

    The last fragment is not padded; lengths stay explicit so reassembly
    is byte-exact.
    """
    if payload_size <= 0:
        raise ValueError("cannot fragment a zero-length payload")
    if fragment_size <= 0:
        raise ValueError("fragment_size must be positive")
    total = math.ceil(payload_size / fragment_size)
    frags = []
    for i in range(total):
        off = i * fragment_size
        length = min(fragment_size, payload_size - off)
        piece = payload[off : off + length] if payload is not None else None
        frags.append(
            Fragment(
                stream_id=stream_id,
                sample_seq=sample_seq,
                frag_index=i,
                offset=off,
                length=length,
                total_frags=total,
                payload=piece,
            )
        )
    return frags


def fragment_sample(sample: Sample, cfg: StreamConfig) -> list[Fragment]:
    """Fragment a full-size sample according to its stream config."""
    if sample.size != cfg.sample_size:
        raise ValueError(
            "sample size %d does not match configured sample_size %d"
            % (sample.size, cfg.sample_size)
        )
    return fragment_payload(
        sample.stream_id, sample.seq, sample.size, cfg.fragment_size, sample.payload
    )


def reassemble(fragments, stream_id: str, sample_seq: int, t_gen: int, t_deadline: int):
    """Rebuild a sample from a fragment collection.

    Returns a Sample when every index is present, otherwise Incomplete
    with the missing index set. Duplicate fragments are tolerated if
    payloads agree; disagreement raises IntegrityError.
    """
    by_index: dict[int, Fragment] = {}
    total = None
    for frag in fragments:
        if frag.stream_id != stream_id or frag.sample_seq != sample_seq:
            raise ValueError("fragment belongs to a different sample")
        if total is None:
            total = frag.total_frags
        elif frag.total_frags != total:
            raise IntegrityError("conflicting total_frags values")
        prev = by_index.get(frag.frag_index)
        if prev is not None:
            if prev.payload != frag.payload or prev.length != frag.length:
                raise IntegrityError(
                    "conflicting payloads at fragment index %d" % frag.frag_index
                )
            continue
        by_index[frag.frag_index] = frag
    if total is None:
        return Incomplete(sample_seq=sample_seq, missing=set())
    missing = set(range(total)) - set(by_index)
    if missing:
        return Incomplete(sample_seq=sample_seq, missing=missing)
    size = sum(f.length for f in by_index.values())
    payload = None
    if all(by_index[i].payload is not None for i in range(total)):
        payload = b"".join(by_index[i].payload for i in range(total))
    return Sample(
        stream_id=stream_id,
        seq=sample_seq,
        size=size,
        t_gen=t_gen,
        t_deadline=t_deadline,
        payload=payload,
    )


def min_slots(total_frags: int, slot_budget: int) -> int:
    """Lower bound on slots needed to move total_frags error-free."""
    if total_frags <= 0 or slot_budget <= 0:
        raise ValueError("min_slots arguments must be positive")
    return -(-total_frags // slot_budget)
