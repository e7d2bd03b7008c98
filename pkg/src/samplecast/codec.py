"""Lossless payload reduction over grid-structured frames.

Two complementary encodings shrink what has to cross the channel:
region-of-interest extraction (useful for moving sensors) and
incremental cell deltas against a base frame the receiver already holds
(useful for static sensors). Both round-trip byte-exactly; the byte
layouts here are exactly what gets charged to the channel.

Wire layout: 1-byte tag, then big-endian u32 fields -

  FULL:  tag 'F' | cells
  ROI:   tag 'R' | rect_count | (x y w h) per rect | covered cells
  DELTA: tag 'D' | base_seq | change_count | (cell_index + cell bytes) each
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum

TAG_FULL = b"F"
TAG_ROI = b"R"
TAG_DELTA = b"D"


class Encoding(Enum):
    FULL = "full"
    ROI = "roi"
    DELTA = "delta"


class DeltaBaseMismatch(Exception):
    """Receiver does not hold the delta's base frame; fall back to FULL."""


@dataclass(frozen=True)
class GridFrame:
    width: int
    height: int
    cell_bytes: int
    data: bytes

    def __post_init__(self):
        if self.width < 1 or self.height < 1 or self.cell_bytes < 1:
            raise ValueError("frame dimensions must be >= 1")
        if len(self.data) != self.width * self.height * self.cell_bytes:
            raise ValueError(
                "data length %d does not match %dx%dx%d"
                % (len(self.data), self.width, self.height, self.cell_bytes)
            )

    def cell(self, index: int) -> bytes:
        off = index * self.cell_bytes
        return self.data[off : off + self.cell_bytes]


@dataclass(frozen=True)
class RoiRect:
    x: int
    y: int
    w: int
    h: int

    def validate(self, frame: GridFrame) -> None:
        if self.w < 1 or self.h < 1:
            raise ValueError("rect extent must be >= 1")
        if self.x < 0 or self.y < 0:
            raise ValueError("rect origin must be non-negative")
        if self.x + self.w > frame.width or self.y + self.h > frame.height:
            raise ValueError(
                "rect (%d,%d,%d,%d) exceeds %dx%d frame"
                % (self.x, self.y, self.w, self.h, frame.width, frame.height)
            )


@dataclass(frozen=True)
class DeltaUpdate:
    base_seq: int
    changes: tuple  # ((cell_index, cell bytes), ...) ascending, no duplicates


def _union_rows(frame: GridFrame, rects) -> list[tuple[int, list[tuple[int, int]]]]:
    """Merged per-row x-intervals of the rect union, rows ascending."""
    rows: dict[int, list[tuple[int, int]]] = {}
    for rect in rects:
        rect.validate(frame)
        for y in range(rect.y, rect.y + rect.h):
            rows.setdefault(y, []).append((rect.x, rect.x + rect.w))
    merged = []
    for y in sorted(rows):
        spans = sorted(rows[y])
        out = [spans[0]]
        for lo, hi in spans[1:]:
            if lo <= out[-1][1]:
                out[-1] = (out[-1][0], max(out[-1][1], hi))
            else:
                out.append((lo, hi))
        merged.append((y, out))
    return merged


def union_cell_count(frame: GridFrame, rects) -> int:
    return sum(hi - lo for _, spans in _union_rows(frame, rects) for lo, hi in spans)


def extract_roi(frame: GridFrame, rects) -> bytes:
    """Encode the union of the rects: every covered cell exactly once, in
    row-major order, plus the rect list as metadata."""
    cb = frame.cell_bytes
    width = frame.width
    parts = [TAG_ROI, struct.pack(">I", len(rects))]
    for rect in rects:
        rect.validate(frame)
        parts.append(struct.pack(">IIII", rect.x, rect.y, rect.w, rect.h))
    for y, spans in _union_rows(frame, rects):
        base = y * width * cb
        for lo, hi in spans:
            parts.append(frame.data[base + lo * cb : base + hi * cb])
    return b"".join(parts)


def apply_roi(base: GridFrame, encoded: bytes) -> GridFrame:
    """Replace the cells inside the encoded rect union; cells outside the
    union keep the base frame's content."""
    if encoded[:1] != TAG_ROI:
        raise ValueError("not a ROI payload")
    (count,) = struct.unpack_from(">I", encoded, 1)
    rects = []
    off = 5
    for _ in range(count):
        x, y, w, h = struct.unpack_from(">IIII", encoded, off)
        rects.append(RoiRect(x, y, w, h))
        off += 16
    cb = base.cell_bytes
    width = base.width
    data = bytearray(base.data)
    for y, spans in _union_rows(base, rects):
        row_base = y * width * cb
        for lo, hi in spans:
            n = (hi - lo) * cb
            data[row_base + lo * cb : row_base + hi * cb] = encoded[off : off + n]
            off += n
    if off != len(encoded):
        raise ValueError("payload length inconsistent with rect union")
    return GridFrame(base.width, base.height, cb, bytes(data))


def diff_frames(prev: GridFrame, cur: GridFrame, base_seq: int = 0) -> DeltaUpdate:
    """Exactly the cells where prev and cur differ, ascending index."""
    if (prev.width, prev.height, prev.cell_bytes) != (
        cur.width,
        cur.height,
        cur.cell_bytes,
    ):
        raise ValueError("frame dimensions differ")
    cb = prev.cell_bytes
    changes = []
    pd, cd = prev.data, cur.data
    for idx in range(prev.width * prev.height):
        off = idx * cb
        piece = cd[off : off + cb]
        if pd[off : off + cb] != piece:
            changes.append((idx, piece))
    return DeltaUpdate(base_seq=base_seq, changes=tuple(changes))


def encode_delta(delta: DeltaUpdate, cell_bytes: int) -> bytes:
    parts = [TAG_DELTA, struct.pack(">II", delta.base_seq, len(delta.changes))]
    last = -1
    for idx, piece in delta.changes:
        if idx <= last:
            raise ValueError("delta changes must be ascending without duplicates")
        if len(piece) != cell_bytes:
            raise ValueError("cell payload length mismatch")
        last = idx
        parts.append(struct.pack(">I", idx))
        parts.append(piece)
    return b"".join(parts)


def decode_delta(encoded: bytes, cell_bytes: int) -> DeltaUpdate:
    if encoded[:1] != TAG_DELTA:
        raise ValueError("not a delta payload")
    base_seq, count = struct.unpack_from(">II", encoded, 1)
    off = 9
    changes = []
    for _ in range(count):
        (idx,) = struct.unpack_from(">I", encoded, off)
        off += 4
        changes.append((idx, encoded[off : off + cell_bytes]))
        off += cell_bytes
    if off != len(encoded):
        raise ValueError("trailing bytes in delta payload")
    return DeltaUpdate(base_seq=base_seq, changes=tuple(changes))


def apply_delta(base: GridFrame, delta: DeltaUpdate, held_base_seq: int) -> GridFrame:
    """Rebuild the current frame from base + delta.

    Raises DeltaBaseMismatch when the receiver's held frame is not the
    delta's base; the caller then requests a full frame.
    """
    if delta.base_seq != held_base_seq:
        raise DeltaBaseMismatch(
            "delta base %d, receiver holds %d" % (delta.base_seq, held_base_seq)
        )
    cb = base.cell_bytes
    total = base.width * base.height
    data = bytearray(base.data)
    for idx, piece in delta.changes:
        if idx >= total:
            raise ValueError("cell index %d out of range" % idx)
        data[idx * cb : (idx + 1) * cb] = piece
    return GridFrame(base.width, base.height, cb, bytes(data))


def encode_full(frame: GridFrame) -> bytes:
    return TAG_FULL + frame.data


def decode_full(encoded: bytes, width: int, height: int, cell_bytes: int) -> GridFrame:
    if encoded[:1] != TAG_FULL:
        raise ValueError("not a full-frame payload")
    return GridFrame(width, height, cell_bytes, encoded[1:])


def choose_encoding(
    prev: GridFrame | None,
    cur: GridFrame,
    rects,
    receiver_has_base: bool,
    base_seq: int = 0,
) -> tuple[Encoding, bytes]:
    """Pick the smallest valid encoding for the current frame.

    DELTA is only eligible when the receiver is known to hold the base
    frame. Ties prefer the encoding with less decoder state risk:
    FULL < ROI < DELTA.
    """
    options = [(len(cur.data) + 1, 0, Encoding.FULL, None)]
    if rects:
        roi = extract_roi(cur, rects)
        options.append((len(roi), 1, Encoding.ROI, roi))
    if receiver_has_base and prev is not None:
        delta = encode_delta(diff_frames(prev, cur, base_seq), cur.cell_bytes)
        options.append((len(delta), 2, Encoding.DELTA, delta))
    options.sort(key=lambda o: (o[0], o[1]))
    size, _, encoding, payload = options[0]
    if payload is None:
        payload = encode_full(cur)
    return encoding, payload
