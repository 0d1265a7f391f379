"""Index-free binary stream format, quantization, and budget planning.

One ``.rcgs`` file per session: a fixed header followed by concatenated frame
payloads. Anchors are never named in the stream; both sides order them by
grid cell key, so delta blocks are raw value runs. All integers and floats
are little-endian.

Header (28 bytes):
    magic           4s   = b"RCGS"
    version         u16  = 1
    levels          u8
    quantization    u8   (0 full32, 1 half16, 2 fixed16)
    reconfig_period u32
    finest_num      u32  \\ effective finest-level anchor fraction
    finest_den      u32  /
    gaussian_count_initial u64

Frame payload:
    frame_index     u64
    realized_anchor_counts  u32 x levels
    per level: translation block, then rotation block
        full32:  f32 runs
        half16:  f16 runs
        fixed16: per component (min f32, max f32), then u16 runs
    added_count     u32, then 23 f32 per added record
                    (position, scale, orientation, opacity, sh)
    pruned_count    u32, then u64 indices (strictly increasing)
    reconfig_flag   u8

fixed16 maps x to round((x - min) / (max - min) * 65535); max == min encodes
a constant block. Densified records always serialize at full precision; they
are few and quality-critical.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import BudgetError, StreamFormatError
from .hierarchy import AnchorHierarchy
from .motion import AnchorDeltaSet, FrameDeformation
from .types import GaussianSet, Quantization, StreamConfig

MAGIC = b"RCGS"
VERSION = 1
_HEADER = struct.Struct("<4sHBBIIIQ")
HEADER_BYTES = _HEADER.size  # 28

_RECORD_FLOATS = 23  # position 3 + scale 3 + orientation 4 + opacity 1 + sh 12
_VALUES_PER_ANCHOR = 7  # translation 3 + rotation 4

VALUE_BYTES = {
    Quantization.full32: 4,
    Quantization.half16: 2,
    Quantization.fixed16: 2,
}


@dataclass
class StreamHeader:
    """Fixed per-session header; everything a mirror decoder derives from."""

    levels: int
    quantization: Quantization
    reconfig_period: int
    finest_num: int
    finest_den: int
    gaussian_count_initial: int
    version: int = VERSION

    @property
    def finest_fraction(self) -> Fraction:
        return Fraction(self.finest_num, self.finest_den)

    def pack(self) -> bytes:
        return _HEADER.pack(
            MAGIC,
            self.version,
            self.levels,
            int(self.quantization),
            self.reconfig_period,
            self.finest_num,
            self.finest_den,
            self.gaussian_count_initial,
        )

    @classmethod
    def unpack(cls, buf: bytes) -> "StreamHeader":
        if len(buf) < HEADER_BYTES:
            raise StreamFormatError(f"stream shorter than header: {len(buf)} bytes")
        magic, version, levels, quant, period, num, den, count = _HEADER.unpack_from(buf, 0)
        if magic != MAGIC:
            raise StreamFormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise StreamFormatError(f"unsupported stream version {version}")
        if den == 0:
            raise StreamFormatError("finest fraction denominator is zero")
        return cls(levels, Quantization(quant), period, num, den, count, version)


@dataclass
class FramePayload:
    """Decoded frame content, deltas already dequantized to float32."""

    frame_index: int
    realized_counts: tuple[int, ...]
    deltas: FrameDeformation
    reconfig: bool


# ---------------------------------------------------------------------------
# Block quantization
# ---------------------------------------------------------------------------


def _encode_block(values: np.ndarray, quantization: Quantization) -> bytes:
    arr = np.ascontiguousarray(values, np.float32)
    if quantization == Quantization.full32:
        return arr.astype("<f4").tobytes()
    if quantization == Quantization.half16:
        return arr.astype("<f2").tobytes()
    parts = []
    for j in range(arr.shape[1]):
        col = arr[:, j]
        mn = np.float32(col.min()) if col.size else np.float32(0)
        mx = np.float32(col.max()) if col.size else np.float32(0)
        parts.append(struct.pack("<ff", mn, mx))
        if mx > mn:
            q = np.round((col.astype(np.float64) - float(mn)) / (float(mx) - float(mn)) * 65535.0)
        else:
            q = np.zeros(col.shape, np.float64)
        parts.append(q.astype("<u2").tobytes())
    return b"".join(parts)


def _decode_block(buf: bytes, offset: int, count: int, width: int,
                  quantization: Quantization) -> tuple[np.ndarray, int]:
    if quantization == Quantization.full32:
        nbytes = count * width * 4
        _need(buf, offset, nbytes)
        arr = np.frombuffer(buf, "<f4", count * width, offset).reshape(count, width)
        return arr.astype(np.float32), offset + nbytes
    if quantization == Quantization.half16:
        nbytes = count * width * 2
        _need(buf, offset, nbytes)
        arr = np.frombuffer(buf, "<f2", count * width, offset).reshape(count, width)
        return arr.astype(np.float32), offset + nbytes
    cols = []
    for _ in range(width):
        _need(buf, offset, 8)
        mn, mx = struct.unpack_from("<ff", buf, offset)
        offset += 8
        _need(buf, offset, count * 2)
        q = np.frombuffer(buf, "<u2", count, offset).astype(np.float64)
        offset += count * 2
        if mx > mn:
            col = mn + q * ((float(mx) - float(mn)) / 65535.0)
        else:
            col = np.full(count, mn, np.float64)
        cols.append(col.astype(np.float32))
    return np.stack(cols, axis=1), offset


def quantize_roundtrip(deltas: FrameDeformation, quantization: Quantization) -> FrameDeformation:
    """Deltas as the decoder will reconstruct them.

    The encoder advances its own state with these values (quantize-then-apply
    on both ends), so encoder and decoder replicas never drift, whatever the
    quantization mode.
    """
    if quantization == Quantization.full32:
        return FrameDeformation(
            [AnchorDeltaSet(d.translations.copy(), d.rotations.copy()) for d in deltas.per_level],
            deltas.added_gaussians,
            deltas.pruned_indices,
        )
    out = []
    for ds in deltas.per_level:
        count = len(ds)
        t, _ = _decode_block(_encode_block(ds.translations, quantization), 0, count, 3, quantization)
        r, _ = _decode_block(_encode_block(ds.rotations, quantization), 0, count, 4, quantization)
        out.append(AnchorDeltaSet(t, r))
    return FrameDeformation(out, deltas.added_gaussians, deltas.pruned_indices)


# ---------------------------------------------------------------------------
# Frame encode / decode
# ---------------------------------------------------------------------------


def _need(buf: bytes, offset: int, nbytes: int) -> None:
    if offset + nbytes > len(buf):
        raise StreamFormatError(
            f"truncated payload: need {nbytes} bytes at offset {offset}, have {len(buf) - offset}"
        )


def encode_frame(frame_index: int, deltas: FrameDeformation, hierarchy: AnchorHierarchy,
                 quantization: Quantization, reconfig: bool = False) -> bytes:
    """Serialize one frame. Delta blocks follow the canonical anchor order."""
    counts = hierarchy.anchor_counts()
    if len(deltas.per_level) != len(counts):
        raise ValueError("deformation levels do not match hierarchy")
    parts = [struct.pack("<Q", frame_index)]
    parts.append(struct.pack(f"<{len(counts)}I", *counts))
    for ds, count in zip(deltas.per_level, counts):
        if len(ds) != count:
            raise ValueError(f"delta block has {len(ds)} anchors, hierarchy has {count}")
        parts.append(_encode_block(ds.translations, quantization))
        parts.append(_encode_block(ds.rotations, quantization))
    added = deltas.added_gaussians
    parts.append(struct.pack("<I", len(added)))
    if len(added):
        block = np.concatenate(
            [
                added.positions,
                added.scales,
                added.orientations,
                added.opacities[:, None],
                added.sh,
            ],
            axis=1,
        )
        if not np.isfinite(block).all():
            raise ValueError("added gaussian records must be finite")
        parts.append(block.astype("<f4").tobytes())
    parts.append(struct.pack("<I", deltas.pruned_indices.shape[0]))
    if deltas.pruned_indices.shape[0]:
        parts.append(deltas.pruned_indices.astype("<u8").tobytes())
    parts.append(struct.pack("<B", 1 if reconfig else 0))
    return b"".join(parts)


def decode_frame(buf: bytes, offset: int, header: StreamHeader) -> tuple[FramePayload, int]:
    """Parse one frame payload starting at ``offset``.

    The payload is self-describing given the header; hierarchy consistency
    (realized counts vs the decoder's rebuilt structure) is checked separately
    by :func:`verify_counts` once the decoder knows whether to reconfigure.
    """
    _need(buf, offset, 8)
    (frame_index,) = struct.unpack_from("<Q", buf, offset)
    offset += 8
    _need(buf, offset, 4 * header.levels)
    counts = struct.unpack_from(f"<{header.levels}I", buf, offset)
    offset += 4 * header.levels
    per_level = []
    for count in counts:
        trans, offset = _decode_block(buf, offset, count, 3, header.quantization)
        rot, offset = _decode_block(buf, offset, count, 4, header.quantization)
        per_level.append(AnchorDeltaSet(trans, rot))
    _need(buf, offset, 4)
    (added_count,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if added_count:
        nbytes = added_count * _RECORD_FLOATS * 4
        _need(buf, offset, nbytes)
        block = np.frombuffer(buf, "<f4", added_count * _RECORD_FLOATS, offset)
        block = block.reshape(added_count, _RECORD_FLOATS).astype(np.float32)
        added = GaussianSet(block[:, 0:3], block[:, 3:6], block[:, 6:10], block[:, 10], block[:, 11:23])
        offset += nbytes
    else:
        added = GaussianSet.empty()
    _need(buf, offset, 4)
    (pruned_count,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if pruned_count:
        _need(buf, offset, pruned_count * 8)
        pruned = np.frombuffer(buf, "<u8", pruned_count, offset).astype(np.int64)
        offset += pruned_count * 8
    else:
        pruned = np.empty(0, np.int64)
    _need(buf, offset, 1)
    (flag,) = struct.unpack_from("<B", buf, offset)
    offset += 1
    deltas = FrameDeformation(per_level, added, pruned)
    return FramePayload(frame_index, tuple(int(c) for c in counts), deltas, bool(flag)), offset


def verify_counts(payload: FramePayload, hierarchy: AnchorHierarchy) -> None:
    """Hard error naming the level if stream counts disagree with local state."""
    local = hierarchy.anchor_counts()
    for li, (got, want) in enumerate(zip(payload.realized_counts, local), start=1):
        if got != want:
            raise StreamFormatError(
                f"frame {payload.frame_index}: level {li} has {got} anchors in stream "
                f"but {want} in mirrored state"
            )


# ---------------------------------------------------------------------------
# Size accounting and budget planning
# ---------------------------------------------------------------------------


def delta_block_bytes(counts, quantization: Quantization) -> int:
    """Exact byte size of all per-level delta blocks for given anchor counts."""
    w = VALUE_BYTES[quantization]
    total = sum(int(c) * _VALUES_PER_ANCHOR * w for c in counts)
    if quantization == Quantization.fixed16:
        total += len(tuple(counts)) * _VALUES_PER_ANCHOR * 8  # (min, max) f32 per component
    return total


def frame_overhead_bytes(levels: int) -> int:
    """Fixed per-frame bytes: index, counts, added/pruned counts, flag."""
    return 8 + 4 * levels + 4 + 4 + 1


def frame_payload_bytes(levels: int, quantization: Quantization, counts,
                        added_count: int = 0, pruned_count: int = 0) -> int:
    """Total payload size as a pure function of header fields and counts."""
    return (
        frame_overhead_bytes(levels)
        + delta_block_bytes(counts, quantization)
        + added_count * _RECORD_FLOATS * 4
        + pruned_count * 8
    )


def _counts_for_finest(finest: int, levels: int, ratio: int) -> tuple[int, ...]:
    counts = [max(1, finest)]
    for _ in range(levels - 1):
        counts.append(max(1, math.ceil(Fraction(counts[-1], ratio))))
    return tuple(reversed(counts))


def plan_budget(n_gaussians: int, bytes_per_frame: int, config: StreamConfig,
                overhead: int | None = None) -> tuple[int, ...]:
    """Largest per-level anchor counts whose deformation payload fits a budget.

    Returns counts coarsest-first. The finest count is capped at
    ceil(n_gaussians * finest_fraction); coarser levels divide by level_ratio,
    rounded up, never below one anchor. The returned counts satisfy the byte
    bound exactly; an infeasible budget raises with the minimum feasible one.
    """
    if overhead is None:
        overhead = frame_overhead_bytes(config.levels)
        if config.quantization == Quantization.fixed16:
            overhead += config.levels * _VALUES_PER_ANCHOR * 8
    w = VALUE_BYTES[config.quantization]

    def cost(finest: int) -> int:
        counts = _counts_for_finest(finest, config.levels, config.level_ratio)
        return sum(counts) * _VALUES_PER_ANCHOR * w + overhead

    minimum = cost(1)
    if bytes_per_frame < minimum:
        raise BudgetError(
            f"budget {bytes_per_frame} B/frame below minimum feasible {minimum} B/frame",
            minimum_bytes=minimum,
        )
    cap = max(1, math.ceil(n_gaussians * config.finest_fraction))
    lo, hi = 1, cap
    while lo < hi:  # cost is monotone in the finest count
        mid = (lo + hi + 1) // 2
        if cost(mid) <= bytes_per_frame:
            lo = mid
        else:
            hi = mid - 1
    return _counts_for_finest(lo, config.levels, config.level_ratio)


# ---------------------------------------------------------------------------
# Storage report
# ---------------------------------------------------------------------------


@dataclass
class FrameStats:
    """Exact emitted byte counts for one encoded frame."""

    frame_index: int
    payload_bytes: int
    delta_bytes: int
    added_bytes: int
    overhead_bytes: int
    reconfig: bool


@dataclass
class StorageReport:
    frames: int
    total_bytes: int
    mean_bytes: float
    max_bytes: int
    delta_bytes: int
    added_bytes: int
    overhead_bytes: int

    def decomposition(self) -> str:
        return (
            f"frames={self.frames} total={self.total_bytes}B "
            f"mean={self.mean_bytes:.1f}B/frame max={self.max_bytes}B | "
            f"deltas={self.delta_bytes}B densification={self.added_bytes}B "
            f"headers={self.overhead_bytes}B"
        )


def storage_report(stats: list[FrameStats]) -> StorageReport:
    """Aggregate exact per-frame byte counts into a session report."""
    if not stats:
        raise ValueError("storage report requires at least one encoded frame")
    totals = [s.payload_bytes for s in stats]
    return StorageReport(
        frames=len(stats),
        total_bytes=sum(totals),
        mean_bytes=sum(totals) / len(stats),
        max_bytes=max(totals),
        delta_bytes=sum(s.delta_bytes for s in stats),
        added_bytes=sum(s.added_bytes for s in stats),
        overhead_bytes=sum(s.overhead_bytes for s in stats),
    )
