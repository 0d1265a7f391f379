"""Encoder and decoder sessions: the mirrored per-frame pipeline.

The encoder fits deformations against observed targets, serializes them, and
then advances its own state with the *dequantized* deltas - exactly what the
decoder will apply - so both replicas stay bit-identical at any quantization
mode. Hierarchy rebuilds happen on a fixed schedule (every ``reconfig_period``
frames) on both sides; the decoder is told via the frame's reconfig flag.

Densified gaussians append to the end of the flat sequence on both sides and
are assigned to existing anchors by the same deterministic rule, so stream
payloads never carry explicit indices.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Protocol

import numpy as np

from . import codec
from .codec import FramePayload, FrameStats, StorageReport, StreamHeader
from .errors import StreamFormatError
from .fitting import Correspondences, FitConfig, densify_residuals, fit_frame, loss_and_gradient
from .hierarchy import build_hierarchy, rehierarchize
from .kernels import l1_nearest
from .motion import FrameDeformation, apply_deformation, inherit_deformation
from .synth import GeneratedScene
from .types import CompositionMode, GaussianSet, SceneState, StreamConfig


def state_checksum(state: SceneState) -> str:
    """SHA-256 over the raw float32 state columns plus the frame index."""
    digest = hashlib.sha256()
    digest.update(state.frame_index.to_bytes(8, "little"))
    for arr in state.gaussians.attribute_arrays():
        digest.update(np.ascontiguousarray(arr).tobytes())
    return digest.hexdigest()


class MotionSource(Protocol):
    """Per-frame observations driving an encode session."""

    frame_count: int

    def correspondences(self, frame: int) -> Correspondences: ...


class SyntheticSource:
    """Targets from a generated scene; indices are the original point ids."""

    def __init__(self, scene: GeneratedScene):
        self.scene = scene
        self.frame_count = scene.spec.frames
        self._indices = np.arange(scene.point_count, dtype=np.int64)

    def correspondences(self, frame: int) -> Correspondences:
        return Correspondences(self._indices, self.scene.targets[frame].astype(np.float32))

    def base_gaussians(self) -> GaussianSet:
        return GaussianSet.from_positions(self.scene.positions[0].astype(np.float32))


class StaticSource:
    """A scene with no observed motion: every frame targets frame-0 positions.

    Used when the input is a bare point cloud; the session still exercises
    the full pipeline and produces (near-)zero deltas.
    """

    def __init__(self, base: GaussianSet, frame_count: int):
        self.frame_count = frame_count
        self._targets = base.positions.copy()
        self._indices = np.arange(len(base), dtype=np.int64)

    def correspondences(self, frame: int) -> Correspondences:
        return Correspondences(self._indices, self._targets)


@dataclass
class FrameMetrics:
    """One metrics row per encoded/decoded frame."""

    frame_index: int
    loss: float
    mean_error: float
    payload_bytes: int
    anchor_counts: tuple[int, ...]
    reconfig: bool
    checksum: str


@dataclass
class SessionResult:
    stream: bytes
    metrics: list[FrameMetrics]
    state: SceneState
    report: StorageReport
    header: StreamHeader
    planned_counts: Optional[tuple[int, ...]] = None


def _advance_state(state: SceneState, payload_deltas: FrameDeformation,
                   config: StreamConfig, frame_index: int) -> SceneState:
    """Apply one frame to a state: deform, prune, append, reassign.

    Shared verbatim by encoder and decoder - this is the mirror contract.
    """
    gaussians = apply_deformation(
        state.gaussians, state.hierarchy, payload_deltas, config.composition_mode
    )
    pruned = payload_deltas.pruned_indices
    if pruned.size:
        n = len(gaussians)
        if (pruned < 0).any() or (pruned >= n).any():
            raise StreamFormatError(f"frame {frame_index}: pruned index out of range")
        for lvl in state.hierarchy.levels:
            if np.isin(pruned, lvl.anchor_indices).any():
                raise StreamFormatError(
                    f"frame {frame_index}: pruning an anchor gaussian is not supported"
                )
        keep = np.ones(n, bool)
        keep[pruned] = False
        remap = np.cumsum(keep) - 1
        gaussians = GaussianSet(*[arr[keep] for arr in gaussians.attribute_arrays()])
        for lvl in state.hierarchy.levels:
            lvl.anchor_indices = remap[lvl.anchor_indices]
            lvl.assignment = lvl.assignment[keep]
    added = payload_deltas.added_gaussians
    if len(added):
        for lvl in state.hierarchy.levels:
            anchors = gaussians.positions[lvl.anchor_indices]
            extra = l1_nearest(added.positions, anchors)
            lvl.assignment = np.concatenate([lvl.assignment, extra])
        gaussians = GaussianSet.concatenate([gaussians, added])
    state.gaussians = gaussians
    state.frame_index = frame_index
    return state


def _mean_position_error(state: SceneState, corr: Correspondences) -> float:
    pos = state.gaussians.positions.astype(np.float64)[corr.indices]
    return float(np.linalg.norm(pos - corr.targets.astype(np.float64), axis=1).mean())


def encode_session(base: GaussianSet, source: MotionSource, config: StreamConfig,
                   fit_config: Optional[FitConfig] = None,
                   budget_bytes: Optional[int] = None) -> SessionResult:
    """Run the full encoder pipeline over all frames of a source.

    With a byte budget, per-level anchor counts are planned first and the
    effective finest fraction written to the header, so the decoder targets
    the same counts without ever seeing the budget.
    """
    if fit_config is None:
        fit_config = FitConfig(
            steps_phase1=config.phase1_steps,
            steps_phase2=config.phase2_steps,
            densify_threshold=config.densify_threshold,
        )
    n0 = len(base)
    planned = None
    fraction = config.finest_fraction
    if budget_bytes is not None:
        planned = codec.plan_budget(n0, budget_bytes, config)
        fraction = Fraction(planned[-1], n0)
        if fraction > 1:
            fraction = Fraction(1, 1)
    header = StreamHeader(
        levels=config.levels,
        quantization=config.quantization,
        reconfig_period=config.reconfig_period,
        finest_num=fraction.numerator,
        finest_den=fraction.denominator,
        gaussian_count_initial=n0,
    )
    eff_config = StreamConfig(
        levels=config.levels,
        finest_fraction=fraction,
        level_ratio=config.level_ratio,
        reconfig_period=config.reconfig_period,
        quantization=config.quantization,
        phase1_steps=config.phase1_steps,
        phase2_steps=config.phase2_steps,
        densify_threshold=config.densify_threshold,
        composition_mode=config.composition_mode,
    )

    state = SceneState(base.copy(), build_hierarchy(base, eff_config), 0)
    chunks = [header.pack()]
    metrics: list[FrameMetrics] = []
    stats: list[FrameStats] = []
    prev_deltas: Optional[FrameDeformation] = None

    for t in range(1, source.frame_count):
        reconfig = t % eff_config.reconfig_period == 0
        if reconfig:
            new_hier, neighbor_maps = rehierarchize(state, eff_config)
            if prev_deltas is not None:
                init = FrameDeformation(
                    [
                        inherit_deformation(legacy, nbr)
                        for legacy, nbr in zip(prev_deltas.per_level, neighbor_maps)
                    ]
                )
            else:
                init = FrameDeformation.zeros(new_hier)
            state.hierarchy = new_hier
        else:
            init = FrameDeformation.zeros(state.hierarchy)

        corr = source.correspondences(t)
        fitted = fit_frame(state.gaussians, state.hierarchy, corr, fit_config, init,
                           eff_config.composition_mode)
        if fit_config.steps_phase2 > 0:
            added, pruned_idx = densify_residuals(
                state.gaussians, state.hierarchy, fitted, corr,
                fit_config.densify_threshold, eff_config.composition_mode,
            )
        else:
            added, pruned_idx = GaussianSet.empty(), np.empty(0, np.int64)

        loss, _ = loss_and_gradient(state.gaussians, state.hierarchy, fitted, corr,
                                    eff_config.composition_mode)
        frame_def = FrameDeformation(fitted.per_level, added, pruned_idx)
        payload = codec.encode_frame(t, frame_def, state.hierarchy,
                                     eff_config.quantization, reconfig)
        chunks.append(payload)

        applied = codec.quantize_roundtrip(frame_def, eff_config.quantization)
        state = _advance_state(state, applied, eff_config, t)
        prev_deltas = FrameDeformation(applied.per_level)

        counts = state.hierarchy.anchor_counts()
        overhead = codec.frame_overhead_bytes(eff_config.levels)
        delta_bytes = codec.delta_block_bytes(counts, eff_config.quantization)
        stats.append(
            FrameStats(t, len(payload), delta_bytes,
                       len(payload) - overhead - delta_bytes - pruned_idx.size * 8,
                       overhead, reconfig)
        )
        metrics.append(
            FrameMetrics(t, loss, _mean_position_error(state, corr), len(payload),
                         counts, reconfig, state_checksum(state))
        )

    return SessionResult(b"".join(chunks), metrics, state, codec.storage_report(stats),
                         header, planned)


@dataclass
class DecodeResult:
    state: SceneState
    metrics: list[FrameMetrics]
    header: StreamHeader
    frames: list[FramePayload] = field(default_factory=list)


def decode_session(base: GaussianSet, stream: bytes,
                   level_ratio: int = 3,
                   composition_mode: CompositionMode = CompositionMode.additive,
                   keep_frames: bool = False) -> DecodeResult:
    """Replay a stream against the identical frame-0 source.

    ``level_ratio`` and ``composition_mode`` are not part of the wire header
    and must match the encoding session (both default to the library
    defaults). Any divergence surfaces as an anchor-count mismatch naming the
    level, or as a checksum difference.
    """
    header = StreamHeader.unpack(stream)
    if len(base) != header.gaussian_count_initial:
        raise StreamFormatError(
            f"frame-0 source has {len(base)} gaussians, stream expects "
            f"{header.gaussian_count_initial}"
        )
    config = StreamConfig(
        levels=header.levels,
        finest_fraction=header.finest_fraction,
        level_ratio=level_ratio,
        reconfig_period=header.reconfig_period,
        quantization=header.quantization,
        composition_mode=composition_mode,
    )
    state = SceneState(base.copy(), build_hierarchy(base, config), 0)
    metrics: list[FrameMetrics] = []
    frames: list[FramePayload] = []
    offset = codec.HEADER_BYTES
    expected = 1
    while offset < len(stream):
        payload, offset = codec.decode_frame(stream, offset, header)
        if payload.frame_index != expected:
            raise StreamFormatError(
                f"frame index {payload.frame_index} out of order, expected {expected}"
            )
        if payload.reconfig:
            state.hierarchy, _ = rehierarchize(state, config)
        codec.verify_counts(payload, state.hierarchy)
        state = _advance_state(state, payload.deltas, config, payload.frame_index)
        metrics.append(
            FrameMetrics(payload.frame_index, math.nan, math.nan, 0,
                         state.hierarchy.anchor_counts(), payload.reconfig,
                         state_checksum(state))
        )
        if keep_frames:
            frames.append(payload)
        expected += 1
    return DecodeResult(state, metrics, header, frames)
