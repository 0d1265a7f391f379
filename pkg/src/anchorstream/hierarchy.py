"""Multi-level anchor structure: grid sampling, clustering, reconfiguration.

Each level selects anchors by uniform-grid sampling: the scene bounds are
split into M^3 cells and every non-empty cell contributes the point closest
to its center. Anchors are kept in lexicographic (i, j, k) cell-key order,
which is the canonical order the codec relies on: a decoder that rebuilds the
hierarchy from mirrored state reproduces the exact anchor sequence, so delta
blocks need no per-anchor indices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from . import kernels
from .types import GaussianSet, SceneState, StreamConfig


@dataclass
class LevelStructure:
    """One hierarchy tier: grid geometry, anchors, and cluster assignment.

    ``anchor_indices`` are gaussian indices sorted by cell key; ``assignment``
    maps every gaussian index to an ordinal into ``anchor_indices``.
    """

    level: int
    grid_resolution: int
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    anchor_indices: np.ndarray
    assignment: Optional[np.ndarray] = None

    @property
    def anchor_count(self) -> int:
        return int(self.anchor_indices.shape[0])


@dataclass
class AnchorHierarchy:
    """Per-level anchor structure built from one snapshot of the scene."""

    levels: list[LevelStructure]
    built_at_frame: int = 0

    @property
    def level_count(self) -> int:
        return len(self.levels)

    def anchor_counts(self) -> tuple[int, ...]:
        return tuple(lvl.anchor_count for lvl in self.levels)


def grid_resolution(n_anchor: int, level: int) -> int:
    """Grid edge count for a level: ceil((n_anchor * 3^(level-1))^(1/3)).

    Computed with integer arithmetic so perfect cubes are exact despite
    floating-point cube roots.
    """
    if n_anchor < 1:
        raise ValueError(f"n_anchor must be >= 1, got {n_anchor}")
    if level < 1:
        raise ValueError(f"level must be >= 1, got {level}")
    target = n_anchor * 3 ** (level - 1)
    m = max(1, round(target ** (1.0 / 3.0)))
    while m**3 < target:
        m += 1
    while m > 1 and (m - 1) ** 3 >= target:
        m -= 1
    return m


def _as_positions(gaussians) -> np.ndarray:
    if isinstance(gaussians, GaussianSet):
        return gaussians.positions
    return np.asarray(gaussians, dtype=np.float32)


def _cell_geometry(positions64: np.ndarray, m: int):
    """Cell codes and squared center distances for every point.

    Degenerate axes (zero extent) collapse to a single cell so no division by
    zero occurs; points then share index 0 on that axis.
    """
    bmin = positions64.min(axis=0)
    bmax = positions64.max(axis=0)
    delta = bmax - bmin
    idx = np.zeros((positions64.shape[0], 3), dtype=np.int64)
    centers = np.empty_like(positions64)
    for axis in range(3):
        if delta[axis] > 0:
            scaled = (positions64[:, axis] - bmin[axis]) * (m / delta[axis])
            idx[:, axis] = np.clip(np.floor(scaled).astype(np.int64), 0, m - 1)
            centers[:, axis] = bmin[axis] + (idx[:, axis] + 0.5) * (delta[axis] / m)
        else:
            centers[:, axis] = bmin[axis]
    codes = (idx[:, 0] * m + idx[:, 1]) * m + idx[:, 2]
    diff = positions64 - centers
    d2 = (diff * diff).sum(axis=1)
    return bmin, bmax, codes, d2


def sample_anchors(positions, n_anchor: int, level: int = 1) -> LevelStructure:
    """Select one anchor per non-empty grid cell, nearest to the cell center.

    ``n_anchor`` is the base (level-1) anchor count; the grid resolution grows
    with ``level``. Ties on the center distance go to the lowest original
    index; empty cells contribute nothing, so the realized anchor count is at
    most M^3. Anchors come back sorted by lexicographic cell key.
    """
    pos = _as_positions(positions)
    if pos.shape[0] == 0:
        raise ValueError("positions must be non-empty")
    if not np.isfinite(pos).all():
        raise ValueError("positions must be finite")
    m = grid_resolution(n_anchor, level)
    pos64 = pos.astype(np.float64)
    bmin, bmax, codes, d2 = _cell_geometry(pos64, m)
    _, winners = kernels.cell_winners(codes, d2, m**3)
    return LevelStructure(
        level=level,
        grid_resolution=m,
        bounds_min=bmin.astype(np.float32),
        bounds_max=bmax.astype(np.float32),
        anchor_indices=winners,
    )


def assign_clusters(positions, level: LevelStructure) -> np.ndarray:
    """Map every gaussian to its L1-nearest anchor ordinal (lowest wins ties)."""
    pos = _as_positions(positions)
    if level.anchor_count < 1:
        raise ValueError("level has no anchors")
    anchors = pos[level.anchor_indices]
    return kernels.l1_nearest(pos, anchors)


def level_targets(n_gaussians: int, config: StreamConfig, finest_target: int | None = None) -> tuple[int, ...]:
    """Per-level target anchor counts, coarsest first.

    The finest level targets ceil(N * finest_fraction) (or an explicit
    override, e.g. from the budget planner); each coarser level targets
    1/level_ratio of the next finer one, clamped to at least one anchor.
    """
    if finest_target is None:
        finest = math.ceil(n_gaussians * config.finest_fraction)
    else:
        finest = finest_target
    finest = max(1, min(finest, n_gaussians))
    targets = [finest]
    for _ in range(config.levels - 1):
        targets.append(max(1, math.ceil(Fraction(targets[-1], config.level_ratio))))
    return tuple(reversed(targets))


def build_hierarchy(gaussians, config: StreamConfig, finest_target: int | None = None,
                    built_at_frame: int = 0) -> AnchorHierarchy:
    """Build all levels over the same positions.

    The coarsest target is the base anchor count; each level l uses grid
    resolution ceil((base * 3^(l-1))^(1/3)), so finer levels roughly triple
    the anchor density of their predecessor.
    """
    pos = _as_positions(gaussians)
    if pos.shape[0] < 1:
        raise ValueError("need at least one gaussian")
    targets = level_targets(pos.shape[0], config, finest_target)
    base = targets[0]
    levels = []
    for l in range(1, config.levels + 1):
        lvl = sample_anchors(pos, base, l)
        lvl.assignment = assign_clusters(pos, lvl)
        levels.append(lvl)
    return AnchorHierarchy(levels=levels, built_at_frame=built_at_frame)


def nearest_legacy_anchors(new_positions: np.ndarray, legacy_positions: np.ndarray) -> np.ndarray:
    """Ordinals of the 3 nearest legacy anchors for each new anchor.

    Euclidean metric, ties broken by the lower ordinal. When fewer than three
    legacy anchors exist, all are recorded and the nearest repeats to fill the
    triple.
    """
    new64 = np.asarray(new_positions, np.float64)
    leg64 = np.asarray(legacy_positions, np.float64)
    a_new, a_leg = new64.shape[0], leg64.shape[0]
    if a_leg == 0:
        raise ValueError("legacy level has no anchors")
    out = np.empty((a_new, 3), dtype=np.int64)
    ordinals = np.arange(a_leg)
    for i in range(a_new):
        diff = leg64 - new64[i]
        d2 = (diff * diff).sum(axis=1)
        order = np.lexsort((ordinals, d2))
        picks = list(order[: min(3, a_leg)])
        while len(picks) < 3:
            picks.append(picks[0])
        out[i] = picks
    return out


def rehierarchize(state: SceneState, config: StreamConfig,
                  finest_target: int | None = None) -> tuple[AnchorHierarchy, list[np.ndarray]]:
    """Rebuild the hierarchy from current positions and match legacy anchors.

    Returns the new hierarchy plus, per level, a (A_new, 3) map of legacy
    anchor ordinals used for deformation inheritance. Matching is strictly
    intra-level.
    """
    if state.hierarchy is None:
        raise ValueError("state has no hierarchy to reconfigure")
    new_hier = build_hierarchy(state.gaussians, config, finest_target,
                               built_at_frame=state.frame_index)
    pos = state.gaussians.positions
    neighbor_maps = []
    for new_lvl, old_lvl in zip(new_hier.levels, state.hierarchy.levels):
        neighbor_maps.append(
            nearest_legacy_anchors(pos[new_lvl.anchor_indices], pos[old_lvl.anchor_indices])
        )
    return new_hier, neighbor_maps
