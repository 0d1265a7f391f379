"""Explicit motion composition, deformation application, and inheritance.

Per-frame motion is carried by per-level anchor transforms: a translation
increment and a raw quaternion increment per anchor. A gaussian's total
deformation is the plain component-wise sum of its assigned anchors' deltas
across levels. Two application modes exist: additive (positions shift, the
orientation gets the summed increment and is renormalized) and pivot (each
level rigidly rotates cluster members about their anchor).

Inheritance transfers deltas from a retiring hierarchy to a freshly built one:
translations average arithmetically over the three matched legacy anchors,
rotation increments average as the dominant eigenvector of the summed outer
products, which is the standard chordal quaternion mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateQuaternionError, NumericalError
from .hierarchy import AnchorHierarchy
from .types import CompositionMode, GaussianSet

_EIG_TOL = 1e-12
_EIG_MAX_ITER = 200
_JACOBI_MAX_SWEEPS = 50
_DEGENERATE_NORM = 1e-8


# ---------------------------------------------------------------------------
# Quaternion helpers (w, x, y, z convention), float64 vectorized
# ---------------------------------------------------------------------------


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / norm


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    w1, x1, y1, z1 = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    w2, x2, y2, z2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions; shape (..., 3, 3)."""
    q = np.asarray(q, np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1)
    row1 = np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, np.float64)
    norm = np.linalg.norm(axis)
    if norm == 0:
        raise ValueError("rotation axis must be nonzero")
    half = 0.5 * float(angle)
    return np.concatenate([[np.cos(half)], np.sin(half) * axis / norm])


def canonical_sign(v: np.ndarray) -> np.ndarray:
    """Flip sign so the first nonzero component is positive (deterministic)."""
    v = np.asarray(v, np.float64)
    for comp in v:
        if comp != 0.0:
            return -v if comp < 0 else v
    return v


# ---------------------------------------------------------------------------
# Deformation containers
# ---------------------------------------------------------------------------


@dataclass
class AnchorDeltaSet:
    """Per-anchor transform increments for one hierarchy level."""

    translations: np.ndarray  # (A, 3) float32
    rotations: np.ndarray  # (A, 4) float32

    def __post_init__(self):
        self.translations = np.ascontiguousarray(self.translations, np.float32)
        self.rotations = np.ascontiguousarray(self.rotations, np.float32)
        if self.translations.ndim != 2 or self.translations.shape[1] != 3:
            raise ValueError(f"translations must be (A, 3), got {self.translations.shape}")
        if self.rotations.shape != (self.translations.shape[0], 4):
            raise ValueError("rotations must be (A, 4) matching translations")
        if not np.isfinite(self.translations).all() or not np.isfinite(self.rotations).all():
            raise ValueError("anchor deltas must be finite")

    def __len__(self) -> int:
        return self.translations.shape[0]

    @classmethod
    def zeros(cls, count: int) -> "AnchorDeltaSet":
        return cls(np.zeros((count, 3), np.float32), np.zeros((count, 4), np.float32))


@dataclass
class FrameDeformation:
    """Everything one frame carries: per-level deltas plus densification."""

    per_level: list[AnchorDeltaSet]
    added_gaussians: GaussianSet = field(default_factory=GaussianSet.empty)
    pruned_indices: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))

    def __post_init__(self):
        self.pruned_indices = np.ascontiguousarray(self.pruned_indices, np.int64)
        if self.pruned_indices.size > 1 and not (np.diff(self.pruned_indices) > 0).all():
            raise ValueError("pruned_indices must be strictly increasing")

    @classmethod
    def zeros(cls, hierarchy: AnchorHierarchy) -> "FrameDeformation":
        return cls([AnchorDeltaSet.zeros(lvl.anchor_count) for lvl in hierarchy.levels])


def _check_consistent(hierarchy: AnchorHierarchy, deltas: FrameDeformation) -> None:
    if len(deltas.per_level) != hierarchy.level_count:
        raise ValueError(
            f"deformation has {len(deltas.per_level)} levels, hierarchy has {hierarchy.level_count}"
        )
    for lvl, ds in zip(hierarchy.levels, deltas.per_level):
        if len(ds) != lvl.anchor_count:
            raise ValueError(
                f"level {lvl.level}: {len(ds)} delta entries for {lvl.anchor_count} anchors"
            )


# ---------------------------------------------------------------------------
# Composition and application
# ---------------------------------------------------------------------------


def compose_deformation(hierarchy: AnchorHierarchy, deltas: FrameDeformation) -> tuple[np.ndarray, np.ndarray]:
    """Per-gaussian summed deltas across levels: (N, 3) and (N, 4) float32.

    Plain component-wise sums; no normalization happens here.
    """
    _check_consistent(hierarchy, deltas)
    n = hierarchy.levels[0].assignment.shape[0]
    dmu = np.zeros((n, 3), np.float32)
    dq = np.zeros((n, 4), np.float32)
    for lvl, ds in zip(hierarchy.levels, deltas.per_level):
        dmu += ds.translations[lvl.assignment]
        dq += ds.rotations[lvl.assignment]
    return dmu, dq


def apply_composed(gaussians: GaussianSet, dmu: np.ndarray, dq: np.ndarray) -> GaussianSet:
    """Additive update: shift positions, renormalize incremented orientations.

    Scale, opacity, and SH are frozen by design; only geometry moves.
    """
    if dmu.shape[0] != len(gaussians):
        raise ValueError("composed deltas do not match gaussian count")
    q = gaussians.orientations.astype(np.float64) + np.asarray(dq, np.float64)
    norms = np.linalg.norm(q, axis=1)
    if (norms < _DEGENERATE_NORM).any():
        bad = int(np.argmax(norms < _DEGENERATE_NORM))
        raise DegenerateQuaternionError(
            f"orientation update for gaussian {bad} has norm {norms[bad]:.3g}"
        )
    return GaussianSet(
        gaussians.positions + np.asarray(dmu, np.float32),
        gaussians.scales.copy(),
        (q / norms[:, None]).astype(np.float32),
        gaussians.opacities.copy(),
        gaussians.sh.copy(),
    )


def _level_unit_quats(rotations: np.ndarray) -> np.ndarray:
    """Unit quaternion per anchor: normalize((1,0,0,0) + delta)."""
    q = rotations.astype(np.float64).copy()
    q[:, 0] += 1.0
    norms = np.linalg.norm(q, axis=1)
    if (norms < _DEGENERATE_NORM).any():
        bad = int(np.argmax(norms < _DEGENERATE_NORM))
        raise DegenerateQuaternionError(f"pivot increment for anchor {bad} has norm {norms[bad]:.3g}")
    return q / norms[:, None]


def apply_deformation(gaussians: GaussianSet, hierarchy: AnchorHierarchy,
                      deltas: FrameDeformation,
                      mode: CompositionMode = CompositionMode.additive) -> GaussianSet:
    """Deform all gaussians by one frame's deltas; appearance stays frozen.

    Pivot mode applies levels coarse-to-fine, rotating members about their
    anchor's frame-start position before translating; orientations compose by
    quaternion multiplication.
    """
    if mode == CompositionMode.additive:
        dmu, dq = compose_deformation(hierarchy, deltas)
        return apply_composed(gaussians, dmu, dq)

    _check_consistent(hierarchy, deltas)
    pos = gaussians.positions.astype(np.float64)
    base_pos = pos.copy()
    orient = gaussians.orientations.astype(np.float64)
    for lvl, ds in zip(hierarchy.levels, deltas.per_level):
        unit = _level_unit_quats(ds.rotations)
        member_q = unit[lvl.assignment]
        pivots = base_pos[lvl.anchor_indices][lvl.assignment]
        rot = quat_to_matrix(member_q)
        pos = np.einsum("nij,nj->ni", rot, pos - pivots) + pivots
        pos += ds.translations.astype(np.float64)[lvl.assignment]
        orient = quat_multiply(member_q, orient)
    orient = quat_normalize(orient)
    return GaussianSet(
        pos.astype(np.float32),
        gaussians.scales.copy(),
        orient.astype(np.float32),
        gaussians.opacities.copy(),
        gaussians.sh.copy(),
    )


# ---------------------------------------------------------------------------
# Eigenvector quaternion averaging
# ---------------------------------------------------------------------------


def _jacobi_eigen4(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi sweeps for a symmetric 4x4; returns (values, vectors)."""
    a = m.astype(np.float64).copy()
    v = np.eye(4)
    scale = max(1.0, np.abs(m).max())
    for _ in range(_JACOBI_MAX_SWEEPS):
        off = 0.0
        for p in range(3):
            for q in range(p + 1, 4):
                off = max(off, abs(a[p, q]))
        if off <= 1e-15 * scale:
            return np.diag(a).copy(), v
        for p in range(3):
            for q in range(p + 1, 4):
                if abs(a[p, q]) <= 1e-18 * scale:
                    continue
                theta = 0.5 * (a[q, q] - a[p, p]) / a[p, q]
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(4)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                v = v @ rot
    raise NumericalError("jacobi sweep did not converge on 4x4 symmetric matrix")


def symmetric4_max_eigenvector(m: np.ndarray) -> tuple[float, np.ndarray]:
    """Dominant eigenpair of a symmetric 4x4 via shifted power iteration.

    The shift by the trace keeps the dominant eigenvalue of the iterated
    matrix strictly largest in magnitude for PSD input. If the iteration does
    not reach the residual tolerance (repeated dominant eigenvalue), a full
    Jacobi sweep takes over. The returned vector has its first nonzero
    component positive.
    """
    m = np.asarray(m, np.float64)
    if m.shape != (4, 4):
        raise ValueError(f"expected 4x4 matrix, got {m.shape}")
    if not np.isfinite(m).all():
        raise ValueError("matrix must be finite")
    scale = max(1.0, np.abs(m).max())
    if np.abs(m - m.T).max() > 1e-9 * scale:
        raise ValueError("matrix is not symmetric within 1e-9")

    shifted = m + np.trace(m) * np.eye(4)
    v = np.array([1.0, 0.5, 0.25, 0.125])
    v /= np.linalg.norm(v)
    for _ in range(_EIG_MAX_ITER):
        w = shifted @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            break  # m is the zero matrix up to shift; fall through to jacobi
        v = w / norm
        lam = float(v @ m @ v)
        residual = np.linalg.norm(m @ v - lam * v)
        if residual <= _EIG_TOL * scale:
            return lam, canonical_sign(v)

    values, vectors = _jacobi_eigen4(m)
    best = int(np.argmax(values))
    return float(values[best]), canonical_sign(vectors[:, best])


def _eigen_average(quats: list[np.ndarray]) -> np.ndarray:
    """Chordal mean of quaternions: dominant eigenvector of sum(q q^T).

    Outer products are sign-invariant, and summing them in a canonical order
    (sign-fixed inputs sorted lexicographically) makes the result exactly
    invariant under input permutation and sign flips.
    """
    canon = sorted((tuple(canonical_sign(q)) for q in quats))
    m = np.zeros((4, 4))
    for q in canon:
        arr = np.asarray(q, np.float64)
        m += np.outer(arr, arr)
    _, vec = symmetric4_max_eigenvector(m)
    return canonical_sign(vec / np.linalg.norm(vec))


def average_quaternions(q1, q2, q3) -> np.ndarray:
    """Average three quaternions as the dominant eigenvector of sum(q q^T).

    The result is a unit 4-vector with canonical sign, invariant under sign
    flips and permutation of the inputs.
    """
    quats = [np.asarray(q, np.float64) for q in (q1, q2, q3)]
    for q in quats:
        if q.shape != (4,):
            raise ValueError("quaternions must be 4-vectors")
        if not np.isfinite(q).all():
            raise ValueError("quaternions must be finite")
        if not q.any():
            raise ValueError("cannot average zero quaternions")
    return _eigen_average(quats)


def inherit_deformation(legacy: AnchorDeltaSet, neighbor_map: np.ndarray) -> AnchorDeltaSet:
    """Seed a reconfigured level's deltas from its three matched legacy anchors.

    Translations take the arithmetic mean. Rotation increments take the
    eigenvector average, except that exactly-zero legacy increments are
    skipped ("no rotation observed"): if all three are zero the inherited
    increment is zero as well, since the eigenvector of a zero matrix is
    undefined.
    """
    if len(legacy) == 0:
        raise ValueError("inheritance requires a non-empty legacy level")
    nbr = np.asarray(neighbor_map, np.int64)
    if nbr.ndim != 2 or nbr.shape[1] != 3:
        raise ValueError(f"neighbor map must be (A, 3), got {nbr.shape}")
    if (nbr < 0).any() or (nbr >= len(legacy)).any():
        raise ValueError("neighbor map references invalid legacy ordinals")

    trans64 = legacy.translations.astype(np.float64)
    new_trans = (trans64[nbr[:, 0]] + trans64[nbr[:, 1]] + trans64[nbr[:, 2]]) / 3.0

    rot64 = legacy.rotations.astype(np.float64)
    new_rot = np.zeros((nbr.shape[0], 4))
    for i in range(nbr.shape[0]):
        picks = [rot64[j] for j in nbr[i] if rot64[j].any()]
        if picks:
            new_rot[i] = _eigen_average(picks)
    return AnchorDeltaSet(new_trans.astype(np.float32), new_rot.astype(np.float32))
