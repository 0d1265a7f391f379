import numpy as np
import pytest

from anchorstream import (
    AnchorDeltaSet,
    CompositionMode,
    DegenerateQuaternionError,
    FrameDeformation,
    GaussianSet,
    StreamConfig,
    apply_deformation,
    average_quaternions,
    build_hierarchy,
    compose_deformation,
    inherit_deformation,
    symmetric4_max_eigenvector,
    validate_state,
)
from anchorstream.motion import apply_composed, canonical_sign, quat_from_axis_angle
from anchorstream.types import SceneState

from oracles import dominant_eigenvector, rotation_matrix


def hierarchy_for(pos, levels=3):
    cfg = StreamConfig(levels=levels)
    return build_hierarchy(pos, cfg)


def random_deltas(hierarchy, rng, scale=0.1):
    per_level = []
    for lvl in hierarchy.levels:
        per_level.append(
            AnchorDeltaSet(
                (rng.standard_normal((lvl.anchor_count, 3)) * scale).astype(np.float32),
                (rng.standard_normal((lvl.anchor_count, 4)) * scale).astype(np.float32),
            )
        )
    return FrameDeformation(per_level)


# ---------------------------------------------------------------------------
# compose_deformation
# ---------------------------------------------------------------------------


def test_compose_zero_deltas(rng):
    pos = rng.random((50, 3), dtype=np.float32)
    h = hierarchy_for(pos)
    dmu, dq = compose_deformation(h, FrameDeformation.zeros(h))
    assert not dmu.any() and not dq.any()


def test_compose_single_anchor_broadcast(rng):
    pos = rng.random((20, 3), dtype=np.float32)
    h = hierarchy_for(pos, levels=1)
    assert h.anchor_counts() == (1,)
    ds = AnchorDeltaSet(np.float32([[1, 2, 3]]), np.zeros((1, 4), np.float32))
    dmu, dq = compose_deformation(h, FrameDeformation([ds]))
    assert np.array_equal(dmu, np.tile(np.float32([1, 2, 3]), (20, 1)))
    assert not dq.any()


def test_compose_matches_per_gaussian_loop(rng):
    rng = np.random.default_rng(7)
    pos = rng.random((100, 3), dtype=np.float32)
    h = hierarchy_for(pos)
    deltas = random_deltas(h, rng)
    dmu, dq = compose_deformation(h, deltas)
    for g in range(100):
        want_mu = np.zeros(3, np.float32)
        want_q = np.zeros(4, np.float32)
        for lvl, ds in zip(h.levels, deltas.per_level):
            want_mu += ds.translations[lvl.assignment[g]]
            want_q += ds.rotations[lvl.assignment[g]]
        assert np.array_equal(dmu[g], want_mu)
        assert np.array_equal(dq[g], want_q)


def test_compose_linear_in_deltas(rng):
    pos = rng.random((60, 3), dtype=np.float32)
    h = hierarchy_for(pos)
    # dyadic values keep float32 arithmetic exact under scaling and addition
    d1 = FrameDeformation(
        [AnchorDeltaSet(np.full((l.anchor_count, 3), 0.25, np.float32),
                        np.full((l.anchor_count, 4), 0.5, np.float32)) for l in h.levels]
    )
    d2 = FrameDeformation(
        [AnchorDeltaSet(np.full((l.anchor_count, 3), 0.125, np.float32),
                        np.full((l.anchor_count, 4), -0.25, np.float32)) for l in h.levels]
    )
    combo = FrameDeformation(
        [AnchorDeltaSet(2 * a.translations + 4 * b.translations,
                        2 * a.rotations + 4 * b.rotations)
         for a, b in zip(d1.per_level, d2.per_level)]
    )
    dmu_c, dq_c = compose_deformation(h, combo)
    dmu_1, dq_1 = compose_deformation(h, d1)
    dmu_2, dq_2 = compose_deformation(h, d2)
    assert np.array_equal(dmu_c, 2 * dmu_1 + 4 * dmu_2)
    assert np.array_equal(dq_c, 2 * dq_1 + 4 * dq_2)


def test_compose_rejects_mismatched_deltas(rng):
    pos = rng.random((30, 3), dtype=np.float32)
    h = hierarchy_for(pos)
    bad = FrameDeformation([AnchorDeltaSet.zeros(lvl.anchor_count + 1) for lvl in h.levels])
    with pytest.raises(ValueError):
        compose_deformation(h, bad)


# ---------------------------------------------------------------------------
# apply_deformation
# ---------------------------------------------------------------------------


def test_apply_zero_is_identity_both_modes(rng):
    pos = rng.random((40, 3), dtype=np.float32)
    g = GaussianSet.from_positions(pos)
    h = hierarchy_for(pos)
    zeros = FrameDeformation.zeros(h)
    for mode in (CompositionMode.additive, CompositionMode.pivot):
        out = apply_deformation(g, h, zeros, mode)
        for a, b in zip(g.attribute_arrays(), out.attribute_arrays()):
            assert np.array_equal(a, b)


def test_apply_additive_pure_translation(rng):
    pos = rng.random((25, 3), dtype=np.float32)
    g = GaussianSet.from_positions(pos)
    dmu = np.tile(np.float32([0, 0, 1]), (25, 1))
    dq = np.zeros((25, 4), np.float32)
    out = apply_composed(g, dmu, dq)
    assert np.array_equal(out.positions, pos + dmu)
    assert np.array_equal(out.orientations, g.orientations)


def test_apply_additive_normalizes_orientations(rng):
    pos = rng.random((30, 3), dtype=np.float32)
    g = GaussianSet.from_positions(pos)
    dq = rng.standard_normal((30, 4)).astype(np.float32) * 0.3
    out = apply_composed(g, np.zeros((30, 3), np.float32), dq)
    norms = np.linalg.norm(out.orientations.astype(np.float64), axis=1)
    assert np.abs(norms - 1).max() < 1e-6
    violations = validate_state(SceneState(out))
    assert violations == []


def test_apply_additive_round_trip_within_ulp(rng):
    pos = rng.random((50, 3), dtype=np.float32)
    g = GaussianSet.from_positions(pos)
    dmu = rng.standard_normal((50, 3)).astype(np.float32) * 0.2
    zeros_q = np.zeros((50, 4), np.float32)
    there = apply_composed(g, dmu, zeros_q)
    back = apply_composed(there, -dmu, zeros_q)
    ulp = np.spacing(np.abs(pos) + np.abs(dmu))
    assert (np.abs(back.positions - pos) <= ulp).all()


def test_apply_degenerate_quaternion_rejected(rng):
    pos = rng.random((5, 3), dtype=np.float32)
    g = GaussianSet.from_positions(pos)
    dq = np.zeros((5, 4), np.float32)
    dq[2] = -g.orientations[2]  # cancels to zero norm
    with pytest.raises(DegenerateQuaternionError):
        apply_composed(g, np.zeros((5, 3), np.float32), dq)


def test_apply_pivot_rotation_about_anchor():
    # two points: the anchor at the origin and a satellite at (1, 0, 0)
    pos = np.float32([[0, 0, 0], [1, 0, 0]])
    g = GaussianSet.from_positions(pos)
    cfg = StreamConfig(levels=1, finest_fraction=1)
    h = build_hierarchy(pos, cfg)
    h.levels[0].anchor_indices = np.array([0])
    h.levels[0].assignment = np.array([0, 0])
    # increment encoding 90 degrees about z: q_hat = (1,0,0,0) + delta ~ unit
    q90 = quat_from_axis_angle([0, 0, 1], np.pi / 2)
    scale = 1.0 / q90[0]  # so that (1,0,0,0) + delta is parallel to q90
    delta = (q90 * scale - np.array([1.0, 0, 0, 0])).astype(np.float32)
    ds = AnchorDeltaSet(np.zeros((1, 3), np.float32), delta[None, :])
    out = apply_deformation(g, h, FrameDeformation([ds]), CompositionMode.pivot)
    assert np.abs(out.positions[1] - np.float32([0, 1, 0])).max() < 1e-6
    assert np.abs(out.positions[0]).max() < 1e-6  # the anchor itself only spins


def test_apply_pivot_matches_rotation_matrix_oracle(rng):
    pos = rng.random((30, 3), dtype=np.float32)
    g = GaussianSet.from_positions(pos)
    cfg = StreamConfig(levels=1, finest_fraction=1)
    h = build_hierarchy(pos, cfg)
    anchor = int(h.levels[0].anchor_indices[0])
    h.levels[0].anchor_indices = np.array([anchor])
    h.levels[0].assignment = np.zeros(30, np.int64)
    delta_q = (rng.standard_normal(4) * 0.2).astype(np.float32)
    delta_t = (rng.standard_normal(3) * 0.1).astype(np.float32)
    ds = AnchorDeltaSet(delta_t[None, :], delta_q[None, :])
    out = apply_deformation(g, h, FrameDeformation([ds]), CompositionMode.pivot)

    y = delta_q.astype(np.float64)
    y[0] += 1.0
    q_hat = y / np.linalg.norm(y)
    rot = rotation_matrix(q_hat)
    pivot = pos[anchor].astype(np.float64)
    want = (pos.astype(np.float64) - pivot) @ rot.T + pivot + delta_t.astype(np.float64)
    assert np.abs(out.positions - want.astype(np.float32)).max() < 1e-6


# ---------------------------------------------------------------------------
# average_quaternions / symmetric4_max_eigenvector
# ---------------------------------------------------------------------------


def unit(v):
    v = np.asarray(v, np.float64)
    return v / np.linalg.norm(v)


def test_average_identical_quaternions(rng):
    q = unit(rng.standard_normal(4))
    avg = average_quaternions(q, q, q)
    assert np.abs(avg - canonical_sign(q)).max() < 1e-12


def test_average_sign_flip_exact(rng):
    q = unit(rng.standard_normal(4))
    a = average_quaternions(q, q, q)
    b = average_quaternions(q, -q, q)
    assert np.array_equal(a, b)


def test_average_permutation_exact(rng):
    q1, q2, q3 = (unit(rng.standard_normal(4)) for _ in range(3))
    a = average_quaternions(q1, q2, q3)
    b = average_quaternions(q3, q1, q2)
    c = average_quaternions(q2, q3, q1)
    assert np.array_equal(a, b) and np.array_equal(b, c)


def test_average_matches_jacobi_oracle():
    rng = np.random.default_rng(3)
    for _ in range(200):
        qs = [unit(rng.standard_normal(4)) for _ in range(3)]
        avg = average_quaternions(*qs)
        m = sum(np.outer(q, q) for q in qs)
        _, oracle_vec = dominant_eigenvector(m)
        assert min(
            np.abs(avg - oracle_vec).max(), np.abs(avg + oracle_vec).max()
        ) < 1e-9


def test_average_rejects_zero():
    q = unit([1, 2, 3, 4])
    with pytest.raises(ValueError):
        average_quaternions(q, np.zeros(4), q)


def test_eigenvector_identity_matrix():
    lam, vec = symmetric4_max_eigenvector(np.eye(4))
    assert abs(lam - 1) < 1e-12
    assert abs(np.linalg.norm(vec) - 1) < 1e-12
    nz = vec[vec != 0]
    assert nz.size == 0 or nz[0] > 0  # canonical sign


def test_eigenvector_diagonal():
    lam, vec = symmetric4_max_eigenvector(np.diag([4.0, 3.0, 2.0, 1.0]))
    assert abs(lam - 4) < 1e-12
    assert np.abs(vec - [1, 0, 0, 0]).max() < 1e-9


def test_eigenvector_matches_jacobi(rng):
    for _ in range(100):
        qs = [unit(rng.standard_normal(4)) for _ in range(3)]
        m = sum(np.outer(q, q) for q in qs)
        lam, vec = symmetric4_max_eigenvector(m)
        oracle_lam, oracle_vec = dominant_eigenvector(m)
        assert abs(lam - oracle_lam) <= 1e-10 * max(1.0, abs(oracle_lam))
        assert np.abs(vec - oracle_vec).max() < 1e-8
        assert np.linalg.norm(m @ vec - lam * vec) <= 1e-9 * np.abs(m).max() * 4


def test_eigenvector_residual_postcondition(rng):
    for _ in range(50):
        a = rng.standard_normal((4, 4))
        m = a + a.T
        lam, vec = symmetric4_max_eigenvector(m)
        assert np.linalg.norm(m @ vec - lam * vec) <= 1e-9 * max(1.0, np.abs(m).max())


def test_eigenvector_rejects_asymmetric():
    m = np.eye(4)
    m[0, 1] = 1e-3
    with pytest.raises(ValueError):
        symmetric4_max_eigenvector(m)


# ---------------------------------------------------------------------------
# inherit_deformation
# ---------------------------------------------------------------------------


def test_inherit_all_zero(rng):
    legacy = AnchorDeltaSet.zeros(5)
    nbr = rng.integers(0, 5, (8, 3)).astype(np.int64)
    out = inherit_deformation(legacy, nbr)
    assert not out.translations.any() and not out.rotations.any()


def test_inherit_translation_mean():
    legacy = AnchorDeltaSet(
        np.float32([[1, 0, 0], [0, 1, 0], [0, 0, 1]]),
        np.zeros((3, 4), np.float32),
    )
    out = inherit_deformation(legacy, np.array([[0, 1, 2]]))
    third = np.float32(1.0 / 3.0)
    assert np.abs(out.translations[0] - third).max() <= np.spacing(third)


def test_inherit_rotation_matches_jacobi_oracle():
    angles = [np.deg2rad(d) for d in (10, 20, 30)]
    quats = [quat_from_axis_angle([0, 0, 1], a) for a in angles]
    legacy = AnchorDeltaSet(
        np.zeros((3, 3), np.float32),
        np.stack(quats).astype(np.float32),
    )
    out = inherit_deformation(legacy, np.array([[0, 1, 2]]))
    m = sum(np.outer(q.astype(np.float64), q.astype(np.float64))
            for q in legacy.rotations)
    _, oracle_vec = dominant_eigenvector(m)
    got = out.rotations[0].astype(np.float64)
    assert min(np.abs(got - oracle_vec).max(), np.abs(got + oracle_vec).max()) < 1e-6


def test_inherit_skips_zero_rotations():
    q = quat_from_axis_angle([0, 1, 0], 0.3).astype(np.float32)
    legacy = AnchorDeltaSet(
        np.zeros((3, 3), np.float32),
        np.stack([q, np.zeros(4, np.float32), q]),
    )
    out = inherit_deformation(legacy, np.array([[0, 1, 2]]))
    # averaging two copies of q (zeros skipped) gives back q up to sign
    got = out.rotations[0].astype(np.float64)
    want = canonical_sign(q.astype(np.float64))
    assert np.abs(got - want).max() < 1e-6


def test_inherit_rejects_empty_legacy():
    with pytest.raises(ValueError):
        inherit_deformation(AnchorDeltaSet.zeros(0), np.zeros((2, 3), np.int64))


def test_inherit_rejects_bad_ordinals():
    with pytest.raises(ValueError):
        inherit_deformation(AnchorDeltaSet.zeros(2), np.array([[0, 1, 5]]))
