import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from corrreg.se3 import (
    BranchAmbiguityError, Pose, PoseDistribution, TangentVec, compose, exp_map, geodesic_grad, geodesic_sq,
    inverse, log_map, perturb, rotation_angle_between, sample_pose, so3_exp,
)

finite = st.floats(-3.0, 3.0, allow_nan=False)
vec3 = arrays(np.float64, 3, elements=finite)
tvec = arrays(np.float64, 6, elements=st.floats(-50.0, 50.0, allow_nan=False))


def rot_z(deg):
    return Pose(so3_exp([0.0, 0.0, math.radians(deg)]), np.zeros(3))


def random_pose(rng, rot=1.0, trans=20.0):
    omega = rng.normal(size=3)
    omega *= rng.uniform(0, rot) / max(np.linalg.norm(omega), 1e-12)
    return exp_map(np.r_[omega, rng.normal(0, trans, 3)])


def test_exp_zero_is_identity():
    p = exp_map(np.zeros(6))
    assert np.array_equal(p.rotation, np.eye(3))
    assert np.array_equal(p.translation, np.zeros(3))


def test_exp_quarter_turn_about_z():
    R = exp_map([0, 0, math.pi / 2, 0, 0, 0]).rotation
    expected = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    assert np.allclose(R, expected, atol=1e-12)


def test_exp_pure_translation():
    p = exp_map([0, 0, 0, 5, 0, 0])
    assert np.allclose(p.rotation, np.eye(3))
    assert np.allclose(p.translation, [5, 0, 0])


def test_log_identity_and_quarter_turn():
    assert np.allclose(log_map(Pose.identity()).as_array(), 0.0)
    xi = log_map(rot_z(90)).as_array()
    assert np.allclose(xi, [0, 0, math.pi / 2, 0, 0, 0], atol=1e-9)


def test_log_rejects_half_turn():
    with pytest.raises(BranchAmbiguityError):
        log_map(Pose(so3_exp([0, math.pi, 0]), np.zeros(3)))


def test_pose_rejects_non_rotation():
    with pytest.raises(ValueError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        Pose(np.eye(3) * 1.01, np.zeros(3))


@settings(max_examples=300, deadline=None)
@given(vec3, arrays(np.float64, 3, elements=st.floats(-100, 100)))
def test_exp_log_round_trip(omega, nu):
    n = np.linalg.norm(omega)
    if n > math.pi - 0.1:
        omega = omega * (math.pi - 0.1) / n
    xi = np.r_[omega, nu]
    assert np.allclose(log_map(exp_map(xi)).as_array(), xi, atol=1e-9)


def test_small_angle_branch_is_continuous():
    for a in (1e-12, 1e-9, 1e-7, 1e-5):
        xi = np.array([a, -a, 0.5 * a, 1.0, 2.0, 3.0])
        assert np.allclose(log_map(exp_map(xi)).as_array(), xi, atol=1e-12)


def test_compose_inverse_and_translations():
    rng = np.random.default_rng(1)
    a = random_pose(rng)
    c = compose(a, inverse(a))
    assert np.allclose(c.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(c.translation, 0, atol=1e-9)
    t = compose(exp_map([0, 0, 0, 1, 2, 3]), exp_map([0, 0, 0, -4, 1, 0.5]))
    assert np.allclose(t.translation, [-3, 3, 3.5])


def test_compose_associative():
    rng = np.random.default_rng(2)
    for _ in range(100):
        a, b, c = (random_pose(rng, 3.0) for _ in range(3))
        l, r = compose(compose(a, b), c), compose(a, compose(b, c))
        assert np.allclose(l.matrix(), r.matrix(), atol=1e-9)


def test_geodesic_examples():
    assert geodesic_sq(rot_z(0), rot_z(0)) == 0.0
    assert geodesic_sq(rot_z(0), rot_z(90), trans_scale=1.0) == pytest.approx((math.pi / 2) ** 2, abs=1e-9)
    a, b = exp_map([0, 0, 0, 0, 0, 0]), exp_map([0, 0, 0, 3, 4, 0])
    assert geodesic_sq(a, b, trans_scale=5.0) == pytest.approx(1.0)


def test_geodesic_metric_properties():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        a, b = random_pose(rng, 2.5), random_pose(rng, 2.5)
        d = geodesic_sq(a, b)
        assert d > 0
        assert d == pytest.approx(geodesic_sq(b, a), rel=1e-9, abs=1e-12)


def test_geodesic_rotational_part_left_invariant():
    rng = np.random.default_rng(4)
    for _ in range(50):
        a, b, g = random_pose(rng, 1.2), random_pose(rng, 1.2), random_pose(rng, 3.0)
        assert rotation_angle_between(compose(g, a), compose(g, b)) == pytest.approx(
            rotation_angle_between(a, b), abs=1e-9)


def fd_grad(a, b, h=1e-5, trans_scale=30.0):
    g = np.zeros(6)
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        g[k] = (geodesic_sq(perturb(a, e), b, trans_scale) - geodesic_sq(perturb(a, -e), b, trans_scale)) / (2 * h)
    return g


def test_geodesic_grad_matches_finite_differences():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        a, b = random_pose(rng, 2.0), random_pose(rng, 2.0)
        g = geodesic_grad(a, b).as_array()
        fd = fd_grad(a, b)
        worst = max(worst, np.max(np.abs(g - fd)) / np.max(np.abs(fd)))
    assert worst <= 1e-4


def test_geodesic_grad_zero_at_minimum_and_scaling():
    rng = np.random.default_rng(6)
    a, b = random_pose(rng), random_pose(rng)
    assert np.allclose(geodesic_grad(a, a).as_array(), 0.0)
    g1 = geodesic_grad(a, b, 30.0).as_array()
    g2 = geodesic_grad(a, b, 60.0).as_array()
    assert np.allclose(g2[:3], g1[:3])
    assert np.allclose(g2[3:], g1[3:] / 4.0)


def test_sample_pose_statistics_and_determinism():
    assert np.allclose(sample_pose(PoseDistribution(), 0).matrix(), np.eye(4))
    d = PoseDistribution((20.0, 20.0, 20.0), (1.0, 1.0, 1.0))
    rng = np.random.default_rng(7)
    from corrreg.se3 import sample_euler
    angles = np.array([sample_euler(d, rng)[0] for _ in range(10_000)])
    assert np.all(np.abs(angles.std(axis=0) / 20.0 - 1.0) < 0.05)
    assert np.array_equal(sample_pose(d, 11).matrix(), sample_pose(d, 11).matrix())


def test_pose_record_round_trip():
    p = random_pose(np.random.default_rng(8))
    q = Pose.from_json(p.to_json())
    assert np.allclose(p.matrix(), q.matrix(), atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(tvec)
def test_perturb_matches_exp_composition(xi):
    xi = xi.copy()
    xi[:3] *= 0.05
    p = exp_map([0.1, -0.2, 0.3, 1, 2, 3])
    assert np.allclose(perturb(p, xi).matrix(), p.matrix() @ exp_map(xi).matrix(), atol=1e-9)


def test_tangent_vec_round_trip():
    v = TangentVec.from_array([1, 2, 3, 4, 5, 6])
    assert np.array_equal(v.as_array(), [1, 2, 3, 4, 5, 6])
