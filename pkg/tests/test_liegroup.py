import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from se3dif import liegroup as lg
from se3dif.errors import AngleNearPi

from oracles import hat6, left_diff, pose, rel_error, rot_z, series_expm, series_left_jacobian


def random_twists(rng, n, max_angle=math.pi - 0.01):
    xi = rng.standard_normal((n, 6))
    w = xi[:, 3:]
    scale = rng.uniform(0.0, max_angle, n) / np.linalg.norm(w, axis=1)
    xi[:, 3:] = w * scale[:, None]
    return xi


twist_strategy = st.lists(st.floats(-2.0, 2.0), min_size=6, max_size=6).map(np.array)


# -- expmap / logmap --------------------------------------------------------


def test_expmap_zero_is_identity():
    np.testing.assert_array_equal(lg.expmap(np.zeros(6)), np.eye(4))


def test_expmap_pure_translation():
    np.testing.assert_allclose(lg.expmap(np.array([1.0, 0, 0, 0, 0, 0])), pose(t=[1, 0, 0]), atol=0)


def test_expmap_quarter_turn_matches_series():
    xi = np.array([0, 0, 0, 0, 0, math.pi / 2])
    np.testing.assert_allclose(lg.expmap(xi), series_expm(hat6(xi), 20), atol=1e-12)
    np.testing.assert_allclose(lg.expmap(xi)[:3, :3], rot_z(math.pi / 2), atol=1e-15)


def test_expmap_matches_series_on_random_twists():
    rng = np.random.default_rng(0)
    for xi in random_twists(rng, 50, max_angle=2.0):
        # the 20-term series is only accurate to ~1e-10 at these norms
        np.testing.assert_allclose(lg.expmap(xi), series_expm(hat6(xi), 30), atol=1e-10)


def test_logmap_identity_and_translation():
    np.testing.assert_array_equal(lg.logmap(np.eye(4)), np.zeros(6))
    np.testing.assert_allclose(lg.logmap(pose(t=[0.3, -0.1, 0.2])), [0.3, -0.1, 0.2, 0, 0, 0], atol=1e-15)


def test_roundtrip_at_unit_angle():
    rng = np.random.default_rng(1)
    xi = rng.standard_normal((1000, 6))
    xi[:, 3:] /= np.linalg.norm(xi[:, 3:], axis=1, keepdims=True)
    assert np.max(np.linalg.norm(lg.logmap(lg.expmap(xi)) - xi, axis=1)) < 1e-9


def test_roundtrip_over_whole_branch():
    xi = random_twists(np.random.default_rng(2), 1000)
    assert np.max(np.linalg.norm(lg.logmap(lg.expmap(xi)) - xi, axis=1)) < 1e-9


@settings(max_examples=200, deadline=None)
@given(twist_strategy)
def test_roundtrip_property(xi):
    if np.linalg.norm(xi[3:]) > math.pi - 0.01:
        xi = xi.copy()
        xi[3:] *= (math.pi - 0.01) / np.linalg.norm(xi[3:])
    assert np.linalg.norm(lg.logmap(lg.expmap(xi)) - xi) < 1e-9


def test_logmap_near_pi_raises():
    with pytest.raises(AngleNearPi):
        lg.logmap(lg.make_pose(lg.rot_z(math.pi - 1e-7), np.zeros(3)))
    with pytest.raises(AngleNearPi):
        lg.logmap(lg.make_pose(lg.rot_x(math.pi), np.zeros(3)))


def test_taylor_branch_continuity():
    axis = np.array([0.3, -0.5, 0.8]) / np.linalg.norm([0.3, -0.5, 0.8])
    v = np.array([0.2, 0.1, -0.4])
    below = lg.expmap(np.concatenate([v, axis * (lg.SMALL_ANGLE * (1 - 1e-6))]))
    above = lg.expmap(np.concatenate([v, axis * (lg.SMALL_ANGLE * (1 + 1e-6))]))
    assert np.max(np.abs(below - above)) < 1e-12


def test_batched_maps_match_single():
    xi = random_twists(np.random.default_rng(3), 7).reshape(7, 6)
    batch = lg.expmap(xi)
    for i in range(7):
        np.testing.assert_array_equal(batch[i], lg.expmap(xi[i]))


# -- group operations -------------------------------------------------------


@settings(max_examples=100, deadline=None)
@given(twist_strategy, twist_strategy)
def test_compose_stays_in_group(a, b):
    p = lg.compose(lg.expmap(a), lg.expmap(b))
    assert lg.pose_error(p) < 1e-9


def test_compose_inverse_and_involution():
    rng = np.random.default_rng(4)
    for xi in random_twists(rng, 20):
        p = lg.expmap(xi)
        np.testing.assert_allclose(lg.compose(p, lg.inverse(p)), np.eye(4), atol=1e-9)
        np.testing.assert_allclose(lg.inverse(lg.inverse(p)), p, atol=1e-12)
        np.testing.assert_array_equal(lg.compose(np.eye(4), p), p)


def test_transform_point_hand_computed():
    p = lg.make_pose(lg.rot_z(math.pi / 2), np.array([1.0, 0, 0]))
    np.testing.assert_allclose(lg.transform_point(p, np.array([1.0, 0, 0])), [1, 1, 0], atol=1e-15)


# -- adjoint ----------------------------------------------------------------


def test_adjoint_identity_and_rotation_blocks():
    np.testing.assert_array_equal(lg.adjoint(np.eye(4)), np.eye(6))
    r = rot_z(0.7)
    adj = lg.adjoint(pose(r))
    np.testing.assert_allclose(adj[:3, :3], r, atol=1e-15)
    np.testing.assert_allclose(adj[3:, 3:], r, atol=1e-15)
    np.testing.assert_array_equal(adj[:3, 3:], 0)
    np.testing.assert_array_equal(adj[3:, :3], 0)


def test_adjoint_commutation_200_pairs():
    rng = np.random.default_rng(5)
    poses = lg.expmap(random_twists(rng, 200))
    twists = rng.standard_normal((200, 6))
    lhs = lg.expmap(np.einsum("nij,nj->ni", lg.adjoint(poses), twists)) @ poses
    rhs = poses @ lg.expmap(twists)
    assert np.max(np.abs(lhs - rhs)) < 1e-8


# -- Jacobians --------------------------------------------------------------


def test_inv_left_jacobian_at_zero():
    np.testing.assert_array_equal(lg.inv_left_jacobian(np.zeros(6)), np.eye(6))


def test_inv_left_jacobian_matches_logmap_derivative():
    rng = np.random.default_rng(6)
    h = 1e-6
    for _ in range(20):
        phi = rng.standard_normal(6)
        phi[3:] *= 0.5 / np.linalg.norm(phi[3:])
        base = lg.expmap(phi)
        num = np.zeros((6, 6))
        for j in range(6):
            e = np.zeros(6)
            e[j] = h
            num[:, j] = (lg.logmap(series_expm(hat6(e)) @ base) - lg.logmap(series_expm(hat6(-e)) @ base)) / (2 * h)
        assert np.max(np.abs(lg.inv_left_jacobian(phi) - num)) < 1e-5


def test_inv_left_jacobian_inverts_series_jacobian():
    rng = np.random.default_rng(7)
    for phi in random_twists(rng, 30, max_angle=2.0):
        np.testing.assert_allclose(lg.inv_left_jacobian(phi) @ series_left_jacobian(phi, 40), np.eye(6), atol=1e-8)
        np.testing.assert_allclose(lg.left_jacobian(phi), series_left_jacobian(phi, 40), atol=1e-10)


def test_inv_left_jacobian_small_angle_branch():
    phi = np.array([1e-9, 2e-9, 0, 0, 3e-9, 1e-9])
    np.testing.assert_allclose(lg.inv_left_jacobian(phi), np.eye(6) - 0.5 * lg.ad(phi), atol=1e-18)
    # continuity across the series switch
    axis = np.array([0.0, 0.6, 0.8])
    for theta in (lg.SERIES_ANGLE * (1 - 1e-9), lg.SERIES_ANGLE * (1 + 1e-9)):
        xi = np.concatenate([[0.1, 0.2, 0.3], theta * axis])
        np.testing.assert_allclose(lg.inv_left_jacobian(xi) @ series_left_jacobian(xi), np.eye(6), atol=1e-12)


def test_inv_left_jacobian_near_pi_raises():
    with pytest.raises(AngleNearPi):
        lg.inv_left_jacobian(np.array([0, 0, 0, 0, 0, math.pi - 1e-8]))


# -- Gaussians --------------------------------------------------------------


def test_sampling_degenerate_sigma():
    mean = lg.expmap(np.array([0.1, 0.2, 0.3, 0.4, 0.5, 0.6]))
    sample = lg.sample_lie_gaussian(lg.LieGaussian(mean, 1e-12), rng=3)
    np.testing.assert_allclose(sample, mean, atol=1e-9)


def test_sampling_moments():
    mean = lg.expmap(np.array([0.1, -0.2, 0.3, 0.4, 0.1, -0.6]))
    samples = lg.sample_lie_gaussian(lg.LieGaussian(mean, 0.1), rng=11, size=10_000)
    eps = lg.logmap(lg.inverse(mean) @ samples)
    assert np.linalg.norm(eps.mean(axis=0)) < 0.01
    np.testing.assert_allclose(eps.std(axis=0), 0.1, rtol=0.1)


def test_sampling_deterministic():
    g = lg.LieGaussian(np.eye(4), 0.3)
    np.testing.assert_array_equal(lg.sample_lie_gaussian(g, 5, 10), lg.sample_lie_gaussian(g, 5, 10))


def test_sigma_must_be_positive():
    with pytest.raises(ValueError):
        lg.LieGaussian(np.eye(4), 0.0)


def test_score_at_mode_is_zero():
    mean = lg.expmap(np.array([0.1, 0.2, 0.3, 0.4, 0.5, 0.6]))
    np.testing.assert_allclose(lg.lie_gaussian_score(lg.LieGaussian(mean, 0.4), mean), 0, atol=1e-12)


def test_score_translation_offset():
    mean = lg.expmap(np.array([0.0, 0.0, 0.0, 0.3, -0.2, 0.5]))
    d = np.array([0.1, -0.2, 0.05])
    query = mean @ pose(t=d)
    g = lg.LieGaussian(mean, 1.0)
    score = lg.lie_gaussian_score(g, query)
    num = left_diff(lambda h: float(lg.lie_gaussian_log_density(g, h)), query)
    assert rel_error(score, num) < 1e-6
    # mean^-1 query is a pure translation: the rotational part of phi vanishes
    np.testing.assert_allclose(score[:3], -lg.rotation(mean) @ d, atol=1e-12)


def test_score_matches_density_differences_100_cases():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(100):
        mean = lg.expmap(rng.standard_normal(6))
        sigma = rng.uniform(0.2, 1.0)
        query = mean @ lg.expmap(0.5 * sigma * rng.standard_normal(6))
        g = lg.LieGaussian(mean, sigma)
        num = left_diff(lambda h: float(lg.lie_gaussian_log_density(g, h)), query)
        worst = max(worst, rel_error(lg.lie_gaussian_score(g, query), num))
    assert worst < 1e-4


# -- distances --------------------------------------------------------------


def test_distance_examples():
    p = lg.expmap(np.array([0.1, 0.2, 0.3, 0.4, 0.5, 0.6]))
    assert lg.se3_distance(p, p) == pytest.approx(0, abs=1e-12)
    assert lg.se3_distance(np.eye(4), pose(t=[0.3, 0, 0])) == pytest.approx(0.3, abs=1e-15)
    assert lg.se3_distance(np.eye(4), pose(rot_z(0.5), [0.1, 0, 0])) == pytest.approx(0.6, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(twist_strategy, twist_strategy)
def test_distance_symmetric(a, b):
    pa, pb = lg.expmap(a), lg.expmap(b)
    if lg.rotation_angle(lg.rotation(pa).T @ lg.rotation(pb)) > math.pi - 1e-3:
        return
    assert lg.se3_distance(pa, pb) == pytest.approx(lg.se3_distance(pb, pa), abs=1e-12)


def test_pairwise_distance_matches_scalar_and_twins():
    rng = np.random.default_rng(9)
    a = lg.expmap(random_twists(rng, 6, 1.0))
    b = lg.expmap(random_twists(rng, 5, 1.0))
    full = lg.pairwise_se3_distance(a, b)
    for i in range(6):
        for j in range(5):
            assert full[i, j] == pytest.approx(lg.se3_distance(a[i], b[j]), abs=1e-12)
    args = [np.ascontiguousarray(x) for x in (lg.translation(a), lg.rotation(a), lg.translation(b), lg.rotation(b))]
    fast, slow = lg._pairwise_numba(*args), lg._pairwise_numpy(*args)
    np.testing.assert_allclose(fast[0] + fast[1], slow[0] + slow[1], atol=1e-12)
