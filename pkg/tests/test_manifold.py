import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swarmlio.manifold import (
    SwarmState,
    boxminus,
    boxplus,
    error_dim,
    orthonormalize,
    so3_exp,
    so3_exp_batch,
    so3_log,
)


def random_rotation(rng):
    r = rng.normal(size=3)
    r *= rng.uniform(0, math.pi * 0.999) / np.linalg.norm(r)
    return so3_exp(r)


def random_state(rng, n_teammates):
    x = SwarmState.for_swarm(range(2, 2 + n_teammates))
    x.ego_rot = random_rotation(rng)
    x.ego_pos, x.ego_vel = rng.normal(size=3), rng.normal(size=3)
    x.bias_gyro, x.bias_acc = rng.normal(size=3) * 0.01, rng.normal(size=3) * 0.1
    x.gravity = np.array([0, 0, -9.81]) + rng.normal(size=3) * 0.1
    for e in x.extrinsics:
        e.rot, e.pos, e.initialized = random_rotation(rng), rng.normal(size=3) * 10, True
    return x


def random_delta(rng, dim):
    d = rng.normal(size=dim)
    d[0:3] *= rng.uniform(0, 3.0) / np.linalg.norm(d[0:3])
    for s in range(18, dim, 6):
        d[s : s + 3] *= rng.uniform(0, 3.0) / np.linalg.norm(d[s : s + 3])
    return d


def test_exp_identity():
    assert np.array_equal(so3_exp(np.zeros(3)), np.eye(3))


def test_exp_quarter_turn_about_x():
    R = so3_exp([math.pi / 2, 0, 0])
    np.testing.assert_allclose(R @ [0, 1, 0], [0, 0, 1], atol=1e-15)
    np.testing.assert_allclose(R @ [0, 0, 1], [0, -1, 0], atol=1e-15)


def test_exp_tiny_angle_matches_series():
    r = np.array([3.0, -4.0, 12.0]) / 13.0 * 1e-10
    K = np.array([[0, -r[2], r[1]], [r[2], 0, -r[0]], [-r[1], r[0], 0]])
    series = np.eye(3) + K + K @ K / 2 + K @ K @ K / 6
    np.testing.assert_allclose(so3_exp(r), series, atol=1e-15, rtol=0)


@pytest.mark.parametrize("bad", [[np.nan, 0, 0], [0, np.inf, 0]])
def test_exp_rejects_non_finite(bad):
    with pytest.raises(ValueError):
        so3_exp(bad)


def test_log_identity_and_roundtrip():
    assert np.array_equal(so3_log(np.eye(3)), np.zeros(3))
    np.testing.assert_allclose(so3_log(so3_exp([0.3, -0.2, 0.1])), [0.3, -0.2, 0.1], atol=1e-12)


def test_log_half_turn_matches_eigen_axis():
    R = np.diag([1.0, -1.0, -1.0])
    r = so3_log(R)
    # oracle: rotation axis is the eigenvector of R with eigenvalue +1
    w, V = np.linalg.eig(R)
    axis = np.real(V[:, np.argmin(np.abs(w - 1.0))])
    assert np.linalg.norm(r) == pytest.approx(math.pi, abs=1e-12)
    assert abs(abs(r @ axis) - math.pi) < 1e-12


def test_log_near_pi_branch():
    axis = np.array([1.0, 2.0, -2.0]) / 3.0
    r = (math.pi - 1e-7) * axis
    np.testing.assert_allclose(so3_log(so3_exp(r)), r, atol=1e-8)


def test_log_rejects_non_orthonormal():
    with pytest.raises(ValueError):
        so3_log(np.diag([1.0, 1.0, 1.1]))


def test_exp_batch_agrees_with_scalar():
    rng = np.random.default_rng(3)
    r = rng.normal(size=(50, 3))
    r[0] = 0.0
    r[1] = 1e-12
    Rb = so3_exp_batch(r)
    for k in range(50):
        np.testing.assert_allclose(Rb[k], so3_exp(r[k]), atol=1e-14)


def test_orthonormalize_restores_rotation():
    R = so3_exp([0.2, 0.4, -1.0]) + 1e-6
    Q = orthonormalize(R)
    np.testing.assert_allclose(Q @ Q.T, np.eye(3), atol=1e-14)
    assert np.linalg.det(Q) == pytest.approx(1.0, abs=1e-14)


@pytest.mark.parametrize("n", [1, 2, 3, 5])
def test_error_dimension(n):
    assert error_dim(n) == 18 + 6 * (n - 1)
    assert SwarmState.for_swarm(range(n - 1)).dim == 18 + 6 * (n - 1)


def test_boxplus_zero_is_identity():
    x = random_state(np.random.default_rng(0), 2)
    y = boxplus(x, np.zeros(x.dim))
    assert np.array_equal(y.ego_rot, x.ego_rot)
    assert np.array_equal(y.extrinsics[1].rot, x.extrinsics[1].rot)
    np.testing.assert_array_equal(boxminus(y, x), np.zeros(x.dim))


def test_boxplus_translation_keeps_rotations_bitwise():
    x = random_state(np.random.default_rng(1), 2)
    d = np.zeros(x.dim)
    d[3:18] = 1.0
    d[21:24] = 2.0
    y = boxplus(x, d)
    assert np.array_equal(y.ego_rot, x.ego_rot)
    assert all(np.array_equal(a.rot, b.rot) for a, b in zip(x.extrinsics, y.extrinsics))


def test_boxminus_position_only():
    x = random_state(np.random.default_rng(2), 1)
    y = x.copy()
    y.ego_pos = y.ego_pos + [1.0, 2.0, 3.0]
    d = boxminus(y, x)
    expected = np.zeros(x.dim)
    expected[3:6] = [1.0, 2.0, 3.0]
    np.testing.assert_allclose(d, expected, atol=1e-15)


def test_boxplus_dimension_mismatch():
    x = random_state(np.random.default_rng(2), 2)
    with pytest.raises(ValueError):
        boxplus(x, np.zeros(x.dim - 6))
    with pytest.raises(ValueError):
        boxminus(x, random_state(np.random.default_rng(2), 1))


def test_boxplus_boxminus_thousand_pairs():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        x = random_state(rng, 2)
        d = random_delta(rng, x.dim)
        np.testing.assert_allclose(boxminus(boxplus(x, d), x), d, atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(-1.0, 1.0), min_size=3, max_size=3),
    st.floats(0.0, math.pi * 0.999),
)
def test_exp_log_property(direction, angle):
    v = np.asarray(direction)
    if np.linalg.norm(v) < 1e-6:
        v = np.array([1.0, 0.0, 0.0])
    r = v / np.linalg.norm(v) * angle
    R = so3_exp(r)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(so3_log(R), r, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_boxplus_inverse_property(n, seed):
    rng = np.random.default_rng(seed)
    x = random_state(rng, n - 1)
    d = random_delta(rng, x.dim)
    np.testing.assert_allclose(boxminus(boxplus(x, d), x), d, atol=1e-9)
