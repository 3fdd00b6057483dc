import dataclasses
import math

import numpy as np
import pytest

from swarmlio.config import parse_config
from swarmlio.scenarios import WALL_DEGENERATE_FROM
from swarmlio.sensor_sim import (
    GRAVITY_WORLD,
    MARKER_HIT_BASE,
    Plane,
    SensorModel,
    TrueTrajectory,
    WorldModel,
    _cast_planes,
    make_scenario,
    synth_imu,
    synth_scan,
    true_extrinsic,
)


def hover(did=1, at=(0.0, 0.0, 1.0), yaw=0.0):
    return TrueTrajectory(did, [(0.0, *at)], yaw=yaw, t_max=100.0)


class Orbit:
    """Level circular orbit, radius 2 m at 1 rad/s (analytic oracle)."""

    drone_id = 1

    def kinematics(self, t):
        t = np.asarray(t, dtype=float)
        p = np.stack([2 * np.cos(t), 2 * np.sin(t), np.ones_like(t)], -1)
        v = np.stack([-2 * np.sin(t), 2 * np.cos(t), np.zeros_like(t)], -1)
        a = np.stack([-2 * np.cos(t), -2 * np.sin(t), np.zeros_like(t)], -1)
        return p, v, a

    def rotation(self, t):
        return np.broadcast_to(np.eye(3), np.shape(t) + (3, 3))

    def omega_body(self, t):
        return np.zeros(np.shape(t) + (3,))


def test_hover_accel_is_minus_gravity():
    s = synth_imu(hover(yaw=0.7), 2.0, np.zeros(3), np.zeros(3))
    np.testing.assert_allclose(s.accel, [0, 0, 9.81], atol=1e-12)
    assert np.linalg.norm(s.accel) == pytest.approx(9.81)
    np.testing.assert_allclose(s.gyro, 0.0, atol=1e-15)


def test_orbit_centripetal_accel():
    s = synth_imu(Orbit(), 1.3, np.zeros(3), np.zeros(3))
    assert np.hypot(s.accel[0], s.accel[1]) == pytest.approx(2.0, abs=1e-12)
    assert s.accel[2] == pytest.approx(9.81)


def test_gyro_bias_exact_without_noise():
    s = synth_imu(hover(), 3.0, [0.01, 0, 0], np.zeros(3))
    assert np.array_equal(s.gyro, np.array([0.01, 0.0, 0.0]))


def test_imu_outside_domain():
    with pytest.raises(ValueError):
        synth_imu(hover(), 200.0, np.zeros(3), np.zeros(3))
    with pytest.raises(ValueError):
        synth_imu(hover(), -0.1, np.zeros(3), np.zeros(3))


def busy_trajectory():
    return TrueTrajectory(
        1, [(0.0, 0, 0, 1), (4.0, 3, 1, 1.5), (8.0, 1, -2, 1.2)],
        wiggles=[(0, 0.3, 0.2, 0.1), (1, 0.4, 0.15, 1.0), (2, 0.1, 0.3, 2.0)],
        yaw_wiggles=[(0.4, 0.1, 0.3)], roll_wiggles=[(0.1, 0.2, 0.0)],
        pitch_wiggles=[(0.1, 0.25, 1.0)], t_max=20.0)


def test_double_integration_reproduces_position():
    # strapdown with midpoint attitude and trapezoid accel; oracle is the analytic p(t)
    tr = busy_trajectory()
    dt = 1 / 200
    t = np.arange(0, 10 + dt / 2, dt)
    gyro, acc = synth_imu(tr, t, np.zeros(3), np.zeros(3))
    R_true = tr.rotation(t)
    p, v = tr.position(0.0), tr.kinematics(0.0)[1]
    err = 0.0
    for k in range(len(t) - 1):
        a0 = R_true[k] @ acc[k] + GRAVITY_WORLD
        a1 = R_true[k + 1] @ acc[k + 1] + GRAVITY_WORLD
        p = p + v * dt + (2 * a0 + a1) / 6 * dt * dt
        v = v + (a0 + a1) / 2 * dt
        err = max(err, np.linalg.norm(p - tr.position(t[k + 1])))
    assert err < 1e-3


def test_omega_matches_rotation_derivative():
    tr = busy_trajectory()
    h = 1e-6
    for t in (2.0, 5.5, 9.1):
        dR = (tr.rotation(t + h) - tr.rotation(t - h)) / (2 * h)
        W = tr.rotation(t).T @ dR
        w = np.array([W[2, 1], W[0, 2], W[1, 0]])
        np.testing.assert_allclose(tr.omega_body(t), w, atol=1e-7)


def test_trajectory_is_c2_at_waypoints():
    tr = busy_trajectory()
    for tk in (4.0, 8.0):
        a_lo = tr.kinematics(tk - 1e-7)[2]
        a_hi = tr.kinematics(tk + 1e-7)[2]
        np.testing.assert_allclose(a_lo, a_hi, atol=1e-5)


def floor_world():
    return WorldModel((Plane((0, 0, 0), (0, 0, 1), (50, 50), 80),))


def test_scan_plane_below():
    model = SensorModel.mid360(v_min_deg=-90, v_max_deg=-80, range_noise_sigma=0.0)
    tr = hover()
    scan = synth_scan(floor_world(), [tr], 1, (1.0, 1.1), model, np.random.default_rng(0))
    assert len(scan) == model.points_per_scan
    # ranges along near-vertical rays are 1/cos(angle from nadir)
    rng_ = np.linalg.norm(scan.points, axis=1)
    np.testing.assert_allclose(rng_ * -scan.points[:, 2] / rng_, 1.0, atol=1e-12)
    np.testing.assert_allclose(scan.points[:, 2], -1.0, atol=1e-12)
    assert np.all(scan.reflectivity == 80)
    assert np.all((scan.t_offset >= 0) & (scan.t_offset <= 0.1))


def test_scan_straight_down_ranges():
    model = SensorModel.mid360(v_min_deg=-90, v_max_deg=-89.9, range_noise_sigma=0.01)
    scan = synth_scan(floor_world(), [hover()], 1, (0.0, 0.1), model, np.random.default_rng(1))
    r = np.linalg.norm(scan.points, axis=1)
    assert abs(r.mean() - 1.0) < 0.002
    assert np.all(np.abs(r - 1.0) < 0.06)


def marker_count(world, me, mate, model, seed, window=(1.0, 1.1)):
    scan = synth_scan(world, [me, mate], me.drone_id, window, model, np.random.default_rng(seed))
    return scan, scan.hit_id == MARKER_HIT_BASE + mate.drone_id


def test_marker_at_five_metres_against_solid_angle():
    world = WorldModel(())
    model = SensorModel.mid360(points_per_scan=20000, range_noise_sigma=0.0)
    me, mate = hover(1, (0, 0, 1)), hover(2, (5, 0, 1.5))
    counts = []
    for seed in range(20):
        scan, m = marker_count(world, me, mate, model, seed)
        assert m.sum() >= 1
        assert np.all(scan.reflectivity[m] == 255)
        body = mate.position(1.0) - me.position(1.0)
        assert np.all(np.linalg.norm(scan.points[m] - body, axis=1) <= 0.25 + 1e-9)
        counts.append(m.sum())
    # expected = n * (sphere solid angle) / (FoV solid angle)
    d = np.linalg.norm([5, 0, 0.5])
    omega = 2 * math.pi * (1 - math.sqrt(1 - (0.25 / d) ** 2))
    fov = 2 * math.pi * (math.sin(math.radians(52)) - math.sin(math.radians(-7)))
    expected = 20000 * omega / fov
    assert abs(np.mean(counts) - expected) < 4 * math.sqrt(expected / 20)


def test_marker_behind_pyramid_fov_is_invisible():
    model = SensorModel.avia(points_per_scan=20000)
    me, mate = hover(1, (0, 0, 1)), hover(2, (-5, 0, 1))
    for seed in range(5):
        _, m = marker_count(WorldModel(()), me, mate, model, seed)
        assert m.sum() == 0
    ahead = hover(2, (5, 0, 1))
    assert marker_count(WorldModel(()), me, ahead, model, 0)[1].sum() > 0


def test_marker_beyond_range_is_invisible():
    model = SensorModel.mid360(points_per_scan=20000, max_range=10.0)
    me, mate = hover(1, (0, 0, 1)), hover(2, (12, 0, 1.5))
    assert marker_count(WorldModel(()), me, mate, model, 0)[1].sum() == 0


def test_scan_points_lie_on_surfaces():
    cfg = parse_config({"scenario": "room", "seed": 3})
    world, trajs, sensors, _ = make_scenario(cfg)
    rng = np.random.default_rng(0)
    C, N, U, V, half, _ = world.plane_arrays
    for did in trajs:
        model = sensors[did]
        scan = synth_scan(world, trajs, did, (4.0, 4.1), model, rng)
        t = 4.0 + scan.t_offset
        R = trajs[did].rotation(t)
        pw = np.einsum("nij,nj->ni", R, scan.points) + trajs[did].position(t)
        tol = 3 * model.range_noise_sigma + 1e-9
        for k, h in enumerate(scan.hit_id):
            if h < MARKER_HIT_BASE:
                assert abs((pw[k] - C[h]) @ N[h]) < tol
            else:
                c = trajs[h - MARKER_HIT_BASE].position(t[k])
                assert abs(np.linalg.norm(pw[k] - c) - world.drone_marker_radius) < tol


@pytest.mark.parametrize("name,did,t0", [("exploration", 1, 30.0), ("exploration", 3, 60.0),
                                         ("wall", 1, 10.0), ("corridor", 2, 25.0)])
def test_face_culling_is_exact(name, did, t0):
    world, trajs, sensors, _ = make_scenario(parse_config({"scenario": name, "seed": 5}))
    two_sided = dataclasses.replace(
        world, planes=tuple(dataclasses.replace(p, one_sided=False) for p in world.planes))
    a = synth_scan(world, trajs, did, (t0, t0 + 0.1), sensors[did], np.random.default_rng(2))
    b = synth_scan(two_sided, trajs, did, (t0, t0 + 0.1), sensors[did], np.random.default_rng(2))
    assert world.one_sided.any()
    assert np.array_equal(a.hit_id, b.hit_id)
    # the products run over a different plane count, so only rounding may differ
    np.testing.assert_allclose(a.points, b.points, rtol=0, atol=1e-9)


def brute_force_cast(world, o, d, max_range, min_range):
    C, N, U, V, half, _ = world.plane_arrays
    best, idx = np.full(len(d), np.inf), np.full(len(d), -1)
    for k in range(len(C)):
        den = d @ N[k]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((C[k] - o) @ N[k]) / den
        h = o + t[:, None] * d - C[k]
        ok = (np.abs(den) > 1e-12) & (t > min_range) & (t < max_range)
        ok &= (np.abs(h @ U[k]) <= half[k, 0]) & (np.abs(h @ V[k]) <= half[k, 1]) & (t < best)
        best[ok], idx[ok] = t[ok], k
    return best, idx


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_sector_cast_matches_brute_force(seed):
    world, _, _, _ = make_scenario(parse_config({"scenario": "exploration", "seed": seed}))
    # random origins may fall inside a box, where back-face culling does not apply
    world = dataclasses.replace(
        world, planes=tuple(dataclasses.replace(p, one_sided=False) for p in world.planes))
    rng = np.random.default_rng(seed)
    model = SensorModel.mid360()
    base = np.array([rng.uniform(-40, 40), rng.uniform(-40, 40), rng.uniform(0.5, 6.0)])
    # a moving origin, as during one scan
    o = base + np.linspace(0, 1, 3000)[:, None] * rng.normal(0, 0.1, 3)
    d = rng.normal(size=(3000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    t, k = _cast_planes(world, o, d, model)
    t_ref, k_ref = brute_force_cast(world, o, d, model.max_range, model.min_range)
    hit = np.isfinite(t_ref)
    assert np.array_equal(np.isfinite(t), hit)
    np.testing.assert_allclose(t[hit], t_ref[hit], rtol=0, atol=1e-9)
    assert np.array_equal(k[hit], k_ref[hit])


def test_scan_rejects_bad_window_and_unknown_id():
    model = SensorModel.mid360()
    with pytest.raises(ValueError):
        synth_scan(floor_world(), [hover()], 1, (0.0, 0.2), model, np.random.default_rng(0))
    with pytest.raises(KeyError):
        synth_scan(floor_world(), [hover()], 7, (0.0, 0.1), model, np.random.default_rng(0))


def test_world_validation():
    with pytest.raises(ValueError):
        Plane((0, 0, 0), (0, 0, 2), (1, 1))
    with pytest.raises(ValueError):
        WorldModel((Plane((0, 0, 0), (0, 0, 1), (1, 1), 250),), marker_reflectivity=240)


def test_sensor_model_invariants():
    with pytest.raises(ValueError):
        SensorModel(scan_period=0.0)
    with pytest.raises(ValueError):
        SensorModel(imu_rate=50.0)


def test_wall_preset_faces_the_wall():
    world, trajs, sensors, _ = make_scenario(parse_config({"scenario": "wall"}))
    big = max(world.planes, key=lambda p: p.extent[0] * p.extent[1])
    assert big.normal == (-1.0, 0.0, 0.0)
    assert sensors[2].fov == "pyramid"
    # drone 2's boresight hits the wall throughout the run
    for t in np.linspace(0, 45, 46):
        fwd = trajs[2].rotation(t)[:, 0]
        assert fwd[0] > 0.9
    # once past the take-off clutter, nothing but the wall is visible to drone 2
    rng = np.random.default_rng(0)
    for t0 in np.arange(WALL_DEGENERATE_FROM, 45.5, 0.5):
        scan = synth_scan(world, trajs, 2, (t0, t0 + 0.1), sensors[2], rng)
        planes = scan.hit_id[scan.hit_id < MARKER_HIT_BASE]
        assert set(planes.tolist()) == {world.planes.index(big)}


def test_corridor_preset_has_four_plane_cuboid():
    world, _, _, _ = make_scenario(parse_config({"scenario": "corridor"}))
    inner = world.planes[:4]
    normals = sorted(tuple(p.normal) for p in inner)
    assert normals == sorted([(0, 0, 1), (0, 0, -1), (0, -1, 0), (0, 1, 0)])
    assert len({p.extent[0] for p in inner}) == 1


@pytest.mark.parametrize("name", ["room", "wall", "corridor", "exploration"])
def test_scenario_is_deterministic(name):
    a = make_scenario(parse_config({"scenario": name, "seed": 42}))
    b = make_scenario(parse_config({"scenario": name, "seed": 42}))
    assert a[0] == b[0]
    for did in a[1]:
        for t in (0.0, 3.3, 12.0):
            assert np.array_equal(a[1][did].rotation(t), b[1][did].rotation(t))
            assert np.array_equal(a[1][did].position(t), b[1][did].position(t))
    sa = synth_scan(a[0], a[1], 1, (5.0, 5.1), a[2][1], np.random.default_rng(9))
    sb = synth_scan(b[0], b[1], 1, (5.0, 5.1), b[2][1], np.random.default_rng(9))
    assert np.array_equal(sa.points, sb.points)


def test_true_extrinsic_maps_frames():
    a = TrueTrajectory(1, [(0.0, 1, 2, 1)], yaw=0.4, t_max=10)
    b = TrueTrajectory(2, [(0.0, -3, 0, 1.5)], yaw=-1.1, t_max=10)
    R, p = true_extrinsic(a, b)
    # the origin of G_b expressed in G_a is b's start position seen from a's body
    np.testing.assert_allclose(p, a.rotation(0.0).T @ (b.position(0.0) - a.position(0.0)))
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
