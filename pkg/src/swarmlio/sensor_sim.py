"""Ground-truth trajectories, IMU synthesis, and ray-cast LiDAR scans.

Frames: the simulation world frame W is gravity aligned with z up. Each
drone's private global frame G_i is its body frame at t = 0, which is what
its filter starts from (identity pose).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

GRAVITY_WORLD = np.array([0.0, 0.0, -9.81])

# ids in LidarScan.hit_id beyond the plane indices
MARKER_HIT_BASE = 1000
DECOY_HIT_BASE = 2000
NO_HIT = -1
# point timestamps are quantized to this tick, in seconds
POINT_TICK = 1e-4


@dataclass(frozen=True)
class Plane:
    """Finite rectangle: ``extent`` is (size along u, size along v)."""

    center: tuple
    normal: tuple
    extent: tuple
    reflectivity: int = 60
    u_axis: tuple | None = None
    # a face of a solid standing on the floor: rays from outside never reach its back
    one_sided: bool = False

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError(f"plane normal {self.normal} is not unit length")
        if not 0 <= self.reflectivity <= 255:
            raise ValueError("reflectivity must lie in 0..255")

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        n = np.asarray(self.normal, dtype=float)
        if self.u_axis is not None:
            u = np.asarray(self.u_axis, dtype=float)
            u = u - (u @ n) * n
        elif abs(n[2]) < 0.9:
            u = np.cross([0.0, 0.0, 1.0], n)
        else:
            u = np.array([1.0, 0.0, 0.0]) - n[0] * n
        u /= np.linalg.norm(u)
        return u, np.cross(n, u)


def box_planes(center, size, yaw=0.0, reflectivity=60, skip_bottom=True) -> list[Plane]:
    """Faces of an axis-aligned (then yawed) box, normals pointing outward."""
    c = np.asarray(center, dtype=float)
    sx, sy, sz = size
    cy, sy_ = math.cos(yaw), math.sin(yaw)
    ex = np.array([cy, sy_, 0.0])
    ey = np.array([-sy_, cy, 0.0])
    ez = np.array([0.0, 0.0, 1.0])
    faces = [
        (c + ex * sx / 2, ex, (sy, sz), ey),
        (c - ex * sx / 2, -ex, (sy, sz), ey),
        (c + ey * sy / 2, ey, (sx, sz), ex),
        (c - ey * sy / 2, -ey, (sx, sz), ex),
        (c + ez * sz / 2, ez, (sx, sy), ex),
    ]
    if not skip_bottom:
        faces.append((c - ez * sz / 2, -ez, (sx, sy), ex))
    return [
        Plane(tuple(p), tuple(n), tuple(e), reflectivity, tuple(u), True) for p, n, e, u in faces
    ]


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    reflectivity: int = 255


@dataclass(frozen=True)
class WorldModel:
    planes: tuple
    drone_marker_radius: float = 0.25
    marker_reflectivity: int = 255
    decoys: tuple = ()
    # 0 disables; otherwise reflectivity *= 1 - k * (1 - |cos(incidence)|)
    incidence_attenuation: float = 0.0

    def __post_init__(self):
        top = max((p.reflectivity for p in self.planes), default=-1)
        if self.marker_reflectivity <= top:
            raise ValueError("marker reflectivity must exceed every plane reflectivity")

    @cached_property
    def plane_arrays(self):
        m = len(self.planes)
        C = np.zeros((m, 3))
        N = np.zeros((m, 3))
        U = np.zeros((m, 3))
        V = np.zeros((m, 3))
        half = np.zeros((m, 2))
        refl = np.zeros(m)
        for k, p in enumerate(self.planes):
            C[k], N[k] = p.center, p.normal
            U[k], V[k] = p.axes()
            half[k] = np.asarray(p.extent) / 2.0
            refl[k] = p.reflectivity
        return C, N, U, V, half, refl

    @cached_property
    def one_sided(self) -> np.ndarray:
        return np.array([p.one_sided for p in self.planes], dtype=bool)

    def surface_area(self) -> float:
        return float(sum(p.extent[0] * p.extent[1] for p in self.planes))


def _smoothstep(x):
    """Quintic 0->1 ramp with zero first/second derivatives at both ends."""
    x = np.clip(x, 0.0, 1.0)
    s = x**3 * (10 - 15 * x + 6 * x**2)
    ds = 30 * x**2 * (1 - x) ** 2
    dds = 60 * x * (1 - x) * (1 - 2 * x)
    return s, ds, dds


@dataclass
class TrueTrajectory:
    """Analytic C2 trajectory in the world frame.

    Position = minimum-jerk legs between ``waypoints`` ((t, x, y, z) rows; the
    drone holds still before the first and after the last) plus sinusoidal
    ``wiggles`` (axis, amplitude m, frequency Hz, phase rad) faded in/out over
    ``wiggle_window``. Attitude is ZYX Euler: yaw = ``yaw`` + yaw wiggles,
    roll/pitch from their own wiggle lists. All methods accept scalar or array t.
    """

    drone_id: int
    waypoints: np.ndarray
    wiggles: list = field(default_factory=list)
    yaw: float = 0.0
    yaw_wiggles: list = field(default_factory=list)
    roll_wiggles: list = field(default_factory=list)
    pitch_wiggles: list = field(default_factory=list)
    wiggle_window: tuple = (1.0, 1e9)
    ramp: float = 1.0
    t_max: float = float("inf")

    def __post_init__(self):
        self.waypoints = np.atleast_2d(np.asarray(self.waypoints, dtype=float))
        if self.waypoints.shape[1] != 4:
            raise ValueError("waypoints need rows of (t, x, y, z)")
        if np.any(np.diff(self.waypoints[:, 0]) <= 0):
            raise ValueError("waypoint times must increase strictly")

    def _check(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0.0) or np.any(t > self.t_max) or not np.all(np.isfinite(t)):
            raise ValueError(f"time outside trajectory domain [0, {self.t_max}]")
        return t

    def _envelope(self, t):
        t0, t1 = self.wiggle_window
        s_up, ds_up, dds_up = _smoothstep((t - t0) / self.ramp)
        s_dn, ds_dn, dds_dn = _smoothstep((t1 - t) / self.ramp)
        r = self.ramp
        e = s_up * s_dn
        de = ds_up / r * s_dn - s_up * ds_dn / r
        dde = dds_up / r**2 * s_dn - 2 * ds_up * ds_dn / r**2 + s_up * dds_dn / r**2
        return e, de, dde

    def _sines(self, t, terms):
        """Sum of enveloped sines: value, first and second derivatives."""
        f = np.zeros_like(t)
        df = np.zeros_like(t)
        ddf = np.zeros_like(t)
        if not terms:
            return f, df, ddf
        e, de, dde = self._envelope(t)
        for amp, freq, phase in terms:
            w = 2 * math.pi * freq
            s = amp * np.sin(w * t + phase)
            ds = amp * w * np.cos(w * t + phase)
            dds = -amp * w * w * np.sin(w * t + phase)
            f += e * s
            df += de * s + e * ds
            ddf += dde * s + 2 * de * ds + e * dds
        return f, df, ddf

    def _legs(self, t):
        wp = self.waypoints
        p = np.empty(t.shape + (3,))
        v = np.zeros(t.shape + (3,))
        a = np.zeros(t.shape + (3,))
        p[...] = wp[0, 1:]
        for k in range(len(wp) - 1):
            ta, tb = wp[k, 0], wp[k + 1, 0]
            d = wp[k + 1, 1:] - wp[k, 1:]
            T = tb - ta
            s, ds, dds = _smoothstep((t - ta) / T)
            on = t >= ta
            p = np.where(on[..., None], wp[k, 1:] + d * s[..., None], p)
            inside = (on & (t <= tb))[..., None]
            v = np.where(inside, d * (ds / T)[..., None], v)
            a = np.where(inside, d * (dds / T**2)[..., None], a)
        return p, v, a

    def kinematics(self, t):
        """(pos, vel, acc) in the world frame."""
        t = self._check(t)
        p, v, a = self._legs(t)
        for axis, amp, freq, phase in self.wiggles:
            f, df, ddf = self._sines(t, [(amp, freq, phase)])
            p[..., int(axis)] += f
            v[..., int(axis)] += df
            a[..., int(axis)] += ddf
        return p, v, a

    def position(self, t):
        return self.kinematics(t)[0]

    def euler(self, t):
        """(yaw, pitch, roll) and their rates."""
        t = self._check(t)
        yaw, dyaw, _ = self._sines(t, self.yaw_wiggles)
        pitch, dpitch, _ = self._sines(t, self.pitch_wiggles)
        roll, droll, _ = self._sines(t, self.roll_wiggles)
        return (yaw + self.yaw, pitch, roll), (dyaw, dpitch, droll)

    def rotation(self, t):
        (psi, theta, phi), _ = self.euler(t)
        cps, sps = np.cos(psi), np.sin(psi)
        cth, sth = np.cos(theta), np.sin(theta)
        cph, sph = np.cos(phi), np.sin(phi)
        R = np.empty(np.shape(psi) + (3, 3))
        R[..., 0, 0] = cps * cth
        R[..., 0, 1] = cps * sth * sph - sps * cph
        R[..., 0, 2] = cps * sth * cph + sps * sph
        R[..., 1, 0] = sps * cth
        R[..., 1, 1] = sps * sth * sph + cps * cph
        R[..., 1, 2] = sps * sth * cph - cps * sph
        R[..., 2, 0] = -sth
        R[..., 2, 1] = cth * sph
        R[..., 2, 2] = cth * cph
        return R

    def omega_body(self, t):
        (psi, theta, phi), (dpsi, dtheta, dphi) = self.euler(t)
        return np.stack(
            [
                dphi - dpsi * np.sin(theta),
                dtheta * np.cos(phi) + dpsi * np.sin(phi) * np.cos(theta),
                -dtheta * np.sin(phi) + dpsi * np.cos(phi) * np.cos(theta),
            ],
            axis=-1,
        )

    def pose_in_own_frame(self, t):
        """(R, p) expressed in this drone's global frame G (its pose at t = 0)."""
        R0 = self.rotation(0.0)
        p0 = self.position(0.0)
        return R0.T @ self.rotation(t), (self.position(t) - p0) @ R0


def true_extrinsic(traj_i: TrueTrajectory, traj_j: TrueTrajectory):
    """Ground-truth ^{G_i}T_{G_j} as (R, p)."""
    Ri, pi = traj_i.rotation(0.0), traj_i.position(0.0)
    Rj, pj = traj_j.rotation(0.0), traj_j.position(0.0)
    return Ri.T @ Rj, Ri.T @ (pj - pi)


@dataclass(frozen=True)
class SensorModel:
    fov: str = "spin"  # "spin" (360 deg horizontal) or "pyramid"
    h_deg: float = 360.0
    v_min_deg: float = -7.0
    v_max_deg: float = 52.0
    max_range: float = 40.0
    min_range: float = 0.3
    points_per_scan: int = 4000
    scan_period: float = 0.1
    range_noise_sigma: float = 0.02
    imu_rate: float = 200.0
    gyro_noise: float = 0.002  # rad/s, per-sample std
    accel_noise: float = 0.02  # m/s^2, per-sample std
    gyro_bias_walk: float = 1e-5  # rad/s per sqrt(s)
    accel_bias_walk: float = 1e-4  # m/s^2 per sqrt(s)

    def __post_init__(self):
        if self.fov not in ("spin", "pyramid"):
            raise ValueError(f"unknown fov kind {self.fov!r}")
        if self.scan_period <= 0:
            raise ValueError("scan_period must be positive")
        if self.imu_rate < 10.0 / self.scan_period:
            raise ValueError("imu_rate must be at least 10x the scan rate")

    @classmethod
    def mid360(cls, **kw) -> SensorModel:
        return cls(**{"fov": "spin", "h_deg": 360.0, "v_min_deg": -7.0, "v_max_deg": 52.0, **kw})

    @classmethod
    def avia(cls, **kw) -> SensorModel:
        base = {"fov": "pyramid", "h_deg": 70.4, "v_min_deg": -38.6, "v_max_deg": 38.6,
                "points_per_scan": 2000}
        return cls(**{**base, **kw})

    def sample_directions(self, n: int, rng) -> np.ndarray:
        if self.fov == "spin":
            az = rng.uniform(0.0, 2 * math.pi, n)
            s = rng.uniform(math.sin(math.radians(self.v_min_deg)),
                            math.sin(math.radians(self.v_max_deg)), n)
            c = np.sqrt(1.0 - s * s)
        else:
            half = math.radians(self.h_deg) / 2
            az = rng.uniform(-half, half, n)
            el = rng.uniform(math.radians(self.v_min_deg), math.radians(self.v_max_deg), n)
            s, c = np.sin(el), np.cos(el)
        return np.stack([c * np.cos(az), c * np.sin(az), s], axis=1)

    def in_fov(self, d_body: np.ndarray) -> np.ndarray:
        d = np.atleast_2d(d_body)
        d = d / np.linalg.norm(d, axis=1, keepdims=True)
        el = np.degrees(np.arcsin(np.clip(d[:, 2], -1, 1)))
        ok = (el >= self.v_min_deg) & (el <= self.v_max_deg)
        if self.fov == "pyramid":
            az = np.degrees(np.arctan2(d[:, 1], d[:, 0]))
            ok &= np.abs(az) <= self.h_deg / 2
        return ok


@dataclass(frozen=True)
class ImuSample:
    gyro: np.ndarray
    accel: np.ndarray
    timestamp: float


def synth_imu(traj, t, bias_g, bias_a, gravity_world=GRAVITY_WORLD, model=None, rng=None):
    """Body rates and specific force at time(s) t.

    Returns an ImuSample for scalar t, or (gyro, accel) arrays of shape (n, 3)
    for array t. Noise is added only when both ``model`` and ``rng`` are given.
    """
    scalar = np.ndim(t) == 0
    tt = np.atleast_1d(np.asarray(t, dtype=float))
    _, _, acc = traj.kinematics(tt)
    R = traj.rotation(tt)
    gyro = traj.omega_body(tt) + np.asarray(bias_g, dtype=float)
    accel = np.einsum("nji,nj->ni", R, acc - np.asarray(gravity_world)) + np.asarray(bias_a, dtype=float)
    if model is not None and rng is not None:
        gyro = gyro + rng.normal(0.0, model.gyro_noise, gyro.shape)
        accel = accel + rng.normal(0.0, model.accel_noise, accel.shape)
    if scalar:
        return ImuSample(gyro[0], accel[0], float(tt[0]))
    return gyro, accel


@dataclass
class LidarScan:
    """Points in the body frame at their own sample times.

    ``t_offset`` is measured from the scan start (scan_end_time - period).
    ``hit_id`` is simulation ground truth: plane index, MARKER_HIT_BASE + drone
    id, or DECOY_HIT_BASE + decoy index.
    """

    points: np.ndarray
    reflectivity: np.ndarray
    t_offset: np.ndarray
    scan_end_time: float
    drone_id: int
    period: float = 0.1
    hit_id: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, mask) -> LidarScan:
        return LidarScan(
            self.points[mask],
            self.reflectivity[mask],
            self.t_offset[mask],
            self.scan_end_time,
            self.drone_id,
            self.period,
            None if self.hit_id is None else self.hit_id[mask],
        )


def _ray_spheres(o, d, centers, radius, min_range):
    """Nearest entry distance per ray for k spheres; centers (n, k, 3) or (k, 3)."""
    oc = o[:, None, :] - centers
    b = np.einsum("nj,nkj->nk", d, oc)
    cc = np.einsum("nkj,nkj->nk", oc, oc) - radius * radius
    disc = b * b - cc
    with np.errstate(invalid="ignore"):
        t = -b - np.sqrt(disc)
    t = np.where((disc >= 0) & (t > min_range), t, np.inf)
    return t


# rays are binned by azimuth and tested only against rectangles that can lie in their sector
_SECTORS = 24


def _cast_planes(world: WorldModel, o: np.ndarray, d: np.ndarray, model: SensorModel):
    """Nearest rectangle hit per ray: (range or inf, plane index or NO_HIT)."""
    n = len(d)
    t_best = np.full(n, np.inf)
    k_best = np.full(n, NO_HIT)
    C, N, U, V, half, _ = world.plane_arrays
    if not len(C):
        return t_best, k_best
    o_mid = o.mean(axis=0)
    spread = np.linalg.norm(o - o_mid, axis=1).max()
    rel = C - o_mid
    dist = np.linalg.norm(rel, axis=1)
    rad = np.linalg.norm(half, axis=1)
    # out of range for the whole scan, or the back face of a solid
    keep = (dist - rad < model.max_range + spread) & ~(world.one_sided & ((rel * N).sum(axis=1) > spread))
    # half-angle of the cone from o_mid that holds every ray able to reach the bounding sphere
    with np.errstate(divide="ignore", invalid="ignore"):
        cone = (np.arcsin(np.clip(rad / (dist - spread), 0, 1))
                + np.arcsin(np.clip(spread / dist, 0, 1)))
    cone = np.where(dist - spread > rad, cone, np.pi)
    # its azimuth half-width widens with elevation and covers everything near the zenith
    cos_el = np.hypot(rel[:, 0], rel[:, 1]) / np.maximum(dist, 1e-12)
    with np.errstate(divide="ignore", invalid="ignore"):
        az_half = np.arcsin(np.clip(np.sin(cone) / cos_el, 0, 1))
    az_half = np.where((cone < np.pi / 2) & (np.sin(cone) < cos_el), az_half, np.pi) + 1e-9
    az_p = np.arctan2(rel[:, 1], rel[:, 0])

    width = 2 * np.pi / _SECTORS
    sector = np.minimum(((np.arctan2(d[:, 1], d[:, 0]) + np.pi) // width).astype(int), _SECTORS - 1)
    NC, CU, CV = (N * C).sum(axis=1), (C * U).sum(axis=1), (C * V).sum(axis=1)
    for s_ in np.unique(sector):
        rays = np.flatnonzero(sector == s_)
        mid = -np.pi + (s_ + 0.5) * width
        off = np.abs((az_p - mid + np.pi) % (2 * np.pi) - np.pi)
        ks = np.flatnonzero(keep & (off <= az_half + width / 2))
        if not len(ks):
            continue
        os_, ds = o[rays], d[rays]
        denom = ds @ N[ks].T
        with np.errstate(divide="ignore", invalid="ignore"):
            tp = (NC[ks][None, :] - os_ @ N[ks].T) / denom
            ok = (np.abs(denom) > 1e-12) & (tp > model.min_range) & (tp < model.max_range)
            # in-plane coordinates of the hit point, (o + t d - C) . U and . V
            hu = os_ @ U[ks].T - CU[ks][None, :] + tp * (ds @ U[ks].T)
            hv = os_ @ V[ks].T - CV[ks][None, :] + tp * (ds @ V[ks].T)
        ok &= (np.abs(hu) <= half[ks, 0][None, :]) & (np.abs(hv) <= half[ks, 1][None, :])
        tp = np.where(ok, tp, np.inf)
        j = np.argmin(tp, axis=1)
        tj = tp[np.arange(len(rays)), j]
        hitm = np.isfinite(tj)
        t_best[rays[hitm]] = tj[hitm]
        k_best[rays[hitm]] = ks[j[hitm]]
    return t_best, k_best


def synth_scan(world: WorldModel, trajs, self_id: int, window, model: SensorModel, rng) -> LidarScan:
    trajs = trajs if isinstance(trajs, dict) else {tr.drone_id: tr for tr in trajs}
    if self_id not in trajs:
        raise KeyError(f"no trajectory for drone {self_id}")
    t0, t1 = window
    if abs((t1 - t0) - model.scan_period) > 1e-9:
        raise ValueError("scan window must span exactly one scan period")
    n = model.points_per_scan
    offs = np.sort(np.floor(rng.uniform(0.0, model.scan_period, n) / POINT_TICK) * POINT_TICK)
    # trajectories are evaluated once per distinct timestamp
    ut, inv = np.unique(offs, return_inverse=True)
    times = t0 + ut
    d_body = model.sample_directions(n, rng)
    me = trajs[self_id]
    R = me.rotation(times)[inv]
    o = me.position(times)[inv]
    d = np.einsum("nij,nj->ni", R, d_body)

    best = np.full(n, np.inf)
    hit = np.full(n, NO_HIT)
    normal = np.zeros((n, 3))

    refl = world.plane_arrays[5]
    tk, kk = _cast_planes(world, o, d, model)
    better = tk < best
    best[better] = tk[better]
    hit[better] = kk[better]
    normal[better] = world.plane_arrays[1][kk[better]]

    r_m = world.drone_marker_radius
    others = [j for j in sorted(trajs) if j != self_id]
    if others:
        centers = np.stack([trajs[j].position(times) for j in others], axis=1)[inv]
        ts = _ray_spheres(o, d, centers, r_m, model.min_range)
        ts = np.where(ts < model.max_range, ts, np.inf)
        k = np.argmin(ts, axis=1)
        tk = ts[np.arange(n), k]
        better = tk < best
        best[better] = tk[better]
        hit[better] = MARKER_HIT_BASE + np.asarray(others)[k[better]]
        hp = o[better] + tk[better, None] * d[better]
        normal[better] = (hp - centers[better, k[better]]) / r_m
    for q, sph in enumerate(world.decoys):
        ts = _ray_spheres(o, d, np.asarray(sph.center)[None], sph.radius, model.min_range)[:, 0]
        ts = np.where(ts < model.max_range, ts, np.inf)
        better = ts < best
        best[better] = ts[better]
        hit[better] = DECOY_HIT_BASE + q
        hp = o[better] + ts[better, None] * d[better]
        normal[better] = (hp - np.asarray(sph.center)) / sph.radius

    keep = np.isfinite(best)
    hit_k = hit[keep]
    base = np.empty(hit_k.shape)
    is_plane = hit_k < MARKER_HIT_BASE
    base[is_plane] = refl[hit_k[is_plane]] if len(refl) else 0
    is_marker = (hit_k >= MARKER_HIT_BASE) & (hit_k < DECOY_HIT_BASE)
    base[is_marker] = world.marker_reflectivity
    is_decoy = hit_k >= DECOY_HIT_BASE
    if np.any(is_decoy):
        base[is_decoy] = [world.decoys[h - DECOY_HIT_BASE].reflectivity for h in hit_k[is_decoy]]
    if world.incidence_attenuation > 0:
        cos_inc = np.abs(np.einsum("ij,ij->i", normal[keep], d[keep]))
        base = base * (1.0 - world.incidence_attenuation * (1.0 - cos_inc))
    reflectivity = np.clip(np.round(base), 0, 255).astype(np.uint8)

    # truncated at 3 sigma so every return stays within a known band of its surface
    sig = model.range_noise_sigma
    r = best[keep] + np.clip(rng.normal(0.0, sig, int(keep.sum())), -3 * sig, 3 * sig)
    pts = d_body[keep] * r[:, None]
    return LidarScan(pts, reflectivity, offs[keep], float(t1), self_id, model.scan_period, hit_k)


def make_scenario(config):
    """Build (WorldModel, trajectories, per-drone SensorModel) from a ScenarioConfig."""
    from .scenarios import build_scenario

    return build_scenario(config)
