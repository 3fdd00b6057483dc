"""Per-drone error-state iterated Kalman filter over the swarm state.

Rotations use right perturbations, R = R_hat Exp(dtheta), for the ego
attitude and for every teammate extrinsic ^{G_i}R_{G_j}. Only the ego block
has coupled dynamics; extrinsic blocks are random walks, so prediction touches
the 18x18 ego block and the ego/extrinsic cross terms only.
"""

from __future__ import annotations

import math
from collections import Counter, deque
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.spatial import cKDTree

from .config import FilterParams
from .ident import ExtrinsicEstimate
from .manifold import (
    EGO_DIM,
    EXT_DIM,
    SwarmState,
    boxminus,
    boxplus,
    ext_slice,
    orthonormalize,
    skew,
    so3_exp,
    so3_exp_batch,
)
from .sensor_sim import ImuSample, LidarScan


class UndistortionUnavailable(RuntimeError):
    pass


def voxel_keys(points: np.ndarray, leaf: float) -> np.ndarray:
    """Integer voxel coordinates packed into one int64 (21 bits per axis)."""
    v = np.floor(points / leaf).astype(np.int64) + (1 << 20)
    return (v[:, 0] << 42) | (v[:, 1] << 21) | v[:, 2]


def voxel_downsample(points: np.ndarray, leaf: float) -> np.ndarray:
    """First point (in input order) of every occupied voxel."""
    if len(points) == 0:
        return points
    _, first = np.unique(voxel_keys(points, leaf), return_index=True)
    return points[np.sort(first)]


class VoxelMap:
    """Voxel-deduplicated point store with 5-NN queries.

    One point is kept per leaf-sized voxel. Points live in a large k-d tree
    that is rebuilt only when the not-yet-indexed tail grows past a fraction
    of it; the tail has its own small tree. Queries merge both.
    """

    def __init__(self, leaf: float = 0.2, rebuild_ratio: float = 0.25):
        self.leaf = leaf
        self.rebuild_ratio = rebuild_ratio
        self._keys: set[int] = set()
        self._pts = np.zeros((1024, 3))
        self._n = 0
        self._n_main = 0
        self._main: cKDTree | None = None
        self._tail: cKDTree | None = None

    def __len__(self) -> int:
        return self._n

    @property
    def points(self) -> np.ndarray:
        return self._pts[: self._n]

    def insert(self, points_world: np.ndarray) -> int:
        pts = np.asarray(points_world, dtype=float).reshape(-1, 3)
        if len(pts) == 0:
            return 0
        keys = voxel_keys(pts, self.leaf)
        uk, first = np.unique(keys, return_index=True)
        order = np.argsort(first)
        new = [(int(k), i) for k, i in zip(uk[order], first[order]) if int(k) not in self._keys]
        if not new:
            return 0
        self._keys.update(k for k, _ in new)
        add = pts[[i for _, i in new]]
        while self._n + len(add) > len(self._pts):
            self._pts = np.vstack([self._pts, np.zeros_like(self._pts)])
        self._pts[self._n : self._n + len(add)] = add
        self._n += len(add)
        tail = self._n - self._n_main
        if self._main is None or tail > self.rebuild_ratio * self._n_main:
            self._main = cKDTree(self._pts[: self._n].copy())
            self._n_main = self._n
            self._tail = None
        else:
            self._tail = cKDTree(self._pts[self._n_main : self._n].copy())
        return len(add)

    def knn(self, q: np.ndarray, k: int = 5):
        """(distances, neighbor points) of shape (n, k) and (n, k, 3)."""
        q = np.atleast_2d(q)
        if self._n < k:
            return np.full((len(q), k), np.inf), np.zeros((len(q), k, 3))
        d, i = self._main.query(q, k=k)
        d, i = d.reshape(len(q), k), i.reshape(len(q), k)
        if self._tail is not None:
            kt = min(k, self._n - self._n_main)
            dt, it = self._tail.query(q, k=kt)
            dt, it = dt.reshape(len(q), kt), it.reshape(len(q), kt) + self._n_main
            d = np.concatenate([d, dt], axis=1)
            i = np.concatenate([i, it], axis=1)
            sel = np.argsort(d, axis=1, kind="stable")[:, :k]
            d = np.take_along_axis(d, sel, 1)
            i = np.take_along_axis(i, sel, 1)
        return d, self._pts[i]


# --- residual models (pure functions, shared with the Jacobian tests) ---------


def point_plane_terms(R, p, pts_body, normals, plane_pts):
    """Residuals u^T (R p_b + p - q) with Jacobian rows w.r.t. (dtheta, dp)."""
    world = pts_body @ R.T + p
    z = np.einsum("ij,ij->i", normals, world - plane_pts)
    Ru = normals @ R  # rows R^T u
    J_th = np.cross(pts_body, Ru)
    return z, J_th, normals.copy()


@dataclass(frozen=True)
class ActiveObservation:
    """Own LiDAR detection of teammate j (body frame, scan end) plus j's reported position."""

    teammate_id: int
    pos_body: np.ndarray
    teammate_pos: np.ndarray  # ^{G_j}p_{b_j} at the same instant


@dataclass(frozen=True)
class PassiveObservation:
    """Teammate j's detection of this drone, with j's pose at detection time.

    ``self_offset`` moves this drone's current position back to the
    detection time: p_then = p_now + self_offset.
    """

    teammate_id: int
    pos_body: np.ndarray  # ^{b_j}p_{b_i}
    sender_rot: np.ndarray
    sender_pos: np.ndarray
    self_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))


def active_obs_terms(x: SwarmState, obs: ActiveObservation):
    """z = R_i^T (R_e p_j + t_e - p_i) - m, and its Jacobian over the full error state."""
    k = x.ext_index(obs.teammate_id)
    e = x.extrinsics[k]
    R, p = x.ego_rot, x.ego_pos
    q = e.rot @ obs.teammate_pos + e.pos
    w = R.T @ (q - p)
    z = w - obs.pos_body
    J = np.zeros((3, x.dim))
    J[:, 0:3] = skew(w)
    J[:, 3:6] = -R.T
    s = ext_slice(k).start
    J[:, s : s + 3] = -R.T @ e.rot @ skew(obs.teammate_pos)
    J[:, s + 3 : s + 6] = R.T
    return z, J


def passive_obs_terms(x: SwarmState, obs: PassiveObservation):
    """z = R_j^T (R_e^T (p_i - t_e) - p_j) - m, and its Jacobian."""
    k = x.ext_index(obs.teammate_id)
    e = x.extrinsics[k]
    Rj, pj = obs.sender_rot, obs.sender_pos
    w = e.rot.T @ (x.ego_pos + obs.self_offset - e.pos)
    z = Rj.T @ (w - pj) - obs.pos_body
    J = np.zeros((3, x.dim))
    A = Rj.T @ e.rot.T
    J[:, 3:6] = A
    s = ext_slice(k).start
    J[:, s : s + 3] = Rj.T @ skew(w)
    J[:, s + 3 : s + 6] = -A
    return z, J


@dataclass
class ObsResidual:
    kind: str  # "active" or "passive"
    teammate_id: int
    value: np.ndarray
    noise: np.ndarray
    jacobian: np.ndarray = field(repr=False, default=None)


@dataclass
class PointResiduals:
    """Valid point-to-plane residuals of one iterate."""

    value: np.ndarray
    normal: np.ndarray
    point_body: np.ndarray
    plane_point: np.ndarray
    J_theta: np.ndarray
    J_pos: np.ndarray

    def __len__(self) -> int:
        return len(self.value)


@dataclass
class UpdateInfo:
    iterations: int = 0
    converged: bool = False
    n_point: int = 0
    n_active: int = 0
    n_passive: int = 0
    regularized: bool = False
    skipped: bool = False


@dataclass
class _LogEntry:
    t: float
    R: np.ndarray
    p: np.ndarray
    v: np.ndarray
    omega: np.ndarray  # bias-corrected body rate applied after t
    acc: np.ndarray  # world acceleration applied after t


class FilterInstance:
    """One drone's ESIKF: state, covariance, map and IMU pose log."""

    def __init__(self, teammate_ids=(), params: FilterParams | None = None, gravity=None,
                 t0: float = 0.0):
        self.params = params or FilterParams()
        pr = self.params
        self.state = SwarmState.for_swarm(teammate_ids)
        if gravity is not None:
            self.state.gravity = np.asarray(gravity, dtype=float).copy()
        n = self.state.dim
        self.cov = np.eye(n)
        self.cov[:EGO_DIM, :EGO_DIM] = np.diag(np.repeat(
            [pr.init_rot_sigma, pr.init_pos_sigma, pr.init_vel_sigma, pr.init_bg_sigma,
             pr.init_ba_sigma, pr.init_g_sigma], 3) ** 2)
        self.map = VoxelMap(pr.map_leaf)
        self.last_update_time = t0
        self.time = t0
        self._last_input: tuple[np.ndarray, np.ndarray] | None = None
        # one second at up to 400 Hz: covers undistortion and passive delay compensation
        self.log: deque[_LogEntry] = deque(maxlen=400)
        self.warnings: Counter = Counter()
        self.last_info = UpdateInfo()
        self._log_now()

    # --- prediction -------------------------------------------------------

    def _log_now(self, omega=np.zeros(3), acc=np.zeros(3)):
        x = self.state
        self.log.append(_LogEntry(self.time, x.ego_rot.copy(), x.ego_pos.copy(),
                                  x.ego_vel.copy(), omega, acc))

    def _initialized_blocks(self) -> list[int]:
        return [k for k, e in enumerate(self.state.extrinsics) if e.initialized]

    def predict(self, imu: ImuSample, dt: float) -> None:
        """Propagate mean and covariance over dt with the IMU sample held constant."""
        if not 0 < dt <= 0.1:
            raise ValueError(f"predict needs 0 < dt <= 0.1, got {dt}")
        gyro, acc = np.asarray(imu.gyro, float), np.asarray(imu.accel, float)
        if not (np.all(np.isfinite(gyro)) and np.all(np.isfinite(acc))):
            self.warnings["nonfinite_imu"] += 1
            if self._last_input is None:
                gyro, acc = np.zeros(3), -self.state.gravity
            else:
                gyro, acc = self._last_input
        self._last_input = (gyro, acc)
        x, pr = self.state, self.params
        w = gyro - x.bias_gyro
        a_b = acc - x.bias_acc
        R = x.ego_rot
        a_w = R @ a_b + x.gravity
        # the log entry at the start of the interval carries the input applied over it
        last = self.log[-1]
        last.omega, last.acc = w, a_w

        Exp_w = so3_exp(w * dt)
        F = np.eye(EGO_DIM)
        F[0:3, 0:3] = Exp_w.T
        F[0:3, 9:12] = -np.eye(3) * dt
        F[3:6, 6:9] = np.eye(3) * dt
        F[6:9, 0:3] = -R @ skew(a_b) * dt
        F[6:9, 12:15] = -R * dt
        F[6:9, 15:18] = np.eye(3) * dt
        q = np.zeros(EGO_DIM)
        q[0:3] = (pr.gyro_noise * dt) ** 2
        q[6:9] = (pr.accel_noise * dt) ** 2
        q[9:12] = pr.gyro_bias_walk**2 * dt
        q[12:15] = pr.accel_bias_walk**2 * dt

        P = self.cov
        E = slice(0, EGO_DIM)
        P[E, E] = F @ P[E, E] @ F.T + np.diag(q)
        if P.shape[0] > EGO_DIM:
            X = slice(EGO_DIM, P.shape[0])
            P[E, X] = F @ P[E, X]
            P[X, E] = P[E, X].T
            qx = np.tile(np.repeat([pr.ext_rot_walk**2, pr.ext_pos_walk**2], 3), len(x.extrinsics))
            P[X, X] += np.diag(qx * dt)

        x.ego_rot = R @ Exp_w
        # exact for an input held over dt; Euler would lose a_w dt^2 / 2 per step
        x.ego_pos = x.ego_pos + x.ego_vel * dt + 0.5 * a_w * dt * dt
        x.ego_vel = x.ego_vel + a_w * dt
        self.time += dt
        self._log_now(w, a_w)

    # --- pose log ---------------------------------------------------------

    def pose_at(self, times):
        """IMU-propagated (R, p) at the given times, from the pose log."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        log = self.log
        lt = np.fromiter((e.t for e in log), float, len(log))
        if len(times) and (times.min() < lt[0] - 1e-9 or times.max() > lt[-1] + 1e-9):
            raise UndistortionUnavailable("requested time outside the pose log")
        k = np.clip(np.searchsorted(lt, times, side="right") - 1, 0, len(lt) - 1)
        dtk = times - lt[k]
        # a scan touches a few dozen entries; stack only those
        uk, inv = np.unique(k, return_inverse=True)
        used = [log[i] for i in uk]
        Rs = np.stack([e.R for e in used])[inv]
        ps = np.stack([e.p for e in used])[inv]
        vs = np.stack([e.v for e in used])[inv]
        ws = np.stack([e.omega for e in used])[inv]
        acs = np.stack([e.acc for e in used])[inv]
        R = Rs @ so3_exp_batch(ws * dtk[:, None])
        p = ps + vs * dtk[:, None] + 0.5 * acs * (dtk**2)[:, None]
        return R, p

    def position_offset(self, t_past: float) -> np.ndarray | None:
        """p(t_past) - p(now) along the logged trajectory, or None if not covered."""
        try:
            _, p = self.pose_at([t_past])
        except UndistortionUnavailable:
            return None
        return p[0] - self.state.ego_pos

    def undistort_scan(self, scan: LidarScan) -> np.ndarray:
        """Points moved into the body frame at scan end."""
        if len(scan) == 0:
            return np.zeros((0, 3))
        t_start = scan.scan_end_time - scan.period
        lt = np.fromiter((e.t for e in self.log), float, len(self.log))
        inside = lt[(lt >= t_start - 1e-9) & (lt <= scan.scan_end_time + 1e-9)]
        edges = np.concatenate([[t_start], inside, [scan.scan_end_time]])
        if lt[0] > t_start + 1e-9 or np.max(np.diff(edges)) > 0.05:
            raise UndistortionUnavailable("IMU log does not cover the scan window")
        ut, inv = np.unique(scan.t_offset, return_inverse=True)
        R, p = self.pose_at(t_start + ut)
        R, p = R[inv], p[inv]
        Re, pe = self.pose_at([scan.scan_end_time])
        world = np.einsum("nij,nj->ni", R, scan.points) + p
        return (world - pe[0]) @ Re[0]

    # --- residuals --------------------------------------------------------

    def find_planes(self, pts_body: np.ndarray, x: SwarmState):
        """Fit a plane to the 5 nearest map points of each projected point.

        Returns (valid mask, unit normals, plane points) for every input point.
        """
        pr = self.params
        n = len(pts_body)
        normals = np.zeros((n, 3))
        centers = np.zeros((n, 3))
        if n == 0 or len(self.map) < 5:
            return np.zeros(n, bool), normals, centers
        world = pts_body @ x.ego_rot.T + x.ego_pos
        d, nb = self.map.knn(world, 5)
        ok = d[:, -1] <= pr.max_neighbor_dist
        c = nb.mean(axis=1)
        D = nb - c[:, None, :]
        C = np.einsum("nki,nkj->nij", D, D)
        lam, vec = np.linalg.eigh(C)
        u = vec[:, :, 0]
        rms = np.sqrt(np.maximum(lam[:, 0], 0.0) / 5.0)
        worst = np.abs(np.einsum("nkj,nj->nk", D, u)).max(axis=1)
        ok &= (rms < pr.plane_tol) & (worst < 2 * pr.plane_tol)
        # a plane needs spread in two directions, not a line of points
        ok &= lam[:, 1] > 1e-4
        normals[ok], centers[ok] = u[ok], c[ok]
        return ok, normals, centers

    def point_plane_residuals(self, pts_body, x: SwarmState | None = None, planes=None) -> PointResiduals:
        x = x or self.state
        pts_body = np.asarray(pts_body, dtype=float).reshape(-1, 3)
        ok, normals, centers = planes if planes is not None else self.find_planes(pts_body, x)
        pb, u, c = pts_body[ok], normals[ok], centers[ok]
        z, Jt, Jp = point_plane_terms(x.ego_rot, x.ego_pos, pb, u, c)
        keep = np.abs(z) < self.params.residual_gate
        return PointResiduals(z[keep], u[keep], pb[keep], c[keep], Jt[keep], Jp[keep])

    def mutual_obs_residuals(self, active=(), passive=(), x: SwarmState | None = None):
        x = x or self.state
        sig2 = np.eye(3) * self.params.obs_sigma**2
        out = []
        for kind, items, fn in (("active", active, active_obs_terms),
                                ("passive", passive, passive_obs_terms)):
            for ob in items:
                try:
                    e = x.extrinsic(ob.teammate_id)
                except KeyError:
                    self.warnings["unknown_teammate"] += 1
                    continue
                if not e.initialized:
                    continue
                z, J = fn(x, ob)
                out.append(ObsResidual(kind, ob.teammate_id, z, sig2, J))
        return out

    # --- update -----------------------------------------------------------

    def _active_index(self) -> np.ndarray:
        idx = list(range(EGO_DIM))
        for k in self._initialized_blocks():
            s = ext_slice(k)
            idx.extend(range(s.start, s.stop))
        return np.array(idx)

    def _gate_obs(self, obs: list[ObsResidual], idx, P_A):
        kept = []
        for r in obs:
            J = r.jacobian[:, idx]
            S = J @ P_A @ J.T + r.noise
            m2 = float(r.value @ np.linalg.solve(S, r.value))
            if m2 <= self.params.obs_chi2_gate:
                kept.append(r)
            else:
                self.warnings[f"{r.kind}_gated"] += 1
        return kept

    def iterated_update(self, pts_body=None, active=(), passive=()) -> UpdateInfo:
        """Iterated MAP update over ego and initialized extrinsic blocks."""
        pr = self.params
        info = UpdateInfo()
        pts = np.zeros((0, 3)) if pts_body is None else np.asarray(pts_body, float).reshape(-1, 3)
        if len(pts) > pr.max_residuals:
            sel = np.linspace(0, len(pts) - 1, pr.max_residuals).round().astype(int)
            pts = pts[sel]
        prior = self.state.copy()
        idx = self._active_index()
        P_A = self.cov[np.ix_(idx, idx)]
        try:
            Pinv = cho_solve(cho_factor(P_A), np.eye(len(idx)))
        except np.linalg.LinAlgError:
            Pinv = np.linalg.pinv(P_A)
            info.regularized = True
        pos = {int(v): k for k, v in enumerate(idx)}
        # gate mutual observations once, against the prior
        obs0 = self._gate_obs(self.mutual_obs_residuals(active, passive, prior), idx, P_A)
        keep_active = [a for a in active if any(o.kind == "active" and o.teammate_id == a.teammate_id for o in obs0)]
        keep_passive = [p for p in passive if any(o.kind == "passive" and o.teammate_id == p.teammate_id for o in obs0)]

        x = prior
        planes, searched_at = None, None
        A = None
        for it in range(pr.max_iter):
            if planes is None or np.linalg.norm(x.ego_pos - searched_at.ego_pos) > 0.1 or \
                    np.linalg.norm(boxminus(x, searched_at)[0:3]) > math.radians(2.0):
                planes = self.find_planes(pts, x)
                searched_at = x
            pres = self.point_plane_residuals(pts, x, planes)
            obs = self.mutual_obs_residuals(keep_active, keep_passive, x)
            if it == 0:
                info.n_point = len(pres)
                info.n_active = sum(o.kind == "active" for o in obs)
                info.n_passive = sum(o.kind == "passive" for o in obs)
                if len(pres) == 0 and not obs:
                    info.skipped = True
                    self.last_info = info
                    return info
            n = len(idx)
            HtH = np.zeros((n, n))
            Htz = np.zeros(n)
            if len(pres):
                J6 = np.hstack([pres.J_theta, pres.J_pos])
                w = 1.0 / pr.point_sigma**2
                HtH[:6, :6] += w * J6.T @ J6
                Htz[:6] += w * J6.T @ pres.value
            for o in obs:
                J = o.jacobian[:, idx]
                Wn = np.linalg.inv(o.noise)
                HtH += J.T @ Wn @ J
                Htz += J.T @ Wn @ o.value
            dx = boxminus(x, prior)[idx]
            A = HtH + Pinv
            b = -Htz - Pinv @ dx
            try:
                delta = cho_solve(cho_factor(A), b)
            except np.linalg.LinAlgError:
                A = A + 1e-9 * np.trace(A) / n * np.eye(n)
                delta = np.linalg.solve(A, b)
                info.regularized = True
            full = np.zeros(x.dim)
            full[idx] = delta
            x = boxplus(x, full)
            info.iterations = it + 1
            if np.linalg.norm(delta) < pr.eps:
                info.converged = True
                break
        x.ego_rot = orthonormalize(x.ego_rot)
        for e in x.extrinsics:
            e.rot = orthonormalize(e.rot)
        P_post = np.linalg.inv(A)
        P_post = 0.5 * (P_post + P_post.T)
        self.cov[np.ix_(idx, idx)] = P_post
        self.state = x
        self.last_update_time = self.time
        # later undistortion and delay compensation follow the corrected pose
        self._rebase_log(prior, x)
        if info.regularized:
            self.warnings["regularized"] += 1
        self.last_info = info
        return info

    def _rebase_log(self, before: SwarmState, after: SwarmState) -> None:
        """Apply the update's rigid correction to the logged poses."""
        dR = after.ego_rot @ before.ego_rot.T
        log = self.log
        Rs = dR @ np.stack([e.R for e in log])
        ps = (np.stack([e.p for e in log]) - before.ego_pos) @ dR.T + after.ego_pos
        vs = np.stack([e.v for e in log]) @ dR.T
        acs = np.stack([e.acc for e in log]) @ dR.T
        for e, R, p, v, a in zip(log, Rs, ps, vs, acs):
            e.R, e.p, e.v, e.acc = R, p, v, a
        last = self.log[-1]
        last.R, last.p, last.v = after.ego_rot.copy(), after.ego_pos.copy(), after.ego_vel.copy()

    # --- map and extrinsics -----------------------------------------------

    def map_update(self, pts_body, x: SwarmState | None = None) -> int:
        x = x or self.state
        pts = np.asarray(pts_body, dtype=float).reshape(-1, 3)
        return self.map.insert(pts @ x.ego_rot.T + x.ego_pos)

    def init_extrinsic(self, teammate_id: int, T: ExtrinsicEstimate, cov0=None, thr: float = 0.1) -> None:
        k = self.state.ext_index(teammate_id)
        e = self.state.extrinsics[k]
        if e.initialized:
            raise ValueError(f"extrinsic for teammate {teammate_id} already initialized")
        pr = self.params
        if cov0 is None:
            scale = max(T.residual_rms / thr, pr.ext_cov_floor)
            cov0 = np.diag([math.radians(pr.ext_init_rot_deg) ** 2] * 3 + [pr.ext_init_pos_var] * 3) * scale
        e.rot, e.pos, e.initialized = orthonormalize(T.rot), np.asarray(T.pos, float).copy(), True
        s = ext_slice(k)
        self.cov[s, :] = 0.0
        self.cov[:, s] = 0.0
        self.cov[s, s] = cov0
