"""Teammate detection from reflectivity, Euclidean clustering, and Kalman trackers.

Trackers live in the drone's own global frame G_i with a constant-velocity
state (position, velocity). Temporary trackers follow unidentified reflective
objects; once identification ties one to a teammate it becomes a teammate
tracker, predicted with the teammate's own reported velocity and falling back
on its reported odometry when the LiDAR loses it.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .config import DetectParams
from .ident import TrajWindow
from .sensor_sim import LidarScan

TEMPORARY = "temporary"
TEAMMATE = "teammate"


@dataclass
class Cluster:
    centroid_body: np.ndarray
    extent: np.ndarray
    point_count: int
    indices: np.ndarray = field(repr=False, default=None)
    mean_t_offset: float = 0.0

    def center(self, offset: float = 0.0) -> np.ndarray:
        """Centroid pushed ``offset`` further along the line of sight.

        LiDAR only sees the near half of a sphere, whose surface centroid
        sits short of the true center.
        """
        c = self.centroid_body
        n = np.linalg.norm(c)
        return c if n == 0 or offset == 0 else c * (1.0 + offset / n)


def reflectivity_filter(scan: LidarScan, threshold: int) -> np.ndarray:
    """Points with reflectivity strictly above ``threshold``, in scan order."""
    return scan.points[reflectivity_mask(scan, threshold)]


def reflectivity_mask(scan: LidarScan, threshold: int) -> np.ndarray:
    return scan.reflectivity.astype(int) > int(threshold)


def connected_labels(points: np.ndarray, dist_tol: float, tree: cKDTree | None = None):
    """Component label per point under the 'within dist_tol of a member' relation."""
    n = len(points)
    if n == 0:
        return 0, np.zeros(0, dtype=int)
    tree = tree if tree is not None else cKDTree(points)
    pairs = tree.query_pairs(dist_tol, output_type="ndarray")
    g = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    return connected_components(g, directed=False)


def euclidean_cluster(points, dist_tol: float, min_pts: int = 1, max_pts: int | None = None,
                      t_offset=None) -> list[Cluster]:
    """Connected components in order of their lowest point index."""
    if dist_tol <= 0:
        raise ValueError("dist_tol must be positive")
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    n_comp, labels = connected_labels(P, dist_tol)
    if n_comp == 0:
        return []
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(n_comp + 1))
    groups = [order[bounds[k]:bounds[k + 1]] for k in range(n_comp)]
    groups.sort(key=lambda g: g[0])
    out = []
    for idx in groups:
        if len(idx) < min_pts or (max_pts is not None and len(idx) > max_pts):
            continue
        q = P[idx]
        mt = float(np.mean(t_offset[idx])) if t_offset is not None else 0.0
        out.append(Cluster(q.mean(axis=0), q.max(axis=0) - q.min(axis=0), len(idx), idx, mt))
    return out


def reject_invalid(clusters, size_min, size_max) -> list[Cluster]:
    lo = np.broadcast_to(np.asarray(size_min, dtype=float), (3,))
    hi = np.broadcast_to(np.asarray(size_max, dtype=float), (3,))
    if np.any(lo > hi):
        raise ValueError("size_min must not exceed size_max")
    return [c for c in clusters if np.all(c.extent >= lo) and np.all(c.extent <= hi)]


def _valid_size(c: Cluster, p: DetectParams) -> bool:
    # only the near side of a marker is visible, so require the largest axis to
    # reach size_min rather than every axis (a patch seen head-on is thin in depth)
    return c.extent.max() >= p.size_min and c.extent.max() <= p.size_max


@dataclass
class TouchCounter:
    """Instrumentation: raw points examined by predicted-region re-clustering."""

    touched: int = 0
    in_region: int = 0


class ScanIndex:
    """Body-frame points of one scan with a lazily built k-d tree."""

    def __init__(self, points: np.ndarray, t_offset: np.ndarray | None = None):
        self.points = np.asarray(points, dtype=float)
        self.t_offset = t_offset
        self._tree = None

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.points)
        return self._tree

    def region(self, center, radius) -> np.ndarray:
        if len(self.points) == 0:
            return np.zeros(0, dtype=int)
        return np.asarray(self.tree.query_ball_point(center, radius), dtype=int)


@dataclass
class TrackerState:
    kind: str
    pos_global: np.ndarray
    vel_global: np.ndarray
    cov: np.ndarray
    track_id: int = 0
    teammate_id: int | None = None
    steps_since_update: int = 0
    steps_since_detection: int = 0
    trajectory: TrajWindow = field(default_factory=TrajWindow)
    time: float = 0.0
    last_detection_body: np.ndarray | None = None
    detected: bool = False

    def copy(self) -> TrackerState:
        return TrackerState(
            self.kind, self.pos_global.copy(), self.vel_global.copy(), self.cov.copy(),
            self.track_id, self.teammate_id, self.steps_since_update,
            self.steps_since_detection, self.trajectory.copy(), self.time,
            None if self.last_detection_body is None else self.last_detection_body.copy(),
            self.detected)


def new_tracker(pos, t, params: DetectParams, track_id=0, capacity=100) -> TrackerState:
    cov = np.diag([params.meas_sigma**2] * 3 + [params.init_vel_sigma**2] * 3)
    tr = TrackerState(TEMPORARY, np.array(pos, dtype=float), np.zeros(3), cov, track_id,
                      trajectory=TrajWindow(capacity), time=t)
    tr.trajectory.push(t, tr.pos_global)
    return tr


def _cv_matrices(dt, accel_sigma):
    F = np.eye(6)
    F[:3, 3:] = np.eye(3) * dt
    q = accel_sigma**2
    Q = np.zeros((6, 6))
    Q[:3, :3] = np.eye(3) * q * dt**3 / 3
    Q[:3, 3:] = Q[3:, :3] = np.eye(3) * q * dt**2 / 2
    Q[3:, 3:] = np.eye(3) * q * dt
    return F, Q


def tracker_predict(tr: TrackerState, dt: float, teammate_vel_global=None,
                    odom_available: bool = False, accel_sigma: float = 1.0) -> TrackerState:
    """Constant-velocity prediction; teammate trackers move with the reported velocity.

    ``teammate_vel_global`` must already be rotated into G_i.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    out = tr.copy()
    F, Q = _cv_matrices(dt, accel_sigma)
    if tr.kind == TEAMMATE:
        if teammate_vel_global is not None:
            out.vel_global = np.asarray(teammate_vel_global, dtype=float).copy()
        elif not odom_available:
            raise ValueError("teammate tracker needs a received velocity or odometry fallback")
    out.pos_global = out.pos_global + out.vel_global * dt
    out.cov = F @ out.cov @ F.T + Q
    out.cov = 0.5 * (out.cov + out.cov.T)
    out.time = tr.time + dt
    out.steps_since_update += 1
    out.steps_since_detection += 1
    out.detected = False
    out.last_detection_body = None
    return out


def _kf_position_update(tr: TrackerState, z, sigma):
    H = np.zeros((3, 6))
    H[:, :3] = np.eye(3)
    S = H @ tr.cov @ H.T + np.eye(3) * sigma**2
    K = tr.cov @ H.T @ np.linalg.inv(S)
    x = np.concatenate([tr.pos_global, tr.vel_global])
    x = x + K @ (np.asarray(z) - tr.pos_global)
    I_KH = np.eye(6) - K @ H
    # Joseph form keeps the covariance symmetric positive-definite
    tr.cov = I_KH @ tr.cov @ I_KH.T + K @ K.T * sigma**2
    tr.pos_global, tr.vel_global = x[:3], x[3:]


@dataclass
class UpdateResult:
    tracker: TrackerState | None
    used_cluster: int | None
    source: str  # "cluster", "recluster", "odometry", "coast" or "killed"
    gap: float | None = None  # predicted-vs-detected distance at detection


def _to_scan_end(c: Cluster, R, p, vel_global, period, offset):
    """Global position at scan end of a cluster whose points span the scan."""
    z = R @ c.center(offset) + p
    return z + vel_global * (period - c.mean_t_offset)


def tracker_update(tr: TrackerState, clusters, raw: ScanIndex, self_pose, params: DetectParams,
                   odom_global=None, period: float = 0.1, counter: TouchCounter | None = None,
                   taken=()) -> UpdateResult:
    """Associate, re-cluster, fall back to odometry, or coast; returns a new tracker.

    ``clusters`` are body-frame clusters of high-reflectivity points; indices
    in ``taken`` are already claimed by another tracker this scan.
    """
    R, p = self_pose
    tr = tr.copy()
    gate = params.gate
    if tr.kind == TEAMMATE and tr.steps_since_detection > params.max_coast:
        gate = max(gate, params.reacquire_gate)
    pred = tr.pos_global.copy()

    best, best_key, best_z = None, None, None
    for k, c in enumerate(clusters):
        if k in taken:
            continue
        z = _to_scan_end(c, R, p, tr.vel_global, period, params.center_offset)
        d = np.linalg.norm(z - pred)
        key = (d, -c.point_count)
        if d <= gate and (best_key is None or key < best_key):
            best, best_key, best_z = k, key, z
    source = "cluster"
    used = best
    if best is None:
        q = R.T @ (pred - p)
        idx = raw.region(q, params.region_radius)
        if counter is not None:
            counter.touched += len(idx)
            counter.in_region += len(idx)
        if len(idx) >= params.min_pts:
            toff = raw.t_offset[idx] if raw.t_offset is not None else None
            local = raw.points[idx]
            # a cluster reaching within dist_tol of the boundary may be a clipped
            # piece of a larger surface; one that stays clear of it is complete
            inner = params.region_radius - params.dist_tol
            cands = [c for c in euclidean_cluster(local, params.dist_tol, params.min_pts,
                                                  params.max_pts, toff)
                     if _valid_size(c, params)
                     and np.linalg.norm(local[c.indices] - q, axis=1).max() < inner]
            for c in cands:
                z = _to_scan_end(c, R, p, tr.vel_global, period, params.center_offset)
                d = np.linalg.norm(z - pred)
                key = (d, -c.point_count)
                if d <= gate and (best_key is None or key < best_key):
                    best_key, best_z = key, z
        source = "recluster"
    if best_z is not None:
        gap = float(np.linalg.norm(best_z - pred))
        _kf_position_update(tr, best_z, params.meas_sigma)
        tr.steps_since_update = 0
        tr.steps_since_detection = 0
        tr.detected = True
        # the detection moved to scan end, in the scan-end body frame
        tr.last_detection_body = R.T @ (best_z - p)
        if tr.trajectory.last_time is None or tr.time > tr.trajectory.last_time:
            tr.trajectory.push(tr.time, tr.pos_global)
        return UpdateResult(tr, used, source, gap)
    if tr.kind == TEAMMATE and odom_global is not None:
        _kf_position_update(tr, odom_global, params.odom_sigma)
        tr.steps_since_update = 0
        return UpdateResult(tr, None, "odometry")
    if tr.steps_since_update > params.max_coast:
        return UpdateResult(None, None, "killed")
    return UpdateResult(tr, None, "coast")


@dataclass
class TeammateInfo:
    """What the agent knows about teammate j this scan, already mapped into G_i."""

    vel_global: np.ndarray | None = None
    odom_global: np.ndarray | None = None


@dataclass
class Reacquisition:
    time: float
    teammate_id: int
    gap: float
    coast_steps: int


@dataclass
class DetectionResult:
    active: dict  # teammate id -> body-frame detection at scan end
    clusters: list
    high_mask: np.ndarray
    exclude_mask: np.ndarray
    reacquisitions: list


class TrackerSet:
    """All trackers owned by one drone, stepped once per scan."""

    def __init__(self, params: DetectParams, window: int = 100):
        self.params = params
        self.window = window
        self.trackers: list[TrackerState] = []
        self._ids = itertools.count(1)
        self.counter = TouchCounter()

    def teammate(self, j) -> TrackerState | None:
        for tr in self.trackers:
            if tr.kind == TEAMMATE and tr.teammate_id == j:
                return tr
        return None

    def temporaries(self) -> list[TrackerState]:
        return [tr for tr in self.trackers if tr.kind == TEMPORARY]

    def promote(self, tr: TrackerState, teammate_id: int) -> None:
        if self.teammate(teammate_id) is not None:
            raise ValueError(f"teammate {teammate_id} already has a tracker")
        tr.kind, tr.teammate_id = TEAMMATE, teammate_id

    def adopt(self, teammate_id: int, pos_global, vel_global, t: float) -> TrackerState:
        """Create a teammate tracker directly (e.g. extrinsic found without detection)."""
        p = self.params
        tr = new_tracker(pos_global, t, p, next(self._ids), self.window)
        tr.kind, tr.teammate_id = TEAMMATE, teammate_id
        tr.vel_global = np.asarray(vel_global, dtype=float).copy()
        tr.cov[:3, :3] = np.eye(3) * p.odom_sigma**2
        tr.steps_since_detection = p.max_coast + 1
        self.trackers.append(tr)
        return tr

    def step(self, points_body, reflectivity, t_offset, pose, t: float, dt: float,
             info: dict | None = None, period: float = 0.1) -> DetectionResult:
        p = self.params
        info = info or {}
        R, pos = pose
        pts = np.asarray(points_body, dtype=float)
        high = reflectivity.astype(int) > p.threshold
        hi_idx = np.nonzero(high)[0]
        clusters = euclidean_cluster(pts[hi_idx], p.dist_tol, p.min_pts, p.max_pts,
                                     t_offset[hi_idx] if t_offset is not None else None)
        for c in clusters:
            c.indices = hi_idx[c.indices]
        clusters = [c for c in clusters if _valid_size(c, p)]
        raw = ScanIndex(pts, t_offset)

        taken: set[int] = set()
        kept, active, reacq = [], {}, []
        # teammate trackers claim clusters first
        order = sorted(self.trackers, key=lambda tr: (tr.kind != TEAMMATE, tr.track_id))
        for tr in order:
            ti = info.get(tr.teammate_id) if tr.kind == TEAMMATE else None
            vel = ti.vel_global if ti is not None else None
            odom = ti.odom_global if ti is not None else None
            if dt > 0:
                try:
                    tr = tracker_predict(tr, dt, vel, odom is not None, p.accel_sigma)
                except ValueError:
                    tr = tracker_predict(tr, dt, tr.vel_global, True, p.accel_sigma)
            coast = tr.steps_since_detection
            res = tracker_update(tr, clusters, raw, pose, p, odom, period, self.counter, taken)
            if res.used_cluster is not None:
                taken.add(res.used_cluster)
            if res.tracker is None:
                continue
            nt = res.tracker
            if nt.kind == TEAMMATE and nt.detected:
                active[nt.teammate_id] = nt.last_detection_body
                if coast > p.max_coast and res.gap is not None:
                    reacq.append(Reacquisition(t, nt.teammate_id, res.gap, coast))
            kept.append(nt)
        # temporaries shadowing a teammate tracker are duplicates of it
        mates = [tr.pos_global for tr in kept if tr.kind == TEAMMATE]
        kept = [tr for tr in kept if tr.kind == TEAMMATE or not any(
            np.linalg.norm(tr.pos_global - m) <= p.gate for m in mates)]
        for k, c in enumerate(clusters):
            if k in taken:
                continue
            z = R @ c.center(p.center_offset) + pos
            if any(np.linalg.norm(z - m) <= p.gate for m in mates):
                continue
            kept.append(new_tracker(z, t, p, next(self._ids), self.window))
        self.trackers = sorted(kept, key=lambda tr: tr.track_id)

        # points belonging to teammates never enter the map or the residuals
        exclude = high.copy()
        for tr in self.trackers:
            if tr.kind == TEAMMATE or tr.detected:
                idx = raw.region(R.T @ (tr.pos_global - pos), p.region_radius * 0.5)
                exclude[idx] = True
        return DetectionResult(active, clusters, high, exclude, reacq)
