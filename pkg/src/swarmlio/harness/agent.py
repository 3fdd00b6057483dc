"""One drone's estimator: detection, identification, ESIKF and messaging."""

from __future__ import annotations

import time as _time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from ..config import ScenarioConfig
from ..detect_track import TEAMMATE, TeammateInfo, TrackerSet
from ..esikf import (
    ActiveObservation,
    FilterInstance,
    PassiveObservation,
    UndistortionUnavailable,
    UpdateInfo,
    voxel_downsample,
)
from ..ident import (
    DegenerateGeometry,
    ExtrinsicEstimate,
    TrajWindow,
    associate_by_time,
    identify,
    traj_excited,
    traj_match,
)
from ..sensor_sim import ImuSample, LidarScan
from ..swarm_net import EgoStateMsg, ObservationMsg, StaleFilter, WireError, decode, encode

_GRAVITY = 9.81
_PAIR_TOL = 1e-6  # same-scan message pairing


@dataclass
class IdentEvent:
    """An extrinsic initialization or tracker labelling made during one scan."""

    time: float
    teammate_id: int
    method: str  # "active" (own tracker matched) or "passive" (teammate's detections of us)
    estimate: ExtrinsicEstimate
    tracker_pos: np.ndarray | None = None


@dataclass
class ScanResult:
    time: float
    rot: np.ndarray
    pos: np.ndarray
    info: UpdateInfo
    initialized: bool
    extrinsics: dict  # teammate id -> (R, p) for initialized blocks
    events: list = field(default_factory=list)
    reacquisitions: list = field(default_factory=list)
    trackers: int = 0
    update_ms: float = 0.0
    total_ms: float = 0.0
    n_points: int = 0


@dataclass
class _EgoRecord:
    t: float
    rot: np.ndarray
    pos: np.ndarray
    vel: np.ndarray


class DroneAgent:
    """Runs the full per-drone pipeline; owns its filter and trackers exclusively.

    Inputs are IMU samples (``on_imu``), delivered bus messages
    (``on_message``) and LiDAR scans (``process_scan``). Outgoing wire
    messages accumulate in ``outbox`` until the runner drains them.
    """

    def __init__(self, drone_id: int, teammate_ids, cfg: ScenarioConfig, mutual_obs: bool = True,
                 clock_offset: float = 0.0):
        self.id = int(drone_id)
        self.teammates = sorted(int(j) for j in teammate_ids)
        self.cfg = cfg
        self.mutual_obs = mutual_obs
        self.clock_offset = clock_offset
        fp, ip = cfg.filter, cfg.ident
        self.filter: FilterInstance | None = None
        self._init_gyro: list[np.ndarray] = []
        self._init_acc: list[np.ndarray] = []
        self._init_scans: list[np.ndarray] = []
        self.trackers = TrackerSet(cfg.detect, ip.window)
        self.own_traj = TrajWindow(ip.window)
        self.ego_hist = {j: deque(maxlen=ip.window) for j in self.teammates}
        self.seen_by = {j: TrajWindow(ip.window) for j in self.teammates}
        self._pending_obs = {j: deque(maxlen=50) for j in self.teammates}
        self._passive_ready = {j: deque(maxlen=50) for j in self.teammates}
        self.stale = StaleFilter()
        self.outbox: list[bytes] = []
        self._seq = 0
        self._last_scan_t: float | None = None
        self.bad_messages = 0
        self._fp = fp

    # --- inputs -----------------------------------------------------------

    def on_imu(self, t: float, gyro, accel, dt: float) -> None:
        """Accumulate for static initialization, then drive prediction."""
        if self.filter is None:
            if t < self._fp.gravity_init_time - 1e-9:
                self._init_gyro.append(np.asarray(gyro, float))
                self._init_acc.append(np.asarray(accel, float))
                return
            self._start_filter(t)
        self.filter.predict(ImuSample(np.asarray(gyro, float), np.asarray(accel, float), t), dt)

    def _start_filter(self, t: float) -> None:
        if not self._init_acc:
            raise RuntimeError("no IMU samples before filter start")
        a0 = np.mean(self._init_acc, axis=0)
        g = -a0 / np.linalg.norm(a0) * _GRAVITY
        f = FilterInstance(self.teammates, self._fp, g, t0=t)
        f.state.bias_gyro = np.mean(self._init_gyro, axis=0)
        # accelerometer bias is not separable from tilt while static; the filter learns it
        for pts in self._init_scans:
            f.map_update(pts)
        self._init_scans.clear()
        self.filter = f

    def on_message(self, data: bytes) -> None:
        try:
            msg = decode(data)
        except WireError:
            self.bad_messages += 1
            return
        j = msg.sender_id
        if j not in self.ego_hist or not self.stale.accept(msg):
            return
        t = msg.timestamp - self.clock_offset
        if isinstance(msg, EgoStateMsg):
            self.ego_hist[j].append(_EgoRecord(t, msg.rot_matrix(), np.array(msg.pos), np.array(msg.vel)))
            self._pair_observations(j)
        elif isinstance(msg, ObservationMsg) and msg.observed_id == self.id:
            self._pending_obs[j].append((t, np.array(msg.pos_body)))
            self._pair_observations(j)

    def _ego_at(self, j: int, t: float) -> _EgoRecord | None:
        for rec in reversed(self.ego_hist[j]):
            if abs(rec.t - t) <= _PAIR_TOL:
                return rec
            if rec.t < t:
                return None
        return None

    def _pair_observations(self, j: int) -> None:
        """Join teammate j's detections of us with j's ego state from the same scan."""
        pend = self._pending_obs[j]
        keep = deque(maxlen=pend.maxlen)
        while pend:
            t, m = pend.popleft()
            rec = self._ego_at(j, t)
            if rec is None:
                keep.append((t, m))
                continue
            if self.seen_by[j].last_time is None or t > self.seen_by[j].last_time:
                self.seen_by[j].push(t, rec.rot @ m + rec.pos)
            self._passive_ready[j].append((t, m, rec))
        self._pending_obs[j] = keep

    # --- scan pipeline ----------------------------------------------------

    def _latest_ego(self, j: int, t: float, max_age: float) -> _EgoRecord | None:
        h = self.ego_hist[j]
        if not h or t - h[-1].t > max_age or h[-1].t > t + _PAIR_TOL:
            return None
        return h[-1]

    def _teammate_info(self, t: float) -> dict:
        x = self.filter.state
        out = {}
        for e in x.extrinsics:
            if not e.initialized:
                continue
            rec = self._latest_ego(e.teammate_id, t, 0.5)
            if rec is None:
                continue
            p_j = rec.pos + rec.vel * (t - rec.t)
            out[e.teammate_id] = TeammateInfo(e.rot @ rec.vel, e.rot @ p_j + e.pos)
        return out

    def _received_windows(self) -> dict:
        out = {}
        for j, h in self.ego_hist.items():
            if len(h) >= 3:
                out[j] = TrajWindow.from_arrays([r.t for r in h], [r.pos for r in h],
                                                self.cfg.ident.window)
        return out

    def _identify(self, t: float) -> list[IdentEvent]:
        ip = self.cfg.ident
        f = self.filter
        labelled = [j for j in self.teammates if self.trackers.teammate(j) is not None]
        temps = self.trackers.temporaries()
        if not temps:
            return []
        events = []
        for hit in identify(temps, self._received_windows(), ip.thr, ip.tol, ip.sigma2_min,
                            ip.min_pairs, skip_ids=labelled):
            self.trackers.promote(hit.tracker, hit.teammate_id)
            if not f.state.extrinsic(hit.teammate_id).initialized:
                f.init_extrinsic(hit.teammate_id, hit.estimate, thr=ip.thr)
            events.append(IdentEvent(t, hit.teammate_id, "active", hit.estimate,
                                     hit.tracker.pos_global.copy()))
        return events

    def _passive_init(self, t: float) -> list[IdentEvent]:
        """Initialize from teammates' detections of this drone matched to our own path."""
        ip = self.cfg.ident
        f = self.filter
        events = []
        for j in self.teammates:
            if f.state.extrinsic(j).initialized or len(self.seen_by[j]) < ip.min_pairs:
                continue
            pairs = associate_by_time(self.own_traj, self.seen_by[j], ip.tol)
            if len(pairs) < ip.min_pairs:
                continue
            own = self.own_traj.positions[[a for a, _ in pairs]]
            ok, s = traj_excited(own, ip.sigma2_min)
            if not ok:
                continue
            try:
                rms, est = traj_match(self.own_traj, self.seen_by[j], ip.tol, pairs)
            except DegenerateGeometry:
                continue
            lever = np.linalg.norm(self.seen_by[j].positions[[b for _, b in pairs]].mean(axis=0))
            if rms < ip.thr and rms * lever / np.sqrt(s[1]) < ip.passive_trans_bound:
                f.init_extrinsic(j, est, thr=ip.thr)
                events.append(IdentEvent(t, j, "passive", est))
        return events

    def _adopt_missing(self, t: float) -> None:
        """Give every initialized teammate a tracker, seeded from its reported state."""
        info = self._teammate_info(t)
        for j, ti in info.items():
            if self.trackers.teammate(j) is None:
                self.trackers.adopt(j, ti.odom_global, ti.vel_global, t)

    def _active_obs(self, detections: dict, t: float) -> list[ActiveObservation]:
        out = []
        x = self.filter.state
        for j, m in sorted(detections.items()):
            if not x.extrinsic(j).initialized:
                continue
            rec = self._latest_ego(j, t, self._fp.passive_max_age)
            if rec is None:
                continue
            # teammate's reported position carried forward to our scan time
            out.append(ActiveObservation(j, np.asarray(m, float), rec.pos + rec.vel * (t - rec.t)))
        return out

    def _passive_obs(self, t: float) -> list[PassiveObservation]:
        out = []
        f = self.filter
        for j in self.teammates:
            ready = self._passive_ready[j]
            fresh = [r for r in ready if 0 <= t - r[0] <= self._fp.passive_max_age]
            ready.clear()
            if not f.state.extrinsic(j).initialized:
                continue
            for tj, m, rec in fresh:
                off = f.position_offset(tj)
                if off is None:
                    continue
                out.append(PassiveObservation(j, m, rec.rot, rec.pos, off))
        return out

    def _next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def _broadcast(self, t: float, R, p, v, detections: dict) -> None:
        stamp = t + self.clock_offset
        self.outbox.append(encode(EgoStateMsg.from_arrays(self.id, self._next_seq(), stamp, R, p, v)))
        for j, m in sorted(detections.items()):
            self.outbox.append(encode(ObservationMsg(self.id, self._next_seq(), stamp, j,
                                                     tuple(float(c) for c in m))))

    def drain(self) -> list[bytes]:
        out, self.outbox = self.outbox, []
        return out

    def process_scan(self, scan: LidarScan) -> ScanResult:
        t = scan.scan_end_time
        t_start = _time.perf_counter()
        dp = self.cfg.detect
        if self.filter is None:
            # static start: scans are taken at the identity pose
            keep = scan.reflectivity.astype(int) <= dp.threshold
            self._init_scans.append(scan.points[keep])
            self._broadcast(t, np.eye(3), np.zeros(3), np.zeros(3), {})
            self._last_scan_t = t
            return ScanResult(t, np.eye(3), np.zeros(3), UpdateInfo(skipped=True), False, {},
                              total_ms=1e3 * (_time.perf_counter() - t_start))
        f = self.filter
        try:
            pts = f.undistort_scan(scan)
        except UndistortionUnavailable:
            f.warnings["undistortion_unavailable"] += 1
            pts = scan.points
        dt = 0.0 if self._last_scan_t is None else t - self._last_scan_t
        self._last_scan_t = t
        events, reacq, detections = [], [], {}
        active, passive = [], []
        if self.mutual_obs:
            pose = (f.state.ego_rot.copy(), f.state.ego_pos.copy())
            det = self.trackers.step(pts, scan.reflectivity, scan.t_offset, pose, t, dt,
                                     self._teammate_info(t), scan.period)
            exclude = det.exclude_mask
            reacq = det.reacquisitions
            detections = det.active
            events += self._identify(t)
            if self.cfg.ident.passive_init:
                events += self._passive_init(t)
            self._adopt_missing(t)
            active = self._active_obs(detections, t)
            passive = self._passive_obs(t)
        else:
            exclude = scan.reflectivity.astype(int) > dp.threshold
        body = pts[~exclude]
        t_upd = _time.perf_counter()
        info = f.iterated_update(voxel_downsample(body, self._fp.scan_leaf), active, passive)
        update_ms = 1e3 * (_time.perf_counter() - t_upd)
        f.map_update(body)
        x = f.state
        if self.own_traj.last_time is None or t > self.own_traj.last_time:
            self.own_traj.push(t, x.ego_pos)
        self._broadcast(t, x.ego_rot, x.ego_pos, x.ego_vel, detections)
        ext = {e.teammate_id: (e.rot.copy(), e.pos.copy()) for e in x.extrinsics if e.initialized}
        return ScanResult(t, x.ego_rot.copy(), x.ego_pos.copy(), info, True, ext, events, reacq,
                          len(self.trackers.trackers), update_ms,
                          1e3 * (_time.perf_counter() - t_start), len(body))
