"""Virtual-time scenario runner.

Each tick of one scan period: IMU samples for the elapsed period are fed to
every agent, every agent polls the bus, then every agent processes its scan.
Messages sent while processing tick k are first visible at tick k + 1, so the
result does not depend on the order agents are stepped in, and the threaded
mode reproduces the single-threaded one exactly.
"""

from __future__ import annotations

import csv
import json
import math
import time as _time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..config import ScenarioConfig, load_config
from ..manifold import so3_log
from ..scenarios import build_scenario, scenario_duration
from ..sensor_sim import true_extrinsic, synth_imu, synth_scan
from ..swarm_net import ChannelModel, MessageBus
from .agent import DroneAgent, ScanResult
from .metrics import compute_extrinsic_error, compute_rmse

SCHEMA_VERSION = 1
# identification counts as wrong when the labelled tracker is this far from the true teammate
MISASSIGN_DIST = 1.0
_ORTHO_TOL = 1e-6


class InvariantViolation(RuntimeError):
    """A runtime check failed; ``dump`` holds the offending agent's state."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass
class RunReport:
    summary: dict
    scans: list = field(default_factory=list)  # per-scan CSV rows
    extrinsics: list = field(default_factory=list)  # per-scan per-pair CSV rows
    timing: list = field(default_factory=list)  # (drone, t, update_ms, total_ms)

    def rmse(self, drone_id: int) -> float:
        return self.summary["drones"][str(drone_id)]["rmse"]


SCAN_FIELDS = ["drone", "t", "est_x", "est_y", "est_z", "est_rx", "est_ry", "est_rz",
               "gt_x", "gt_y", "gt_z", "gt_rx", "gt_ry", "gt_rz", "pos_err",
               "n_point", "n_active", "n_passive", "iterations", "trackers"]
EXT_FIELDS = ["t", "drone", "teammate", "rot_err_deg", "trans_err_m"]


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.6f}"


def _check_agent(agent: DroneAgent, t: float) -> None:
    f = agent.filter
    if f is None:
        return
    x = f.state
    problems = []
    rots = [("ego_rot", x.ego_rot)] + [(f"ext_rot[{e.teammate_id}]", e.rot) for e in x.extrinsics]
    for name, R in rots:
        if not np.all(np.isfinite(R)) or np.abs(R @ R.T - np.eye(3)).max() > _ORTHO_TOL:
            problems.append(f"{name} is not a rotation")
    for name in ("ego_pos", "ego_vel", "bias_gyro", "bias_acc", "gravity"):
        if not np.all(np.isfinite(getattr(x, name))):
            problems.append(f"{name} is not finite")
    P = f.cov
    if not np.all(np.isfinite(P)):
        problems.append("covariance is not finite")
    elif np.diag(P).min() < -1e-9:
        problems.append("covariance has a negative diagonal entry")
    if problems:
        dump = {
            "drone": agent.id,
            "t": t,
            "problems": problems,
            "ego_pos": x.ego_pos.tolist(),
            "ego_rot": x.ego_rot.tolist(),
            "cov_diag": np.diag(P).tolist(),
            "warnings": dict(f.warnings),
        }
        raise InvariantViolation(f"drone {agent.id} at t={t:.3f}: " + "; ".join(problems), dump)


class _DroneSim:
    """Sensor streams of one drone: IMU with drifting biases, and LiDAR."""

    def __init__(self, traj, model, spec, seed_seq):
        s_imu, s_bias, s_scan = seed_seq.spawn(3)
        self.traj, self.model = traj, model
        self.rng_imu = np.random.default_rng(s_imu)
        self.rng_bias = np.random.default_rng(s_bias)
        self.rng_scan = np.random.default_rng(s_scan)
        self.bg = np.asarray(spec.bias_gyro, dtype=float).copy()
        self.ba = np.asarray(spec.bias_acc, dtype=float).copy()
        self.ba_drift = np.asarray(spec.bias_acc_drift, dtype=float)

    def imu(self, times: np.ndarray, dt: float):
        m, n = self.model, len(times)
        sd = math.sqrt(dt)
        bg = self.bg + np.cumsum(self.rng_bias.normal(0, m.gyro_bias_walk * sd, (n, 3)), axis=0)
        ba = self.ba + np.cumsum(self.rng_bias.normal(0, m.accel_bias_walk * sd, (n, 3)), axis=0)
        ba += np.arange(1, n + 1)[:, None] * (dt * self.ba_drift)
        self.bg, self.ba = bg[-1].copy(), ba[-1].copy()
        return synth_imu(self.traj, times, bg, ba, model=m, rng=self.rng_imu)


def _resolve(cfg, seed, duration, mode, threads) -> ScenarioConfig:
    if not isinstance(cfg, ScenarioConfig):
        cfg = load_config(cfg)
    upd = {}
    if seed is not None:
        upd["seed"] = int(seed)
    if duration is not None:
        if duration <= 0:
            raise ValueError("duration must be positive")
        upd["duration"] = float(duration)
    if mode is not None:
        if mode not in ("swarm", "solo"):
            raise ValueError(f"mode must be swarm or solo, not {mode!r}")
        upd["mode"] = mode
    if threads is not None:
        if threads < 0:
            raise ValueError("threads must be >= 0")
        upd["threads"] = int(threads)
    return cfg.model_copy(update=upd) if upd else cfg


def run_scenario(cfg, out_dir=None, *, seed=None, duration=None, mode=None, threads=None,
                 progress=None) -> RunReport:
    """Simulate the configured swarm and score it against ground truth.

    ``cfg`` is a ScenarioConfig or a path to a TOML config. Keyword
    arguments override the config. When ``out_dir`` is given, scans.csv,
    extrinsics.csv, timing.json and summary.json are written there (plus
    capture.jsonl if enabled).
    """
    cfg = _resolve(cfg, seed, duration, mode, threads)
    wall0 = _time.perf_counter()
    world, trajs, sensors, specs = build_scenario(cfg)
    ids = sorted(trajs)
    dur = scenario_duration(cfg)
    period = next(iter(sensors.values())).scan_period
    ss = np.random.SeedSequence([cfg.seed, 0x51])
    streams = dict(zip(ids, ss.spawn(len(ids))))
    sims = {i: _DroneSim(trajs[i], sensors[i], specs[i], streams[i]) for i in ids}
    agents = {
        i: DroneAgent(i, [j for j in ids if j != i], cfg,
                      mutual_obs=cfg.mode == "swarm" and specs[i].mutual_obs,
                      clock_offset=specs[i].clock_offset)
        for i in ids
    }
    ch = cfg.channel
    bus = MessageBus(ids, ChannelModel(ch.drop_prob, ch.delay_mean, ch.delay_jitter, cfg.seed),
                     capture=cfg.output.capture)

    scan_rows, ext_rows, timing = [], [], []
    est = {i: ([], []) for i in ids}
    events, reacqs = [], []
    first_seen = {}
    gt_ext = {(i, j): true_extrinsic(trajs[i], trajs[j]) for i in ids for j in ids if i != j}
    n_ticks = int(math.floor(dur / period + 1e-9))

    def tick_agent(i: int, k: int) -> ScanResult:
        sim, agent = sims[i], agents[i]
        m = sim.model
        per = int(round(m.imu_rate * period))
        idx = (k - 1) * per + np.arange(per)
        ts = idx / m.imu_rate
        gyro, acc = sim.imu(ts, 1.0 / m.imu_rate)
        for q in range(per):
            agent.on_imu(float(ts[q]), gyro[q], acc[q], 1.0 / m.imu_rate)
        t = k * period
        for d in bus.poll(i, t):
            agent.on_message(d.data)
        scan = synth_scan(world, trajs, i, (t - period, t), m, sim.rng_scan)
        res = agent.process_scan(scan)
        _check_agent(agent, t)
        return res

    pool = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 0 else None
    try:
        for k in range(1, n_ticks + 1):
            t = k * period
            if pool is None:
                results = {i: tick_agent(i, k) for i in ids}
            else:
                futs = {i: pool.submit(tick_agent, i, k) for i in ids}
                results = {i: futs[i].result() for i in ids}
            # sends go out after every agent finished the tick, in id order
            for i in ids:
                for data in agents[i].drain():
                    bus.send(i, data, t)
            for i in ids:
                _record(i, results[i], trajs, gt_ext, scan_rows, ext_rows, timing, est, events,
                        reacqs, first_seen)
            if progress is not None:
                progress(t, dur)
    finally:
        if pool is not None:
            pool.shutdown()

    wall = _time.perf_counter() - wall0
    summary = _summarize(cfg, ids, trajs, agents, bus, est, events, reacqs, first_seen, ext_rows,
                         timing, dur, wall, gt_ext)
    report = RunReport(summary, scan_rows, ext_rows, timing)
    if out_dir is not None:
        write_outputs(report, out_dir, bus if cfg.output.capture else None)
    return report


def _record(i, res: ScanResult, trajs, gt_ext, scan_rows, ext_rows, timing, est, events, reacqs,
            first_seen):
    t = res.time
    timing.append((i, t, res.update_ms, res.total_ms))
    if not res.initialized:
        return
    R_gt, p_gt = trajs[i].pose_in_own_frame(t)
    err = float(np.linalg.norm(res.pos - p_gt))
    est[i][0].append(t)
    est[i][1].append(res.pos)
    info = res.info
    scan_rows.append([i, t, *res.pos, *so3_log(res.rot), *p_gt, *so3_log(R_gt), err,
                      info.n_point, info.n_active, info.n_passive, info.iterations, res.trackers])
    for j, (R, p) in sorted(res.extrinsics.items()):
        deg, m = compute_extrinsic_error((R, p), gt_ext[(i, j)])
        ext_rows.append([t, i, j, deg, m])
    for ev in res.events:
        deg, m = compute_extrinsic_error(ev.estimate, gt_ext[(i, ev.teammate_id)])
        rec = {"time": t, "drone": i, "teammate": ev.teammate_id, "method": ev.method,
               "rot_err_deg": deg, "trans_err_m": m}
        if ev.tracker_pos is not None:
            R0, p0 = trajs[i].rotation(0.0), trajs[i].position(0.0)
            true_j = R0.T @ (trajs[ev.teammate_id].position(t) - p0)
            d = float(np.linalg.norm(ev.tracker_pos - true_j))
            rec["tracker_err_m"] = d
            rec["misassigned"] = d > MISASSIGN_DIST
        else:
            rec["misassigned"] = deg > 10.0 or m > MISASSIGN_DIST
        events.append(rec)
        first_seen.setdefault((i, ev.teammate_id), t)
    for r in res.reacquisitions:
        reacqs.append({"time": r.time, "drone": i, "teammate": r.teammate_id, "gap_m": r.gap,
                       "coast_steps": r.coast_steps})


def _stats(v) -> dict:
    if not v:
        return {"mean": None, "p95": None, "max": None}
    a = np.asarray(v, dtype=float)
    return {"mean": float(a.mean()), "p95": float(np.percentile(a, 95)), "max": float(a.max())}


def _summarize(cfg, ids, trajs, agents, bus, est, events, reacqs, first_seen, ext_rows, timing,
               dur, wall, gt_ext):
    drones = {}
    for i in ids:
        ts, ps = est[i]
        a = agents[i]
        f = a.filter
        final_ext = {}
        if f is not None:
            for e in f.state.extrinsics:
                if e.initialized:
                    deg, m = compute_extrinsic_error(e, gt_ext[(i, e.teammate_id)])
                    final_ext[str(e.teammate_id)] = {"rot_err_deg": deg, "trans_err_m": m}
        upd = [u for (d, _, u, _) in timing if d == i]
        tot = [w for (d, _, _, w) in timing if d == i]
        drones[str(i)] = {
            "rmse": compute_rmse(ts, ps, trajs[i]) if ts else None,
            "mutual_obs": a.mutual_obs,
            "scans": len(ts),
            "bytes_per_s": bus.bytes_sent[i] / dur,
            "final_extrinsics": final_ext,
            "update_ms": _stats(upd),
            "scan_ms": _stats(tot),
            "warnings": dict(f.warnings) if f is not None else {},
            "bad_messages": a.bad_messages,
        }
    return {
        "schema_version": SCHEMA_VERSION,
        "scenario": cfg.scenario,
        "seed": cfg.seed,
        "mode": cfg.mode,
        "duration": dur,
        "threads": cfg.threads,
        "drones": drones,
        "identifications": events,
        "first_identification": {f"{i}->{j}": t for (i, j), t in sorted(first_seen.items())},
        "misassignments": sum(bool(e["misassigned"]) for e in events),
        "reacquisitions": reacqs,
        "wall_time_s": wall,
    }


def write_outputs(report: RunReport, out_dir, bus: MessageBus | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "scans.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCAN_FIELDS)
        w.writerows([_fmt(v) for v in row] for row in report.scans)
    with open(out / "extrinsics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EXT_FIELDS)
        w.writerows([_fmt(v) for v in row] for row in report.extrinsics)
    # wall-clock timing varies run to run, so it stays out of the deterministic CSVs
    with open(out / "timing.json", "w") as fh:
        json.dump([{"drone": d, "t": t, "update_ms": u, "scan_ms": s} for d, t, u, s in report.timing], fh)
    with open(out / "summary.json", "w") as fh:
        json.dump(report.summary, fh, indent=2, sort_keys=True)
    if bus is not None:
        bus.write_capture(out / "capture.jsonl")
