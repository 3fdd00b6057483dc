import json
import math
from pathlib import Path

import numpy as np
import pytest

from swarmlio.config import ConfigError, load_config, parse_config
from swarmlio.harness import DroneAgent, InvariantViolation, compute_extrinsic_error, compute_rmse
from swarmlio.harness.cli import main
from swarmlio.harness.runner import _check_agent, run_scenario
from swarmlio.manifold import so3_exp
from swarmlio.scenarios import build_scenario
from swarmlio.sensor_sim import TrueTrajectory

ROOT = Path(__file__).resolve().parents[1]
EXAMPLE = ROOT / "configs" / "example.toml"


def orbit():
    return TrueTrajectory(1, [(0.0, 0, 0, 1.0), (5.0, 2, 1, 1.5)], wiggles=[(0, 0.3, 0.2, 0.0)],
                          yaw=0.7, yaw_wiggles=[(0.2, 0.1, 0.0)], t_max=10)


def test_rmse_zero_on_truth():
    gt = orbit()
    t = np.linspace(0, 10, 50)
    assert compute_rmse(t, gt.pose_in_own_frame(t)[1], gt) == 0.0


def test_rmse_constant_offset():
    gt = orbit()
    t = np.linspace(0, 10, 50)
    est = gt.pose_in_own_frame(t)[1] + [0.03, 0, 0.04]
    assert compute_rmse(t, est, gt) == pytest.approx(0.05, abs=1e-12)


def test_rmse_matches_bruteforce():
    rng = np.random.default_rng(0)
    gt = orbit()
    t = np.sort(rng.uniform(0, 10, 200))
    est = gt.pose_in_own_frame(t)[1] + rng.normal(0, 0.1, (200, 3))
    acc = 0.0
    for k in range(len(t)):
        R0, p0 = gt.rotation(0.0), gt.position(0.0)
        ref = R0.T @ (gt.position(t[k]) - p0)
        acc += sum((est[k][i] - ref[i]) ** 2 for i in range(3))
    assert abs(compute_rmse(t, est, gt) - math.sqrt(acc / len(t))) < 1e-12


def test_rmse_callable_and_errors():
    assert compute_rmse([0.0, 1.0], [[1, 0, 0], [1, 0, 0]], lambda t: np.zeros((len(t), 3))) == 1.0
    with pytest.raises(ValueError):
        compute_rmse([], np.zeros((0, 3)), orbit())
    with pytest.raises(ValueError):
        compute_rmse([0.0, 1.0], np.zeros((1, 3)), orbit())


def test_extrinsic_error():
    R, p = so3_exp([0.1, -0.2, 0.3]), np.array([1.0, 2.0, 3.0])
    assert compute_extrinsic_error((R, p), (R, p)) == (0.0, 0.0)
    rz = so3_exp([0, 0, math.radians(5)])
    deg, m = compute_extrinsic_error((R @ rz, p), (R, p))
    assert abs(deg - 5.0) < 1e-9 and m == 0.0
    deg, m = compute_extrinsic_error((R, p + [0, 0.3, 0.4]), (R, p))
    assert deg == pytest.approx(0.0, abs=1e-6) and m == pytest.approx(0.5)


def test_config_unknown_key_names_path():
    with pytest.raises(ConfigError, match=r"filter\.max_itr"):
        parse_config({"filter": {"max_itr": 3}})
    with pytest.raises(ConfigError, match=r"drones\.0\.waypoints"):
        parse_config({"drones": [{"id": 1}]})


def test_config_bad_toml(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("scenario = \n")
    with pytest.raises(ConfigError, match="TOML"):
        load_config(p)


def test_example_config_builds():
    cfg = load_config(EXAMPLE)
    world, trajs, sensors, specs = build_scenario(cfg)
    assert sorted(trajs) == [1, 2] and sensors[2].fov == "pyramid"
    assert len(world.decoys) == 1


def test_duplicate_drone_ids():
    d = {"id": 1, "waypoints": [[0.0, 0, 0, 1]]}
    with pytest.raises(ValueError, match="duplicate"):
        build_scenario(parse_config({"scenario": "custom", "drones": [d, d]}))


def static_agent(cfg=None):
    cfg = cfg or parse_config({})
    a = DroneAgent(1, [2], cfg)
    rng = np.random.default_rng(1)
    bg = np.array([0.01, -0.02, 0.005])
    f0 = np.array([0.2, -0.1, 9.8])
    for k in range(120):
        a.on_imu(k * 0.005, bg + rng.normal(0, 1e-4, 3), f0 + rng.normal(0, 1e-3, 3), 0.005)
    return a, bg, f0


def test_agent_static_initialization():
    a, bg, f0 = static_agent()
    f = a.filter
    assert f is not None and f.time == pytest.approx(0.6)
    np.testing.assert_allclose(f.state.bias_gyro, bg, atol=1e-4)
    g = f.state.gravity
    assert np.linalg.norm(g) == pytest.approx(9.81)
    np.testing.assert_allclose(g / 9.81, -f0 / np.linalg.norm(f0), atol=1e-4)


def test_invariant_check_dumps_state():
    a, _, _ = static_agent()
    _check_agent(a, 0.6)
    a.filter.state.ego_pos[0] = np.nan
    with pytest.raises(InvariantViolation) as ei:
        _check_agent(a, 0.6)
    assert ei.value.dump["drone"] == 1 and "ego_pos is not finite" in ei.value.dump["problems"]


def test_agent_ignores_garbage_and_foreign_messages():
    a, _, _ = static_agent()
    a.on_message(b"not a message")
    assert a.bad_messages == 1


def short_cfg(**kw):
    base = {"scenario": "room", "seed": 3, "duration": 2.0,
            "channel": {"drop_prob": 0.2, "delay_mean": 0.03, "delay_jitter": 0.01}}
    base.update(kw)
    return parse_config(base)


def test_solo_mode_uses_only_point_residuals():
    rep = run_scenario(short_cfg(duration=2.5), mode="solo")
    assert rep.scans
    n_point = [r[15] for r in rep.scans]
    assert all(r[16] == 0 and r[17] == 0 for r in rep.scans)
    assert min(n_point) > 100
    assert rep.summary["identifications"] == []
    assert all(not d["final_extrinsics"] for d in rep.summary["drones"].values())


def read_csvs(d):
    return {n: (Path(d) / n).read_bytes() for n in ("scans.csv", "extrinsics.csv")}


def test_same_seed_same_csvs_and_threads_match(tmp_path):
    run_scenario(short_cfg(), tmp_path / "a")
    run_scenario(short_cfg(), tmp_path / "b")
    run_scenario(short_cfg(), tmp_path / "c", threads=3)
    a = read_csvs(tmp_path / "a")
    assert a == read_csvs(tmp_path / "b") == read_csvs(tmp_path / "c")
    assert len(a["scans.csv"].splitlines()) > 1
    other = run_scenario(short_cfg(), tmp_path / "d", seed=4)
    assert read_csvs(tmp_path / "d") != a
    s = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert s["schema_version"] == 1 and other.summary["seed"] == 4


def test_cli_run_report_dump(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", str(EXAMPLE), "--duration", "1.5", "--out", str(out), "--seed", "5"]) == 0
    assert (out / "capture.jsonl").exists() and (out / "scans.csv").exists()
    assert main(["report", str(out)]) == 0
    assert main(["dump-msgs", str(out / "capture.jsonl"), "--hex"]) == 0
    text = capsys.readouterr().out
    assert "roundtrip=ok" in text and "MISMATCH" not in text and "0000  53 4c 49 4f" in text


def test_cli_errors(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[filter]\nmax_itr = 3\n")
    assert main(["run", str(bad)]) == 2
    assert "filter.max_itr" in capsys.readouterr().err
    assert main(["run", "no-such-preset"]) == 2
    run = tmp_path / "r"
    run.mkdir()
    (run / "summary.json").write_text(json.dumps({"schema_version": 99, "drones": {}}))
    assert main(["report", str(run)]) == 3
    (run / "summary.json").write_text(json.dumps({"schema_version": 1, "drones": {"1": {"rmse": -1}}}))
    assert main(["report", str(run)]) == 3
    cap = tmp_path / "cap.jsonl"
    cap.write_text(json.dumps({"from": 1, "to": 2, "send_time": 0, "arrival_time": 0, "hex": "00ff"}) + "\n")
    assert main(["dump-msgs", str(cap)]) == 3


def test_cli_fuzz_small(capsys):
    assert main(["fuzz-wire", "--n", "3000", "--seed", "2"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["ok"] + res["error"] == 3000
