"""Command line entry point: ``swarmlio run|report|fuzz-wire|dump-msgs``."""

from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

from ..config import ConfigError
from ..swarm_net import WireError, decode, encode, fuzz_decode, message_to_dict, read_capture
from .runner import SCHEMA_VERSION, InvariantViolation, run_scenario

EXIT_CONFIG = 2
EXIT_INVARIANT = 3


def _config_path(arg: str) -> Path:
    """A file path, or the name of a bundled preset (room, wall, corridor, exploration)."""
    p = Path(arg)
    if p.exists():
        return p
    preset = resources.files("swarmlio") / "presets" / f"{arg}.toml"
    if preset.is_file():
        return Path(str(preset))
    raise ConfigError(f"{arg}: no such config file or preset")


def _print_summary(s: dict, out=sys.stdout) -> None:
    print(f"scenario={s['scenario']} seed={s['seed']} mode={s['mode']} duration={s['duration']:g}s",
          file=out)
    for d, v in sorted(s["drones"].items(), key=lambda kv: int(kv[0])):
        rmse = "n/a" if v["rmse"] is None else f"{v['rmse']:.4f}"
        upd = v["update_ms"]["mean"]
        upd = "n/a" if upd is None else f"{upd:.1f}"
        print(f"  drone {d}: rmse={rmse} m  update={upd} ms  tx={v['bytes_per_s']:.0f} B/s", file=out)
        for j, e in sorted(v["final_extrinsics"].items()):
            print(f"    extrinsic {d}->{j}: {e['rot_err_deg']:.3f} deg, {e['trans_err_m']:.4f} m", file=out)
    for k, t in s["first_identification"].items():
        print(f"  identified {k} at t={t:.1f}s", file=out)
    for r in s["reacquisitions"]:
        print(f"  reacquired {r['drone']}->{r['teammate']} at t={r['time']:.1f}s "
              f"gap={r['gap_m']:.3f} m after {r['coast_steps']} scans", file=out)
    print(f"  misassignments={s['misassignments']}", file=out)


def _check_summary(s: dict) -> list[str]:
    errs = []
    if s.get("schema_version") != SCHEMA_VERSION:
        errs.append(f"schema_version {s.get('schema_version')!r} != {SCHEMA_VERSION}")
    for d, v in s.get("drones", {}).items():
        if v.get("rmse") is not None and not v["rmse"] >= 0:
            errs.append(f"drone {d}: negative or NaN rmse")
    return errs


def cmd_run(args) -> int:
    try:
        path = _config_path(args.config)
        out = Path(args.out) if args.out else None
        report = run_scenario(path, out, seed=args.seed, duration=args.duration, mode=args.mode,
                              threads=args.threads)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        dump = json.dumps(exc.dump, indent=2)
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            (Path(args.out) / "invariant_dump.json").write_text(dump)
        print(dump, file=sys.stderr)
        return EXIT_INVARIANT
    _print_summary(report.summary)
    errs = _check_summary(report.summary)
    for e in errs:
        print(f"invariant violation: {e}", file=sys.stderr)
    return EXIT_INVARIANT if errs else 0


def cmd_report(args) -> int:
    path = Path(args.rundir) / "summary.json"
    try:
        s = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        print(f"{path}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    errs = _check_summary(s)
    if errs:
        for e in errs:
            print(f"invariant violation: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    _print_summary(s)
    return 0


def cmd_fuzz(args) -> int:
    res = fuzz_decode(args.n, args.seed)
    print(json.dumps(res, sort_keys=True))
    return 0 if res["ok"] + res["error"] == args.n else 1


def cmd_dump(args) -> int:
    try:
        records = read_capture(args.capture)
    except (OSError, ValueError) as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    bad = 0
    for k, rec in enumerate(records):
        data = rec["bytes"]
        head = (f"#{k} {rec['from']}->{rec['to']} sent={rec['send_time']:.3f} "
                f"arrived={rec['arrival_time']:.3f} len={len(data)}")
        try:
            msg = decode(data)
            same = encode(msg) == data
        except WireError as exc:
            print(f"{head} DECODE ERROR {exc}")
            bad += 1
            continue
        if not same:
            bad += 1
        print(f"{head} roundtrip={'ok' if same else 'MISMATCH'}")
        print(f"  {json.dumps(message_to_dict(msg), sort_keys=True)}")
        if args.hex:
            for off in range(0, len(data), 16):
                chunk = data[off : off + 16]
                print(f"  {off:04x}  {chunk.hex(' ')}")
    print(f"{len(records)} records, {bad} failed")
    return EXIT_INVARIANT if bad else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="swarmlio", description="Simulated swarm LiDAR-inertial odometry")
    sub = ap.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run a scenario config (file path or preset name)")
    r.add_argument("config")
    r.add_argument("--seed", type=int)
    r.add_argument("--duration", type=float)
    r.add_argument("--out", help="directory for CSV/JSON outputs")
    r.add_argument("--mode", choices=["swarm", "solo"])
    r.add_argument("--threads", type=int, help="0 for the single-threaded loop, N for N workers")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="print and check a run directory's summary")
    rep.add_argument("rundir")
    rep.set_defaults(func=cmd_report)

    f = sub.add_parser("fuzz-wire", help="fuzz the wire decoder")
    f.add_argument("--n", type=int, default=1_000_000)
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(func=cmd_fuzz)

    d = sub.add_parser("dump-msgs", help="decode, hex-dump and round-trip a message capture")
    d.add_argument("capture")
    d.add_argument("--hex", action="store_true", help="print raw bytes")
    d.set_defaults(func=cmd_dump)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", None) is not None and args.threads < 0:
        print("--threads must be >= 0", file=sys.stderr)
        return EXIT_CONFIG
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
