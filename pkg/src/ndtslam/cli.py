"""Command-line interface: `slam run`, `slam simulate`, `slam eval`."""

from __future__ import annotations

import argparse
import sys

from .dataset import load_dataset, read_tum, write_dataset, write_tum
from .metrics import TrajectoryTooShortError, ate, kitti_drift, mean_rpe
from .pipeline import SlamSession, load_config
from .simulate import load_world, simulate


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.no_loop_closure:
        cfg.use_loop_closure = False
    scans, imu, _gt = load_dataset(args.dataset)
    session = SlamSession(cfg)
    for scan in scans:
        session.process_scan(scan, imu)
    traj = session.finalize()
    write_tum(args.out, traj)
    statuses = session.trajectory_statuses
    print(f"scans = {len(scans)}")
    print(f"keyframes = {len(session.graph.nodes)}")
    print(f"loop_constraints = {session.n_loops_accepted}")
    print(f"degraded_scans = {sum(1 for s in statuses if s != 'ok')}")
    print(f"trajectory = {args.out}")
    if args.diagnostics:
        with open(args.diagnostics, "w", encoding="utf-8") as fh:
            fh.write("\n".join(session.diagnostics + session.loop_log) + "\n")
    return 0


def _cmd_simulate(args) -> int:
    world = load_world(args.world)
    data = simulate(world, seed=args.seed)
    write_dataset(args.out, data.scans, data.imu, data.ground_truth)
    print(f"scans = {len(data.scans)}")
    print(f"imu_samples = {data.imu.shape[0]}")
    print(f"path_length_m = {data.ground_truth.path_length():.9g}")
    print(f"dataset = {args.out}")
    return 0


def _cmd_eval(args) -> int:
    est = read_tum(args.est)
    gt = read_tum(args.gt)
    metric = args.metric
    if metric in ("ate", "all"):
        print(f"ate_m = {ate(est, gt):.9g}")
    if metric in ("rpe", "all"):
        t_rpe, r_rpe = mean_rpe(est, gt)
        print(f"t_rpe_m = {t_rpe:.9g}")
        print(f"r_rpe_deg = {r_rpe:.9g}")
    if metric in ("kitti", "all"):
        try:
            t_pct, r_deg = kitti_drift(est, gt)
            print(f"kitti_translation_percent = {t_pct:.9g}")
            print(f"kitti_rotation_deg_per_100m = {r_deg:.9g}")
        except TrajectoryTooShortError as exc:
            if metric == "kitti":
                print(f"error: {exc}", file=sys.stderr)
                return 2
            print(f"# kitti drift skipped: {exc}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slam", description="2D radar NDT SLAM")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run SLAM over a dataset directory")
    run.add_argument("--config", required=True, help="session config file (key = value)")
    run.add_argument("--dataset", required=True, help="dataset directory")
    run.add_argument("--out", required=True, help="output trajectory (TUM format)")
    run.add_argument("--no-loop-closure", action="store_true", help="disable loop detection")
    run.add_argument(
        "--deterministic",
        action="store_true",
        help="force single-threaded processing (processing is single-threaded "
        "either way; the flag pins the contract for scripts)",
    )
    run.add_argument("--diagnostics", default=None, help="optional per-scan diagnostics file")
    run.set_defaults(func=_cmd_run)

    sim = sub.add_parser("simulate", help="generate a synthetic dataset")
    sim.add_argument("--world", required=True, help="world description file")
    sim.add_argument("--seed", required=True, type=int)
    sim.add_argument("--out", required=True, help="output dataset directory")
    sim.set_defaults(func=_cmd_simulate)

    ev = sub.add_parser("eval", help="evaluate a trajectory against ground truth")
    ev.add_argument("--est", required=True, help="estimated trajectory (TUM)")
    ev.add_argument("--gt", required=True, help="ground truth trajectory (TUM)")
    ev.add_argument("--metric", choices=["ate", "rpe", "kitti", "all"], default="all")
    ev.set_defaults(func=_cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
