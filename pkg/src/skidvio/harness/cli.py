"""Command line: simulate | estimate | observability | montecarlo.

Every command writes deterministic output for a fixed config and seed.
Failures print a one-line JSON object with an error category to stderr
and exit nonzero.
"""
from __future__ import annotations

import argparse
import json
import sys

from ..errors import SkidvioError
from ..kinematics import KinematicParams
from ..observability import USES_IMU, ParamSet, analyze_motion, classify_motion, infer_motion
from ..simulate import generate_trajectory
from .config import PUBLIC_MODES, load_config, load_observability_config, resolve_profile
from .logio import read_log, write_log
from .montecarlo import run_montecarlo
from .runner import keyframe_csv, run_log, simulate_scenario

EXIT_CODES = {"config-parse": 2, "stream-missing": 3, "solver-diverged": 4, "variant-mismatch": 5}


def _dump(obj, path):
    text = json.dumps(obj, sort_keys=True, indent=1) + "\n"
    if path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", newline="\n") as fh:
            fh.write(text)


def cmd_simulate(args):
    cfg = load_config(args.config)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    data = simulate_scenario(cfg, seed)
    write_log(data.log, args.out)
    return 0


def cmd_estimate(args):
    cfg = load_config(args.config)
    if args.mode:
        cfg = cfg.with_mode(args.mode)
    log = read_log(args.log)
    result = run_log(log, cfg, args.seed)
    _dump(result.to_dict(include_timing=args.timing), args.out)
    if args.csv:
        with open(args.csv, "w", newline="\n") as fh:
            fh.write(keyframe_csv(result))
    if result.diverged:
        _error("solver-diverged", result.message, last_good_keyframe=result.last_good_keyframe)
        return EXIT_CODES["solver-diverged"]
    return 0


def observability_matrix(cfg) -> dict:
    """Report per profile and variant, plus the motion classification of each profile."""
    out = {}
    xi3 = KinematicParams(*cfg.xi_true.as_array()[:3])
    for name in cfg.profiles:
        entry = {"variants": {}}
        for variant in cfg.variants:
            # without correction factors the wheel speeds are taken as already corrected
            xi = xi3 if variant == "mono3" else cfg.xi_true
            profile = resolve_profile(name, xi, cfg.base_dir)
            traj = generate_trajectory(profile, xi, cfg.dt)
            use_imu = USES_IMU[variant]
            motion = infer_motion(traj, xi, cfg.rig, use_imu, cfg.scale, cfg.stride)
            params = ParamSet(variant, xi, cfg.rig.extrinsics_OC, 1.0 if use_imu else cfg.scale)
            rep = analyze_motion(motion, params, tol_ratio=cfg.tol_ratio)
            d = rep.to_dict()
            d["full_rank"] = rep.nullity == 0
            entry["variants"][variant] = d
            if variant == cfg.variants[0]:
                entry["motion_flags"] = sorted(classify_motion(motion))
        out[name] = entry
    return out


def cmd_observability(args):
    cfg = load_observability_config(args.config)
    _dump({"profiles": observability_matrix(cfg), "rank_tolerance": cfg.tol_ratio}, args.out)
    return 0


def cmd_montecarlo(args):
    cfg = load_config(args.config)
    agg = run_montecarlo(cfg, args.runs, args.workers, include_timing=args.timing)
    _dump(agg, args.out)
    if agg["diverged_seeds"]:
        _error("solver-diverged", f"{len(agg['diverged_seeds'])} of {agg['n_runs']} runs diverged",
               diverged_seeds=agg["diverged_seeds"])
        return EXIT_CODES["solver-diverged"]
    return 0


def _error(category, message, **extra):
    sys.stderr.write(json.dumps({"error": category, "message": message, **extra}, sort_keys=True) + "\n")


def build_parser():
    p = argparse.ArgumentParser(prog="skidvio", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write a synthetic measurement log with ground truth")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("estimate", help="run the estimator over a log and write a result file")
    e.add_argument("--log", required=True)
    e.add_argument("--config", required=True)
    e.add_argument("--mode", choices=PUBLIC_MODES)
    e.add_argument("--seed", type=int, help="seed for the initial xi perturbation (default: the log's seed)")
    e.add_argument("--out", required=True)
    e.add_argument("--csv", help="also write per-keyframe states as CSV")
    e.add_argument("--timing", action="store_true", help="include wall-clock timing (not reproducible)")
    e.set_defaults(func=cmd_estimate)

    o = sub.add_parser("observability", help="rank and kernel report per variant and profile")
    o.add_argument("--config", required=True)
    o.add_argument("--out", required=True)
    o.set_defaults(func=cmd_observability)

    m = sub.add_parser("montecarlo", help="online xi against the fixed-xi baseline over many seeds")
    m.add_argument("--config", required=True)
    m.add_argument("--runs", type=int, required=True)
    m.add_argument("--workers", type=int)
    m.add_argument("--out", required=True)
    m.add_argument("--timing", action="store_true", help="include wall-clock timing (not reproducible)")
    m.set_defaults(func=cmd_montecarlo)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SkidvioError as exc:
        _error(exc.category, str(exc), **({"last_good_keyframe": exc.last_good_keyframe}
                                         if getattr(exc, "last_good_keyframe", None) is not None else {}))
        return EXIT_CODES.get(exc.category, 1)
    except ValueError as exc:
        _error("invalid-input", str(exc))
        return 1


if __name__ == "__main__":
    sys.exit(main())
