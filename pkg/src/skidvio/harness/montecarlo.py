"""Parallel Monte Carlo runs: online-xi estimator against a fixed-xi baseline on shared data."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from ..errors import SkidvioError
from .config import ScenarioConfig
from .runner import initial_xi, run_log, simulate_scenario

BASELINE_MODE = "vio_fixed_xi"
XI_NAMES = ("X_v", "Y_l", "Y_r", "alpha_l", "alpha_r")


def run_seed(cfg: ScenarioConfig, seed: int, modes) -> dict:
    """Simulate once, then run every mode from the same initial xi."""
    data = simulate_scenario(cfg, seed)
    xi0 = initial_xi(cfg, seed, data.log)
    out = {"seed": int(seed), "xi_initial": [float(x) for x in xi0], "runs": {}}
    for mode in modes:
        try:
            res = run_log(data.log, cfg.with_mode(mode), seed, xi0)
            out["runs"][mode] = {"diverged": res.diverged, "last_good_keyframe": res.last_good_keyframe,
                                 "message": res.message, "metrics": res.metrics,
                                 "seconds": res.timing.get("seconds", 0.0)}
        except SkidvioError as exc:
            out["runs"][mode] = {"diverged": True, "last_good_keyframe": None, "message": str(exc), "metrics": {},
                                 "seconds": 0.0}
    return out


def _mean_std(values):
    a = np.asarray(values, dtype=float)
    if a.size == 0:
        return {"mean": None, "std": None}
    return {"mean": a.mean(axis=0).tolist(), "std": a.std(axis=0).tolist()}


def aggregate(per_seed, mode: str, baseline: str = BASELINE_MODE) -> dict:
    """Per-mode statistics over the seeds where that mode converged.

    In the comparison a diverged baseline run counts as the online mode doing
    better; the RMSE ratio uses only seeds where both modes converged.
    """
    modes = [mode] + ([baseline] if baseline and baseline != mode else [])
    failed = {m: [r["seed"] for r in per_seed if r["runs"].get(m, {}).get("diverged", True)] for m in modes}
    diverged = sorted({s for seeds in failed.values() for s in seeds})
    out = {"n_runs": len(per_seed), "n_ok": len(per_seed) - len(diverged), "diverged_seeds": diverged, "modes": {}}
    for m in modes:
        mets = [r["runs"][m]["metrics"] for r in per_seed if r["seed"] not in failed[m]]
        entry = {
            "n_ok": len(mets),
            "diverged_seeds": failed[m],
            "translation_rmse": _mean_std([x["ate"]["translation_rmse"] for x in mets]),
            "rotation_rmse_deg": _mean_std([x["ate"]["rotation_rmse_deg"] for x in mets]),
            "final_drift": _mean_std([x["final_drift"]["norm"] for x in mets]),
        }
        if mets and "xi_error_second_half" in mets[0]:
            entry["xi_error_second_half"] = _mean_std([x["xi_error_second_half"] for x in mets])
        out["modes"][m] = entry
    online_ok = [r for r in per_seed if r["seed"] not in failed[mode]]
    if len(modes) == 2 and online_ok:
        both = [r for r in online_ok if r["seed"] not in failed[baseline]]
        better = [r["seed"] in failed[baseline]
                  or r["runs"][mode]["metrics"]["ate"]["translation_rmse"]
                  < r["runs"][baseline]["metrics"]["ate"]["translation_rmse"] for r in online_ok]
        a = np.array([r["runs"][mode]["metrics"]["ate"]["translation_rmse"] for r in both])
        b = np.array([r["runs"][baseline]["metrics"]["ate"]["translation_rmse"] for r in both])
        out["comparison"] = {
            "online_better_fraction": float(np.mean(better)),
            "mean_rmse_ratio": float(b.mean() / a.mean()) if len(both) and a.mean() > 0 else None,
            "seeds_compared": len(online_ok),
            "baseline_diverged": len(online_ok) - len(both),
        }
    return out


def _job(args):
    cfg, seed, modes = args
    return run_seed(cfg, seed, modes)


def run_montecarlo(cfg: ScenarioConfig, n_runs: int, workers: int = None, baseline: str = BASELINE_MODE,
                   include_timing: bool = False) -> dict:
    """Aggregate over n_runs seeds; wall-clock times are left out unless asked for, so output is reproducible."""
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    seeds = list(cfg.seeds[:n_runs])
    seeds += [max(seeds, default=-1) + 1 + i for i in range(n_runs - len(seeds))]
    modes = [cfg.mode] + ([baseline] if baseline and baseline != cfg.mode else [])
    workers = workers or os.cpu_count() or 1
    jobs = [(cfg, s, modes) for s in seeds]
    if workers <= 1 or len(jobs) == 1:
        per_seed = [_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            per_seed = list(pool.map(_job, jobs))
    agg = aggregate(per_seed, cfg.mode, baseline)
    agg["xi_names"] = list(XI_NAMES)
    agg["seeds"] = seeds
    if not include_timing:
        for r in per_seed:
            for run in r["runs"].values():
                run.pop("seconds", None)
    agg["per_seed"] = per_seed
    return agg
