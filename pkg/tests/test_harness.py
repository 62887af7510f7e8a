import json
from dataclasses import replace

import numpy as np
import pytest
import yaml

from skidvio.errors import ConfigError, InsufficientExcitationError, StreamMissingError
from skidvio.harness import metrics
from skidvio.harness.cli import EXIT_CODES, main
from skidvio.harness.config import load_config, scenario_from_dict
from skidvio.harness.logio import dumps_log, loads_log, read_log, write_log
from skidvio.harness.montecarlo import aggregate, run_montecarlo
from skidvio.harness.runner import initial_xi, keyframe_csv, run_log, simulate_scenario
from skidvio.simulate import DEFAULT_XI


def write_yaml(path, data):
    path.write_text(yaml.safe_dump(data))
    return str(path)


@pytest.fixture(scope="module")
def short_log():
    cfg = scenario_from_dict({"profile": "general-motion", "duration": 3.0, "seeds": [4]})
    return simulate_scenario(cfg, 4).log


# ------------------------------------------------------------------ log format
def test_log_round_trip_is_byte_identical(short_log, tmp_path):
    a = tmp_path / "a.log"
    b = tmp_path / "b.log"
    write_log(short_log, str(a))
    write_log(read_log(str(a)), str(b))
    assert a.read_bytes() == b.read_bytes()


def test_log_round_trip_preserves_values(short_log):
    back = loads_log(dumps_log(short_log))
    assert np.array_equal(back.encoders, short_log.encoders)
    assert np.array_equal(back.imu, short_log.imu)
    assert np.array_equal(back.features.uv, short_log.features.uv)
    assert np.array_equal(back.ground_truth, short_log.ground_truth)
    assert back.header["rig"] == short_log.header["rig"]


@pytest.mark.parametrize("mutate, error", [
    (lambda lines: ["XYZ 1 2 3"] + lines, ConfigError),
    (lambda lines: lines[:1] + ["ENC 1 2"] + lines[1:], ConfigError),
    (lambda lines: lines[:1] + ["ENC 1 a 2"] + lines[1:], ConfigError),
    (lambda lines: [line for line in lines if not line.startswith("HDR")], ConfigError),
    (lambda lines: [line for line in lines if not line.startswith("ENC")], StreamMissingError),
    (lambda lines: lines[:1] + [lines[2], lines[1]] + lines[3:], ConfigError),
], ids=["unknown-record", "short-row", "bad-number", "no-header", "no-encoders", "time-order"])
def test_malformed_logs_are_rejected(short_log, mutate, error):
    lines = dumps_log(short_log).splitlines()
    with pytest.raises(error):
        loads_log("\n".join(mutate(lines)))


def test_log_version_is_checked(short_log):
    text = dumps_log(short_log).replace('"format_version":1', '"format_version":99')
    with pytest.raises(ConfigError, match="format_version"):
        loads_log(text)


# ------------------------------------------------------------------ metrics against brute force
def _quat_matrix(q):
    x, y, z, w = q / np.linalg.norm(q)
    return np.array([[1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                     [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                     [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)]])


def brute_force_ate_and_rpe(est_q, est_p, gt_q, gt_p, lengths):
    """Reference on poses that share timestamps: first-pose alignment, loops, explicit matrices."""
    Re = [_quat_matrix(q) for q in est_q]
    Rg = [_quat_matrix(q) for q in gt_q]
    A = Rg[0] @ Re[0].T
    sq_t, sq_r = 0.0, 0.0
    for i in range(len(est_p)):
        d = A @ (est_p[i] - est_p[0]) + gt_p[0] - gt_p[i]
        sq_t += d @ d
        c = np.clip((np.trace(Rg[i].T @ A @ Re[i]) - 1) / 2, -1, 1)
        sq_r += np.arccos(c) ** 2
    n = len(est_p)
    dist = [0.0]
    for i in range(1, n):
        dist.append(dist[-1] + np.linalg.norm(gt_p[i] - gt_p[i - 1]))
    rpe = {}
    for L in lengths:
        errs = []
        for i in range(n):
            j = next((j for j in range(i, n) if dist[j] - dist[i] >= L), None)
            if j is not None:
                e = Re[i].T @ (est_p[j] - est_p[i]) - Rg[i].T @ (gt_p[j] - gt_p[i])
                errs.append(np.linalg.norm((Rg[i].T @ Rg[j]).T @ e))
        rpe[L] = np.mean(errs) if errs else None
    return np.sqrt(sq_t / n), np.degrees(np.sqrt(sq_r / n)), rpe


@pytest.mark.parametrize("seed", range(5))
def test_metrics_match_brute_force_on_toy_trajectories(seed):
    rng = np.random.default_rng(seed)
    t = np.arange(5.0)
    gt_p = np.cumsum(rng.normal(0, 1.0, (5, 3)), axis=0)
    gt_q = rng.normal(size=(5, 4))
    gt_q /= np.linalg.norm(gt_q, axis=1, keepdims=True)
    est_p = gt_p + rng.normal(0, 0.2, (5, 3))
    est_q = gt_q + rng.normal(0, 0.05, (5, 4))
    est_q /= np.linalg.norm(est_q, axis=1, keepdims=True)
    lengths = (0.5, 1.5, 3.0)
    ate_t, ate_r, rpe = brute_force_ate_and_rpe(est_q, est_p, gt_q, gt_p, lengths)
    args = (t, est_q, est_p, t, gt_q, gt_p)
    a = metrics.ate(*args)
    assert a["translation_rmse"] == pytest.approx(ate_t, rel=1e-9, abs=1e-12)
    assert a["rotation_rmse_deg"] == pytest.approx(ate_r, rel=1e-7, abs=1e-9)
    got = metrics.rpe(*args, lengths=lengths)
    for L in lengths:
        if rpe[L] is None:
            assert got[L]["mean"] is None
        else:
            assert got[L]["mean"] == pytest.approx(rpe[L], rel=1e-9, abs=1e-12)


def test_truth_interpolation_is_linear_in_position():
    gt_t = np.array([0.0, 1.0, 2.0])
    gt_p = np.array([[0.0, 0, 0], [1.0, 2, 0], [3.0, 2, 1]])
    gt_q = np.tile([0.0, 0, 0, 1], (3, 1))
    _, p = metrics.interpolate_truth(gt_t, gt_q, gt_p, [0.25, 1.5])
    assert np.allclose(p, [[0.25, 0.5, 0.0], [2.0, 2.0, 0.5]])
    with pytest.raises(ValueError):
        metrics.interpolate_truth(gt_t, gt_q, gt_p, [2.5])


def test_rpe_grows_with_segment_length_on_drifting_estimate():
    # a 2 % scale error accumulates linearly with travelled distance
    t = np.linspace(0.0, 100.0, 401)
    gt_p = np.column_stack([t, 5 * np.sin(0.05 * t), np.zeros_like(t)])
    q = np.tile([0.0, 0, 0, 1], (len(t), 1))
    out = metrics.rpe(t, q, 1.02 * gt_p, t, q, gt_p, lengths=metrics.RPE_LENGTHS_SHORT)
    means = [out[L]["mean"] for L in metrics.RPE_LENGTHS_SHORT]
    assert all(b >= a for a, b in zip(means, means[1:]))


def test_final_drift_components():
    t = np.arange(3.0)
    q = np.tile([0.0, 0, 0, 1], (3, 1))
    gt_p = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
    d = metrics.final_drift(t, q, gt_p + [[0, 0, 0], [0, 0, 0], [0.1, -0.2, 0.0]], t, q, gt_p)
    assert (d["x"], d["y"], d["z"]) == pytest.approx((0.1, -0.2, 0.0))
    assert d["norm"] == pytest.approx(np.hypot(0.1, 0.2))


# ------------------------------------------------------------------ configuration
def test_unknown_key_names_the_field(tmp_path):
    with pytest.raises(ConfigError, match="estimator.window"):
        load_config(write_yaml(tmp_path / "c.yaml", {"estimator": {"window": 3}}))


def test_missing_profile_file_names_the_field(tmp_path):
    with pytest.raises(ConfigError, match="profile"):
        load_config(write_yaml(tmp_path / "c.yaml", {"profile": "no_such_profile.yaml"}))


def test_yaml_syntax_error_reports_position(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("profile: general-motion\nseeds: [1, 2\n")
    with pytest.raises(ConfigError, match=r"c.yaml:\d+:\d+"):
        load_config(str(p))


def test_bad_mode_is_rejected():
    with pytest.raises(ConfigError, match="mode"):
        scenario_from_dict({"mode": "stereo"})


def test_mode_owns_sensor_set():
    cfg = scenario_from_dict({"mode": "vo_icr3", "estimator": {"use_imu": True}})
    assert cfg.estimator.use_imu is False
    assert cfg.estimator.xi_free == (True, True, True, False, False)


def test_profile_file_and_pixel_units(tmp_path):
    prof = write_yaml(tmp_path / "p.yaml", {"name": "square", "segments": [
        {"duration": 2.0, "v_x": 0.5, "omega_z": 0.0}, {"duration": 2.0, "v_x": 0.5, "omega_z": 0.5, "ramp": 0.5}]})
    cfg = load_config(write_yaml(tmp_path / "c.yaml", {"profile": "p.yaml", "noise": {"sigma_pixel_px": 1.2}}))
    assert cfg.motion_profile().name == "square"
    assert cfg.noise.sigma_pixel == pytest.approx(1.2 / 460.0)
    assert prof.endswith("p.yaml")


def test_initial_xi_kinds(short_log):
    base = {"profile": "general-motion"}
    explicit = scenario_from_dict({**base, "xi_initial": "explicit", "xi_initial_value": [0, 0.3, -0.3, 1, 1]})
    assert np.array_equal(initial_xi(explicit, 0), [0, 0.3, -0.3, 1, 1])
    perturbed = scenario_from_dict({**base, "xi_initial_std": 0.0, "xi_initial_offset": [0.01, 0, 0, 0, 0]})
    assert np.allclose(initial_xi(perturbed, 0), DEFAULT_XI.as_array() + [0.01, 0, 0, 0, 0])
    width = scenario_from_dict({**base, "xi_initial": "track-width", "duration": 12.0})
    xi = initial_xi(width, 0, simulate_scenario(width, 0).log)
    assert xi[0] == 0.0 and xi[1] == -xi[2] and xi[3] == xi[4] == 1.0
    clean = replace(width, noise_free=True)
    assert xi[1] == pytest.approx(initial_xi(clean, 0, simulate_scenario(clean, 0).log)[1], rel=0.05)
    # three seconds of near-straight driving do not turn the gyro enough
    with pytest.raises(InsufficientExcitationError):
        initial_xi(width, 0, short_log)
    with pytest.raises(ConfigError):
        scenario_from_dict({**base, "xi_initial": "explicit"})


# ------------------------------------------------------------------ end to end
def test_zero_noise_true_xi_fixed_is_consistent():
    cfg = scenario_from_dict({"profile": "general-motion", "duration": 20.0, "noise_free": True,
                              "mode": "vio_fixed_xi", "xi_initial": "explicit",
                              "xi_initial_value": list(DEFAULT_XI.as_array())})
    data = simulate_scenario(cfg, 0)
    res = run_log(data.log, cfg)
    assert not res.diverged
    assert res.metrics["ate"]["translation_rmse"] < 1e-5


def test_estimate_needs_imu_for_vio_modes(short_log):
    log = loads_log(dumps_log(short_log))
    log.imu = None
    with pytest.raises(StreamMissingError):
        run_log(log, scenario_from_dict({"mode": "vio_xi5"}))


def test_keyframe_csv_layout(short_log):
    res = run_log(short_log, scenario_from_dict({"mode": "vo_icr3", "duration": 3.0}))
    rows = keyframe_csv(res).strip().splitlines()
    assert rows[0].split(",")[:8] == ["t", "qx", "qy", "qz", "qw", "px", "py", "pz"]
    assert len(rows) == len(res.keyframes) + 1
    assert all(len(r.split(",")) == 18 for r in rows)


def test_montecarlo_single_zero_noise_run_has_no_calibration_error():
    cfg = scenario_from_dict({"profile": "general-motion", "duration": 15.0, "noise_free": True,
                              "mode": "vio_xi5", "xi_initial": "explicit",
                              "xi_initial_value": list(DEFAULT_XI.as_array())})
    agg = run_montecarlo(cfg, 1, workers=1)
    assert agg["n_ok"] == 1
    err = np.array(agg["modes"]["vio_xi5"]["xi_error_second_half"]["mean"])
    assert np.abs(err).max() < 1e-4


def _seed_record(seed, online_rmse, fixed_rmse):
    def run(rmse):
        if rmse is None:
            return {"diverged": True, "metrics": {}}
        return {"diverged": False, "metrics": {"ate": {"translation_rmse": rmse, "rotation_rmse_deg": 0.0},
                                               "final_drift": {"norm": rmse}}}
    return {"seed": seed, "runs": {"vio_xi5": run(online_rmse), "vio_fixed_xi": run(fixed_rmse)}}


def test_aggregate_keeps_online_runs_when_the_baseline_diverges():
    per_seed = [_seed_record(0, 1.0, 3.0), _seed_record(1, 2.0, 1.0), _seed_record(2, 1.0, None),
                _seed_record(3, None, 2.0)]
    agg = aggregate(per_seed, "vio_xi5")
    assert agg["diverged_seeds"] == [2, 3]
    assert agg["modes"]["vio_xi5"]["n_ok"] == 3
    assert agg["modes"]["vio_xi5"]["translation_rmse"]["mean"] == pytest.approx(4.0 / 3.0)
    assert agg["modes"]["vio_fixed_xi"]["diverged_seeds"] == [2]
    cmp = agg["comparison"]
    assert cmp["seeds_compared"] == 3 and cmp["baseline_diverged"] == 1
    assert cmp["online_better_fraction"] == pytest.approx(2.0 / 3.0)
    assert cmp["mean_rmse_ratio"] == pytest.approx(2.0 / 1.5)


def test_long_drive_profile_frame_bookkeeping():
    cfg = scenario_from_dict({"profile": "long-205m"})
    data = simulate_scenario(cfg, 0)
    duration = cfg.motion_profile().duration
    frames = np.unique(data.log.features.frame_t)
    assert len(frames) == int(np.floor(duration * cfg.camera_rate + 1e-9)) + 1
    assert data.trajectory.path_length() == pytest.approx(205.4, abs=0.1)
    assert data.log.header["landmark_count"] == int(round(3.0 * data.trajectory.path_length()))


# ------------------------------------------------------------------ command line
@pytest.fixture(scope="module")
def cli_files(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    scen = write_yaml(d / "scenario.yaml", {"profile": "general-motion", "duration": 4.0, "seeds": [2],
                                           "mode": "vio_xi5"})
    obs = write_yaml(d / "obs.yaml", {"profiles": ["general-motion", "straight-line", "constant-circle"],
                                      "stride": 20})
    return d, scen, obs


def _run(argv):
    return main([str(a) for a in argv])


def test_cli_simulate_is_byte_reproducible(cli_files):
    d, scen, _ = cli_files
    assert _run(["simulate", "--config", scen, "--out", d / "a.log"]) == 0
    assert _run(["simulate", "--config", scen, "--out", d / "b.log"]) == 0
    assert (d / "a.log").read_bytes() == (d / "b.log").read_bytes()


def test_cli_estimate_is_byte_reproducible(cli_files):
    d, scen, _ = cli_files
    _run(["simulate", "--config", scen, "--out", d / "e.log"])
    for name in ("r1", "r2"):
        assert _run(["estimate", "--log", d / "e.log", "--config", scen, "--out", d / f"{name}.json",
                     "--csv", d / f"{name}.csv"]) == 0
    assert (d / "r1.json").read_bytes() == (d / "r2.json").read_bytes()
    assert (d / "r1.csv").read_bytes() == (d / "r2.csv").read_bytes()
    out = json.loads((d / "r1.json").read_text())
    assert out["mode"] == "vio_xi5"
    assert {"ate", "final_drift", "rpe"} <= set(out["metrics"])
    assert out["metrics"]["ate"]["alignment"] == "first-pose"


def test_cli_observability_verdicts(cli_files):
    d, _, obs = cli_files
    assert _run(["observability", "--config", obs, "--out", d / "o1.json"]) == 0
    assert _run(["observability", "--config", obs, "--out", d / "o2.json"]) == 0
    assert (d / "o1.json").read_bytes() == (d / "o2.json").read_bytes()
    rep = json.loads((d / "o1.json").read_text())["profiles"]
    assert rep["general-motion"]["variants"]["vio5"]["full_rank"] is True
    assert {"zero-omega", "proportional-wheels"} <= set(rep["straight-line"]["motion_flags"])
    assert "all-constant" in rep["constant-circle"]["motion_flags"]


def test_cli_montecarlo_is_byte_reproducible(cli_files):
    d, scen, _ = cli_files
    for name in ("m1", "m2"):
        assert _run(["montecarlo", "--config", scen, "--runs", 1, "--workers", 1, "--out", d / f"{name}.json"]) == 0
    assert (d / "m1.json").read_bytes() == (d / "m2.json").read_bytes()
    agg = json.loads((d / "m1.json").read_text())
    assert set(agg["modes"]) == {"vio_xi5", "vio_fixed_xi"}


def test_cli_config_error_exit_code(cli_files, capsys):
    d, _, _ = cli_files
    bad = write_yaml(d / "bad.yaml", {"profile": "missing.yaml"})
    assert _run(["simulate", "--config", bad, "--out", d / "x.log"]) == EXIT_CODES["config-parse"]
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "config-parse"
    assert "profile" in err["message"]


def test_cli_stream_missing_exit_code(cli_files, capsys):
    d, scen, _ = cli_files
    _run(["simulate", "--config", scen, "--out", d / "s.log"])
    text = "\n".join(line for line in (d / "s.log").read_text().splitlines() if not line.startswith("IMU"))
    (d / "noimu.log").write_text(text + "\n")
    code = _run(["estimate", "--log", d / "noimu.log", "--config", scen, "--out", d / "x.json"])
    assert code == EXIT_CODES["stream-missing"]
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "stream-missing"
