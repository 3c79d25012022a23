import json
import math
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subdiff import validation
from subdiff.analysis import LOG_CASE
from subdiff.harness import (
    CSV_COLUMNS, ConfigError, ExperimentConfig, predicted_exponent, rate_fit, read_table, run_experiment,
    validate,
)
from subdiff.pathsim import InfeasibleError

PI = math.pi
INTERVAL = {"kind": "interval", "lengths": [PI]}
DRIFT = {"kind": "drift", "a": 1.0}


def small_config(tmp_path, **kw):
    base = dict(experiment_id="h", domain=INTERVAL, bernstein=DRIFT, t_grid=[1, 2, 3, 4], delta=0.25,
                n_paths=200, out_dir=str(tmp_path), batch_size=50)
    base.update(kw)
    return ExperimentConfig(**base)


def test_zero_paths_rejected_before_simulation(tmp_path):
    cfg = small_config(tmp_path / "out", n_paths=0)
    with pytest.raises(ConfigError):
        run_experiment(cfg)
    assert not (tmp_path / "out").exists()


@pytest.mark.parametrize("kw", [
    {"t_grid": [1, 1, 2]},
    {"t_grid": [1.1, 2.0]},
    {"ot_method": "assignment"},
    {"ot_method": "procrustes"},
    {"mode": "exact"},
    {"T_multipliers": [0.5]},
    {"domain": {"kind": "box", "lengths": [PI, PI]}},
])
def test_invalid_configs(tmp_path, kw):
    with pytest.raises(ConfigError):
        small_config(tmp_path, **kw).validate()


def test_unknown_key_rejected():
    d = small_config("x").to_dict()
    d["n_pathz"] = 3
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(d)


def test_infeasible_rejection(tmp_path):
    cfg = small_config(tmp_path, t_grid=[10, 20, 30, 40], mode="rejection")
    with pytest.raises(InfeasibleError):
        run_experiment(cfg)


def test_identical_csv_bytes(tmp_path):
    a = small_config(tmp_path / "a")
    b = small_config(tmp_path / "b")
    run_experiment(a)
    run_experiment(b)
    ra = (tmp_path / "a" / "h.csv").read_bytes()
    assert ra == (tmp_path / "b" / "h.csv").read_bytes()
    assert ra.decode().splitlines()[0] == ",".join(CSV_COLUMNS)
    aux = json.loads((tmp_path / "a" / "h.aux.json").read_text())
    assert len(aux["rows"]) == 4 and len(aux["rows"][0]["psi2"]) == a.m_psi


def test_resume_matches_uninterrupted(tmp_path):
    cfg = small_config(tmp_path / "full")
    run_experiment(cfg)
    ref = (tmp_path / "full" / "h.csv").read_bytes()
    cache = tmp_path / "full" / "cache" / cfg.config_hash()
    files = sorted(os.listdir(cache))
    assert len(files) == 4
    for name in files[1::2]:  # an interrupted sweep leaves a partial cache
        os.remove(cache / name)
    run_experiment(cfg)
    assert (tmp_path / "full" / "h.csv").read_bytes() == ref
    assert len(os.listdir(cache)) == 4


def test_threads_do_not_change_results(tmp_path):
    a, _ = run_experiment(small_config(tmp_path / "a"), write=False)
    b, _ = run_experiment(small_config(tmp_path / "b"), threads=2, write=False)
    assert a == b


def test_stderr_sqrt_law(tmp_path):
    se = []
    for n in (400, 1600):
        rows, _ = run_experiment(small_config(tmp_path / str(n), n_paths=n, batch_size=400), write=False)
        se.append(np.array([r["stderr"] for r in rows]))
    ratio = se[0] / se[1]  # four times the paths: half the stderr
    assert np.all(np.abs(ratio / 2 - 1) < 0.2), ratio


def test_rejection_and_doob_rows_agree(tmp_path):
    kw = dict(n_paths=2000, batch_size=1000, t_grid=[0.5, 1.0, 1.5, 2.0])
    a, _ = run_experiment(small_config(tmp_path / "a", mode="rejection", **kw), write=False)
    b, _ = run_experiment(small_config(tmp_path / "b", **kw), write=False)
    for ra, rb in zip(a, b):
        assert abs(ra["value"] - rb["value"]) < 3.5 * math.hypot(ra["stderr"], rb["stderr"])


def test_T_multipliers_rows(tmp_path):
    rows, _ = run_experiment(small_config(tmp_path, T_multipliers=[1, 2], n_paths=50), write=False)
    assert [(r["t"], r["T"]) for r in rows][:2] == [(1.0, 1.0), (1.0, 2.0)]
    assert len(rows) == 8


def test_read_table_roundtrip(tmp_path):
    cfg = small_config(tmp_path, n_paths=50)
    rows, _ = run_experiment(cfg)
    back = read_table(tmp_path / "h.csv")
    assert [r["value"] for r in back] == [r["value"] for r in rows]


def test_config_hash_stability():
    a = small_config("x")
    b = ExperimentConfig.from_dict(json.loads(json.dumps(dict(reversed(list(a.to_dict().items()))))))
    b.t_grid = [1.0, 2.0, 3.0, 4.0]
    assert a.config_hash() == b.config_hash()
    assert small_config("elsewhere", experiment_id="other").config_hash() == a.config_hash()
    assert small_config("x", seed=1).config_hash() != a.config_hash()


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.sampled_from([0.1, 0.2, 0.25, 0.3]), st.integers(0, 2**31),
       st.sampled_from(["rejection", "doob_is"]))
def test_config_roundtrip(k, delta, seed, mode):
    cfg = small_config("x", t_grid=[k * delta, 2 * k * delta], delta=delta, seed=seed, mode=mode)
    back = ExperimentConfig.from_json(cfg.to_json())
    assert back == cfg and back.to_json() == cfg.to_json()


def _table(t, v, se):
    return [{"t": a, "T": a, "value": b, "stderr": c} for a, b, c in zip(t, v, se)]


def test_rate_fit_one_over_t():
    rng = np.random.default_rng(0)
    t = np.geomspace(10, 1000, 8)
    v = 3.0 / t * (1 + 0.01 * rng.normal(size=t.size))
    fit = rate_fit(_table(t, v, 0.01 * v), predicted=-1.0)
    assert abs(fit.slope + 1) < 0.02 and fit.verdict == "consistent" and fit.r2 > 0.99


def test_rate_fit_recovers_exponent():
    rng = np.random.default_rng(1)
    t = np.geomspace(25, 256, 6)
    v = 2.0 * t**-0.909 * (1 + 0.03 * rng.normal(size=t.size))
    fit = rate_fit(_table(t, v, 0.03 * v), predicted=predicted_exponent(3, 0.4))
    assert abs(fit.slope + 0.909) <= 2 * fit.slope_stderr
    assert fit.verdict == "consistent"


def test_rate_fit_constant_is_inconsistent():
    t = np.geomspace(10, 1000, 6)
    fit = rate_fit(_table(t, np.full(6, 0.5), np.full(6, 0.005)), predicted=-1.0)
    assert abs(fit.slope) < 1e-9 and fit.verdict == "inconsistent"
    assert rate_fit(_table(t, np.full(6, 0.5), np.full(6, 0.005))).verdict == "inconclusive"


def test_rate_fit_log_case():
    t = np.geomspace(50, 500, 6)
    ok = rate_fit(_table(t, np.log(t) / t, 0.01 * np.log(t) / t), predicted=LOG_CASE)
    assert ok.verdict == "consistent" and abs(ok.slope) < 1e-9
    bad = rate_fit(_table(t, t**-0.5, 0.01 * t**-0.5), predicted=LOG_CASE)
    assert bad.verdict == "inconsistent"


def test_rate_fit_needs_points():
    t = np.array([10.0, 20.0, 40.0, 80.0, 160.0])
    with pytest.raises(ValueError):
        rate_fit(_table(t, 1 / t, 0.01 / t), t_min=30)
    assert rate_fit(_table(t, 1 / t, 0.01 / t), t_min=20).points_used == 4


def test_rate_fit_tolerance_band():
    t = np.geomspace(10, 1000, 6)
    v = t**-0.8
    assert rate_fit(_table(t, v, 1e-4 * v), predicted=-0.909).verdict == "consistent"
    v = t**-0.7
    assert rate_fit(_table(t, v, 1e-4 * v), predicted=-0.909).verdict == "inconsistent"


def test_validate_unknown_suite():
    with pytest.raises(ValueError):
        validate("medium")


def test_validate_report(tmp_path, monkeypatch):
    suites = {"fast": (validation.check_limit_closed_form, validation.check_divergence_grid)}
    monkeypatch.setattr(validation, "SUITES", suites)
    lines = []
    report = validate("fast", out_dir=str(tmp_path), report_path=tmp_path / "r.json", echo=lines.append)
    assert report["passed"] and len(report["checks"]) == 2
    saved = json.loads((tmp_path / "r.json").read_text())
    assert {c["criterion"] for c in saved["checks"]} == {1, 8}
    assert all(line.startswith("[PASS]") for line in lines)
    for c in saved["checks"]:
        assert {"name", "passed", "measured", "tolerance", "runtime"} <= set(c)
