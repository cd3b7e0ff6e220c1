import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sja import cli
from sja.config import PRESETS, ConfigError, ExperimentConfig, preset, sample_seed, splitmix64
from sja.fidelity import FidelityCurve
from sja.io import read_columns
from sja.pipeline import (
    RunAborted,
    average_ensemble,
    emit_csv,
    run_experiment,
    worker_count,
)


def small_rmt(**kw):
    base = dict(name="tiny", model="rmt", N=32, J=0.05, n_samples=3, t_stop=20.0, t_points=21,
                rate_window=(5.0, 20.0), master_seed=7)
    base.update(kw)
    return ExperimentConfig(**base)


# --------------------------------------------------------------------------
# config


def test_presets_are_valid_and_listed():
    assert {"fig2", "fig4a", "fig4b", "fig5a", "fig5b", "fig5c", "fig5d", "fig6"} <= set(PRESETS)
    for name, cfg in PRESETS.items():
        assert cfg.name == name
        assert ExperimentConfig.from_ini(cfg.to_ini()) == cfg
    with pytest.raises(ConfigError):
        preset("fig99")


def test_preset_parameters():
    a = preset("fig4a")
    assert (a.N, a.n_samples, a.J, a.sigma_omega, a.omega0) == (512, 200, 0.02, 0.06, 0.14)
    assert preset("fig4b").J == pytest.approx(4 / 3 * 0.06)
    f5 = preset("fig5a")
    assert (f5.chain, f5.perturbation, f5.L, f5.n_states, f5.coupling) == ("ising", "alpha", 12, 100, 0.2)
    f6 = preset("fig6")
    assert (f6.perturbation, f6.g_x, f6.coupling) == ("gamma", 0.3, 0.1)


@settings(max_examples=40, deadline=None)
@given(
    st.integers(2, 4096), st.floats(1e-6, 10, allow_nan=False), st.integers(0, 2 ** 64 - 1),
    st.integers(1, 500), st.floats(1e-4, 1.0), st.sampled_from(["mean_of_logs", "log_of_means"]),
    st.booleans(), st.floats(1e-16, 1e-2),
)
def test_ini_round_trip(N, J, seed, samples, eps, average, flow, stop):
    cfg = ExperimentConfig(N=N, J=J, master_seed=seed, n_samples=samples, eps_E=eps,
                           average=average, flow_solver_check=flow, stop_threshold_rel=stop)
    back = ExperimentConfig.from_ini(cfg.to_ini())
    assert back == cfg
    assert back.digest() == cfg.digest()


def test_config_errors():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_ini("[experiment]\nmodel = rmt\n[bogus]\nx = 1\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_ini("[rmt]\nNN = 3\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_ini("[rmt]\nN = three\n")
    with pytest.raises(ConfigError):
        ExperimentConfig(model="spin", n_samples=2)
    with pytest.raises(ConfigError):
        ExperimentConfig(model="spin", n_samples=1, L=14)
    assert ExperimentConfig(model="spin", n_samples=1, L=14, allow_large_L=True).L == 14
    with pytest.raises(ConfigError):
        ExperimentConfig(t_start=1.0)
    with pytest.raises(ConfigError):
        preset("fig4a").with_overrides({"nonexistent": "1"})
    with pytest.raises(ConfigError):
        ExperimentConfig.load("/nonexistent/path.ini")


def test_overrides_parse_types():
    cfg = preset("fig4a").with_overrides({"n_samples": "5", "J": "0.01", "exact": "false",
                                          "rate_window": "1, 2"})
    assert cfg.n_samples == 5 and cfg.J == 0.01 and cfg.exact is False and cfg.rate_window == (1.0, 2.0)


def test_digest_ignores_output_dir():
    assert small_rmt().digest() == small_rmt(output_dir="elsewhere").digest()
    assert small_rmt().digest() != small_rmt(J=0.06).digest()


def test_seed_stream():
    # sample i is output i of the reference SplitMix64 generator seeded at master
    assert [sample_seed(0, i) for i in range(3)] == [
        0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]
    assert splitmix64(0) == 0
    cfg = small_rmt(n_samples=5)
    seeds = cfg.seeds()
    assert seeds == [sample_seed(7, i) for i in range(5)]
    assert len(set(seeds)) == 5
    assert small_rmt(n_samples=8).seeds()[:5] == seeds


def test_worker_count_from_environment(monkeypatch):
    monkeypatch.delenv("SJA_WORKERS", raising=False)
    assert worker_count() == 1
    monkeypatch.setenv("SJA_WORKERS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("SJA_WORKERS", "zero")
    with pytest.raises(ConfigError):
        worker_count()
    monkeypatch.setenv("SJA_WORKERS", "0")
    with pytest.raises(ConfigError):
        worker_count()


# --------------------------------------------------------------------------
# averaging and csv


def test_average_two_curves():
    t = np.array([0.0, 1.0])
    a = FidelityCurve(t, [0.0, -1.0])
    b = FidelityCurve(t, [0.0, -3.0])
    m = average_ensemble([a, b])
    assert m.values[1] == -2.0
    assert m.stderr[1] == pytest.approx(1.0)
    assert list(m.count) == [2, 2]


def test_average_skips_invalid_points():
    t = np.array([0.0, 1.0, 2.0])
    a = FidelityCurve(t, [0.0, -1.0, -2.0])
    b = FidelityCurve(t, [0.0, -3.0, -np.inf], valid=np.array([True, True, False]))
    m = average_ensemble([a, b])
    assert list(m.count) == [2, 2, 1]
    assert m.values[2] == -2.0 and m.stderr[2] == 0.0
    dead = average_ensemble([FidelityCurve(t, [0.0, -1.0, -np.inf], valid=np.array([True, True, False]))])
    assert not dead.valid[2]


def test_average_log_of_means():
    t = np.array([0.0, 1.0])
    m = average_ensemble([FidelityCurve(t, [0.0, np.log(0.2)]), FidelityCurve(t, [0.0, np.log(0.4)])],
                         mode="log_of_means")
    assert m.values[1] == pytest.approx(np.log(0.3))
    with pytest.raises(ValueError):
        average_ensemble([FidelityCurve(t, [0.0, -1.0])], mode="median")
    with pytest.raises(ValueError):
        average_ensemble([])


def test_emit_csv_format(tmp_path):
    t = np.linspace(0, 1, 3)
    c = FidelityCurve(t, [0.0, -0.5, -1.0], label="exact", stderr=np.array([0.0, 0.1, 0.2]),
                      count=np.array([4, 4, 3]))
    (path,) = emit_csv([c], tmp_path, "run")
    assert path.name == "run_exact.csv"
    lines = path.read_text().splitlines()
    assert lines[0].startswith("#")
    assert lines[1] == "t,mean_logP0,stderr,count,label"
    cols = read_columns(path)
    assert np.allclose(cols["mean_logP0"], c.values)
    assert list(cols["count"]) == [4, 4, 3]
    assert set(cols["label"]) == {"exact"}


def test_emit_csv_empty_list_warns(tmp_path):
    warnings = []
    assert emit_csv([], tmp_path, "run", warnings) == []
    assert warnings and list(tmp_path.iterdir()) == []


# --------------------------------------------------------------------------
# pipeline


def data_files(directory):
    return {p.name: p.read_bytes() for p in sorted(Path(directory).iterdir())
            if not p.name.endswith("_manifest.txt")}


def test_run_is_reproducible_and_worker_independent(tmp_path):
    cfg = small_rmt()
    m1, run = run_experiment(cfg, tmp_path / "a", workers=1)
    run_experiment(cfg, tmp_path / "b", workers=1)
    run_experiment(cfg, tmp_path / "c", workers=2)
    a, b, c = data_files(tmp_path / "a"), data_files(tmp_path / "b"), data_files(tmp_path / "c")
    assert a == b == c
    assert set(run.curves) >= {"exact", "sja", "tdpt", "closed_form"}
    assert len(m1.seeds) == 3 and not m1.failures
    manifest = (tmp_path / "a" / m1.outputs[-1]).read_text()
    assert m1.config_hash in manifest and str(m1.seeds[0]) in manifest
    summary = json.loads(next((tmp_path / "a").glob("*_summary.json")).read_text())
    assert summary["rates"]["gamma_gr"] > 0


def test_run_curves_start_at_zero(tmp_path):
    _, run = run_experiment(small_rmt(), tmp_path, workers=1)
    for label, curve in run.curves.items():
        assert curve.values[0] == pytest.approx(0.0, abs=1e-15), label
        assert np.all(curve.values[curve.valid] <= 1e-12), label


def test_spin_run(tmp_path):
    cfg = ExperimentConfig(name="chain", model="spin", n_samples=1, L=8, n_states=10, window_states=20,
                           t_stop=10.0, t_points=11, closed_form=False)
    _, run = run_experiment(cfg, tmp_path, workers=1)
    assert run.summary["volume"] == 8
    assert any(p.name.endswith("exact_per_site.csv") for p in tmp_path.iterdir())


def test_failing_samples_abort(tmp_path):
    cfg = ExperimentConfig(name="bad", model="spin", n_samples=1, L=4, n_states=7, window_states=7,
                           t_stop=1.0, t_points=3, closed_form=False)
    with pytest.raises(RunAborted):
        run_experiment(cfg, tmp_path, workers=1)


# --------------------------------------------------------------------------
# command line


def test_cli_list_presets(capsys):
    assert cli.main(["list-presets"]) == 0
    out = capsys.readouterr().out
    assert "fig4a" in out and "fig6" in out


def test_cli_print_config(capsys):
    assert cli.main(["preset", "fig4a", "--override", "n_samples=2", "--print-config"]) == 0
    assert ExperimentConfig.from_ini(capsys.readouterr().out).n_samples == 2


def test_cli_exit_codes(tmp_path, capsys):
    good = tmp_path / "good.ini"
    good.write_text(small_rmt(n_samples=1).to_ini())
    assert cli.main(["run", str(good), "--output-dir", str(tmp_path / "out")]) == 0
    assert any((tmp_path / "out").iterdir())

    bad = tmp_path / "bad.ini"
    bad.write_text("[experiment]\nmodel = quantum\n")
    assert cli.main(["run", str(bad)]) == 2
    assert cli.main(["preset", "nope"]) == 2
    assert cli.main(["preset", "fig4a", "--override", "noequals"]) == 2

    failing = tmp_path / "fail.ini"
    failing.write_text(ExperimentConfig(name="bad", model="spin", n_samples=1, L=4, n_states=7,
                                        window_states=7, t_stop=1.0, t_points=3).to_ini())
    assert cli.main(["run", str(failing), "--output-dir", str(tmp_path / "f")]) == 3
    assert "numerical failure" in capsys.readouterr().err


def test_cli_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "sja.cli", "list-presets"], capture_output=True,
                         text=True, check=True)
    assert "fig2" in out.stdout
