import csv
import json

import numpy as np
import pytest

from conftest import simulate_trajectory
from ifou.cli import emit_profile_surface, run
from ifou.inference import FitConfig, fit_ifou
from ifou.kernels import ModelParams, TimeGrid
from test_telemetry import whale_like

FAST_FIT = ["--n-beta", "8", "--n-h", "6"]


def _series(path, tr):
    with open(path, "w") as fh:
        fh.write("t,value\n")
        for t, v in zip(tr.grid.times, tr.values):
            fh.write(f"{float(t)!r},{float(v)!r}\n")
    return str(path)


@pytest.fixture(scope="module")
def series(tmp_path_factory):
    tr = simulate_trajectory(ModelParams(1.0, 2.0, 0.6), TimeGrid.regular(40, 0.1), seed=5, mu0=3.0)
    return _series(tmp_path_factory.mktemp("data") / "s.csv", tr)


def _files(d):
    return {p.name: p.read_bytes() for p in d.iterdir() if p.name != "run-manifest.json"}


def test_simulate_figure_setting(tmp_path):
    out = tmp_path / "o"
    argv = "simulate --sigma 1.7320508 --beta 8.1 --hurst 0.25 --mu0 15 --t-max 20 --n 1000 --paths 1 --seed 7".split()
    assert run(argv + ["--output-dir", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "paths.csv")))
    assert len(rows) == 1001 and float(rows[0]["value"]) == 15.0
    assert float(rows[-1]["t"]) == pytest.approx(20.0)
    man = json.load(open(out / "run-manifest.json"))
    assert man["seed"] == 7 and man["command"] == "simulate" and man["files"] == ["paths.csv"]
    assert man["config"]["beta"] == 8.1 and "version" in man


def test_values_round_trip_exactly(tmp_path):
    run("simulate --sigma 1 --beta 2 --hurst 0.4 --t-max 1 --n 7 --seed 1".split() + ["--output-dir", str(tmp_path)])
    text = (tmp_path / "paths.csv").read_text().splitlines()[1:]
    for line in text:
        v = line.split(",")[2]
        assert float(repr(float(v))) == float(v)
        assert repr(float(v)) == v or len(v.replace("-", "").replace(".", "").lstrip("0")) <= 17


def test_cov_surface(tmp_path):
    argv = "cov-surface --sigma 3 --beta 5 --hurst 0.25 --s-max 5 --t-max 5 --step 0.1".split()
    assert run(argv + ["--output-dir", str(tmp_path)]) == 0
    data = np.loadtxt(tmp_path / "cov-surface.csv", delimiter=",", skiprows=1)
    assert data.shape == (51 * 51, 3)
    q = data[:, 2].reshape(51, 51)
    np.testing.assert_allclose(q, q.T, rtol=1e-12)
    assert np.all(q[0] == 0) and np.all(np.diff(np.diag(q)) > 0)


@pytest.mark.parametrize(
    "argv",
    [
        ["simulate", "--sigma", "1"],
        ["nonsense"],
        ["simulate", "--sigma", "1", "--beta", "1", "--hurst", "1.2", "--t-max", "1", "--n", "3"],
        ["cov-surface", "--sigma", "1", "--beta", "1", "--hurst", "0.5", "--s-max", "1", "--t-max", "1", "--step", "0.3"],
        ["fit", "--input", "/nonexistent.csv"],
    ],
)
def test_usage_errors_exit_2(argv, tmp_path, capsys):
    assert run(argv + ["--output-dir", str(tmp_path)] if argv[0] != "nonsense" else argv) == 2
    assert capsys.readouterr().err


def test_numerical_failure_exits_1(tmp_path, capsys):
    path = tmp_path / "flat.csv"
    path.write_text("t,value\n0,1\n1,1\n2,1\n3,1\n")
    assert run(["fit", "--input", str(path), "--output-dir", str(tmp_path)] + FAST_FIT) == 1
    assert "numerical failure" in capsys.readouterr().err


def test_fit_and_compare(series, tmp_path):
    assert run(["fit", "--input", series, "--output-dir", str(tmp_path / "f")] + FAST_FIT) == 0
    fit = json.load(open(tmp_path / "f" / "fit.json"))
    assert set(fit) == {"model", "sigma", "beta", "hurst", "loglik", "aic", "flat_beta", "scale"}
    assert fit["aic"] == pytest.approx(6 - 2 * fit["loglik"])
    assert run(["compare", "--input", series, "--output-dir", str(tmp_path / "c")] + FAST_FIT) == 0
    ranking = json.load(open(tmp_path / "c" / "compare.json"))["ranking"]
    aics = [r["aic"] for r in ranking]
    assert aics == sorted(aics) and len(aics) == 3
    assert "Parameter" in (tmp_path / "c" / "compare.txt").read_text()


def test_fit_telemetry_input(tmp_path):
    text, *_ = whale_like()
    src = tmp_path / "whale.csv"
    src.write_text(text)
    out = tmp_path / "o"
    assert run(["fit", "--input", str(src), "--id", "1", "--axis", "lat", "--compare", "--output-dir", str(out)] + FAST_FIT) == 0
    assert {"compare.json", "compare.txt", "profile-ifou.csv"} <= set(p.name for p in out.iterdir())


def test_profile_surface_full_grid(tmp_path):
    tr = simulate_trajectory(ModelParams(1.0, 2.0, 0.6), TimeGrid.regular(25, 0.2), seed=2)
    fit = fit_ifou(tr, FitConfig())
    marker = emit_profile_surface(fit, tmp_path / "profile.csv")
    rows = list(csv.DictReader(open(tmp_path / "profile.csv")))
    assert len(rows) == 1600 and set(rows[0]) == {"beta", "hurst", "profile_loglik"}
    info = json.load(open(marker))
    assert info["mle"]["beta"] == fit.mle["beta"] and info["flat_beta"] is False
    best = max(rows, key=lambda r: float(r["profile_loglik"]))
    assert float(best["beta"]) == info["grid_argmax"]["beta"]
    assert info["grid_argmax"]["profile_loglik"] <= info["loglik"] + 1e-9


def test_profile_surface_flat_marker(tmp_path):
    tr = simulate_trajectory(ModelParams(1.0, 200.0, 0.5), TimeGrid.regular(100, 1.0), seed=4)
    fit = fit_ifou(tr, FitConfig())
    marker = emit_profile_surface(fit, tmp_path / "p.csv")
    assert json.load(open(marker))["flat_beta"] is True


def test_profile_surface_requires_samples(tmp_path):
    from ifou.inference import FitResult

    with pytest.raises(ValueError):
        emit_profile_surface(FitResult("ifou", {}, 0.0, 6.0), tmp_path / "x.csv")


def test_predict_commands(series, tmp_path):
    out = tmp_path / "p"
    argv = ["predict-position", "--input", series, "--m", "5", "--holdout", "5", "--draws", "100", "--output-dir", str(out)]
    assert run(argv + FAST_FIT) == 0
    info = json.load(open(out / "forecast.json"))
    assert info["horizon"] == 5 and info["mse"] >= 0 and "fit" in info
    rows = list(csv.DictReader(open(out / "forecast-draws.csv")))
    assert len(rows) == 500
    argv = ["predict-velocity", "--input", series, "--sigma", "1", "--beta", "2", "--hurst", "0.6", "--draws", "3"]
    assert run(argv + ["--output-dir", str(tmp_path / "v")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "v" / "velocity-draws.csv")))
    assert len(rows) == 3 * 41
    bad = ["predict-velocity", "--input", series, "--sigma", "1", "--draws", "3", "--output-dir", str(tmp_path / "b")]
    assert run(bad) == 2


def test_threads_env(series, tmp_path, monkeypatch):
    monkeypatch.setenv("IFOU_THREADS", "2")
    assert run(["fit", "--input", series, "--output-dir", str(tmp_path / "a")] + FAST_FIT) == 0
    monkeypatch.setenv("IFOU_THREADS", "zero")
    assert run(["fit", "--input", series, "--output-dir", str(tmp_path / "b")] + FAST_FIT) == 2


@pytest.mark.parametrize(
    "argv",
    [
        "simulate --sigma 1.5 --beta 3 --hurst 0.3 --t-max 2 --n 50 --paths 3 --seed 11",
        "cov-surface --sigma 1 --beta 2 --hurst 0.7 --s-max 1 --t-max 2 --step 0.25",
        "compare --input {series} --n-beta 8 --n-h 6",
        "predict-position --input {series} --m 4 --draws 50 --seed 3 --sigma 1 --beta 2 --hurst 0.6",
        "predict-velocity --input {series} --draws 5 --seed 9 --sigma 1 --beta 2 --hurst 0.6",
    ],
)
def test_byte_identical_reruns(argv, series, tmp_path):
    args = argv.format(series=series).split()
    assert run(args + ["--output-dir", str(tmp_path / "a")]) == 0
    assert run(args + ["--output-dir", str(tmp_path / "b")]) == 0
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert a and a == b
