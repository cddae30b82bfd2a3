from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from latentfactor.cli import EXIT_ARGS, EXIT_DATA, EXIT_OK, main, sha256
from latentfactor.data import load_panel
from latentfactor.model import LatentFactorModel

TINY = {"factors": 2, "lookback": 4, "hidden": 8, "heads": 2, "dropout": 0.0, "steps": 6, "k_iwae": 3,
        "val_every": 3, "val_dates": 4, "polyak_start": 3, "n_posterior": 20, "n_prior": 200,
        "n_cdf_draws": 20, "n_port_samples": 200}


def _run(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert _run("synth", "--out", data, "--seed", 3, "--config", _write(root / "synth.json", {
        "n_stocks": 5, "n_dates": 420, "churn": 0.1})) == EXIT_OK
    cfg = _write(root / "run.json", TINY)
    model_dir = root / "model"
    assert _run("train", "--data-dir", data, "--out", model_dir, "--config", cfg, "--seed", 1) == EXIT_OK
    return root, data, model_dir, cfg


def _write(path, doc):
    path.write_text(json.dumps(doc))
    return path


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_synth_default_shape(tmp_path):
    assert _run("synth", "--out", tmp_path, "--seed", 0) == EXIT_OK
    panel, _ = load_panel(tmp_path / "returns.csv", norm_constant=1.0)
    assert panel.n_tickers == 48 and panel.n_dates == 3000
    assert (tmp_path / "truth.json").exists() and (tmp_path / "manifest.json").exists()


def test_synth_same_seed_same_checksums(tmp_path):
    sums = []
    for d in ("a", "b"):
        assert _run("synth", "--out", tmp_path / d, "--seed", 9, "--config",
                    _write(tmp_path / "c.json", {"n_stocks": 6, "n_dates": 50})) == EXIT_OK
        sums.append(json.loads((tmp_path / d / "manifest.json").read_text())["outputs"])
    assert sums[0] == sums[1] and len(sums[0]) >= 4


def test_synth_single_stock(tmp_path):
    cfg = _write(tmp_path / "c.json", {"n_stocks": 1, "n_dates": 30, "n_true_factors": 1})
    assert _run("synth", "--out", tmp_path / "d", "--config", cfg) == EXIT_OK
    panel, _ = load_panel(tmp_path / "d" / "returns.csv", norm_constant=1.0)
    assert panel.n_tickers == 1 and panel.n_dates == 30


def test_argument_errors(tmp_path, capsys):
    assert _run("synth", "--out", tmp_path, "--config", _write(tmp_path / "c.json", {"bogus": 1})) == EXIT_ARGS
    assert "unknown config keys" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        _run("nonsense")
    assert exc.value.code == EXIT_ARGS
    assert _run("train", "--out", tmp_path) == EXIT_ARGS


def test_data_errors(tmp_path):
    assert _run("train", "--data-dir", tmp_path / "missing", "--out", tmp_path) == EXIT_DATA
    (tmp_path / "bad").mkdir()
    (tmp_path / "bad" / "returns.csv").write_text("date,ticker,return\n2020-01-01,A,x\n")
    assert _run("train", "--data-dir", tmp_path / "bad", "--out", tmp_path) == EXIT_DATA
    assert _run("eval", "--data-dir", tmp_path / "bad", "--out", tmp_path / "none") == EXIT_DATA


def test_train_outputs(workspace):
    _, _, model_dir, _ = workspace
    assert (model_dir / "checkpoint.bin").exists()
    log = (model_dir / "train_log.jsonl").read_text().splitlines()
    assert log and all(json.loads(line) for line in log)
    manifest = json.loads((model_dir / "manifest.json").read_text())
    assert manifest["seed"] == 1 and manifest["inputs"]


def test_eval_three_blocks(workspace, tmp_path):
    root, data, model_dir, cfg = workspace
    out = tmp_path / "eval"
    assert _run("eval", "--data-dir", data, "--checkpoint", model_dir / "checkpoint.bin", "--out", out,
                "--split", "all", "--config", cfg) == EXIT_OK
    metrics = json.loads((out / "metrics.json").read_text())
    assert set(metrics) == {"train", "val", "test"}
    for block in metrics.values():
        assert np.isfinite(block["nll_joint"]) and np.isfinite(block["cal_universe"])


def test_eval_bad_split(workspace, tmp_path):
    _, data, model_dir, cfg = workspace
    assert _run("eval", "--data-dir", data, "--checkpoint", model_dir / "checkpoint.bin", "--out", tmp_path,
                "--split", "holdout", "--config", cfg) == EXIT_ARGS


def test_forecast(workspace, tmp_path):
    _, data, model_dir, cfg = workspace
    panel, _ = load_panel(data / "returns.csv", norm_constant=1.0)
    base = ("--data-dir", data, "--checkpoint", model_dir / "checkpoint.bin", "--out", tmp_path, "--config", cfg)
    assert _run("forecast", *base, "--date", panel.dates[1]) == EXIT_ARGS
    assert _run("forecast", *base, "--date", "1999-01-01") == EXIT_ARGS
    assert _run("forecast", *base, "--date", panel.dates[200]) == EXIT_OK
    doc = json.loads((tmp_path / f"forecast_{panel.dates[200]}.json").read_text())
    cov = np.array(doc["covariance"])
    assert cov.shape == (len(doc["mean"]),) * 2
    np.testing.assert_allclose(cov, cov.T)


def test_sample_zero_draws(workspace, tmp_path):
    _, data, model_dir, cfg = workspace
    panel, _ = load_panel(data / "returns.csv", norm_constant=1.0)
    d = panel.dates[200]
    assert _run("sample", "--data-dir", data, "--checkpoint", model_dir / "checkpoint.bin", "--out", tmp_path,
                "--config", cfg, "--date", d, "--n", 0) == EXIT_OK
    rows = _rows(tmp_path / f"samples_{d}.csv")
    assert len(rows) == 1 and rows[0] == list(panel.tickers[panel.membership[200]])
    assert _run("sample", "--data-dir", data, "--checkpoint", model_dir / "checkpoint.bin", "--out", tmp_path,
                "--config", cfg, "--date", d, "--n", 7) == EXIT_OK
    assert len(_rows(tmp_path / f"samples_{d}.csv")) == 8


def test_export_betas(workspace, tmp_path):
    _, data, model_dir, cfg = workspace
    panel, features = load_panel(data / "returns.csv", data / "features.csv", data / "static.csv",
                                 data / "schema.json")
    d = panel.dates[250]
    args = ("export-betas", "--data-dir", data, "--checkpoint", model_dir / "checkpoint.bin", "--config", cfg,
            "--date", d)
    assert _run(*args, "--out", tmp_path / "a") == EXIT_OK
    assert _run(*args, "--out", tmp_path / "b") == EXIT_OK
    fa, fb = tmp_path / "a" / f"betas_{d}.csv", tmp_path / "b" / f"betas_{d}.csv"
    assert sha256(fa) == sha256(fb)
    rows = _rows(fa)
    assert rows[0] == ["ticker", "alpha", "beta_1", "beta_2", "sigma", "nu"]
    assert all(len(r) == 3 + 2 + 1 for r in rows)  # ticker, alpha, F betas, sigma, nu
    model = LatentFactorModel.load(model_dir / "checkpoint.bin")
    panel = panel.renormalized(model.checkpoint_.norm_constant)
    day, _ = model.embed_day(panel, features, 250)
    body = rows[1:]
    assert [r[0] for r in body] == list(day.tickers)
    np.testing.assert_array_equal(np.array([[float(x) for x in r[1:]] for r in body]),
                                  np.column_stack([day.alpha, day.B, day.sigma, day.nu]))


def test_portfolio(workspace, tmp_path):
    _, data, model_dir, cfg = workspace
    assert _run("portfolio", "--data-dir", data, "--checkpoint", model_dir / "checkpoint.bin", "--out", tmp_path,
                "--config", cfg, "--mode", "long_only", "--leverage", "1") == EXIT_OK
    doc = json.loads((tmp_path / "backtest_long_only_L1.json").read_text())
    assert np.isfinite(doc["sharpe"])
    rows = _rows(tmp_path / "cumulative_long_only_L1.csv")
    assert len(rows) > 2


def test_baselines(workspace, tmp_path):
    _, data, _, cfg = workspace
    bcfg = _write(tmp_path / "b.json", {"ppca_factors": 2, "ppca_window": 40, "ppca_refit": 10,
                                        "garch_restarts": 2, **{k: TINY[k] for k in
                                                                ("n_posterior", "n_prior", "n_cdf_draws",
                                                                 "n_port_samples")}})
    assert _run("baseline", "ppca", "--data-dir", data, "--out", tmp_path / "p", "--config", bcfg,
                "--split", "test") == EXIT_OK
    m = json.loads((tmp_path / "p" / "ppca_metrics.json").read_text())
    assert np.isfinite(m["test"]["nll_joint"])
    assert _run("baseline", "garch", "--data-dir", data, "--out", tmp_path / "g", "--config", bcfg,
                "--split", "test") == EXIT_OK
    m = json.loads((tmp_path / "g" / "garch_metrics.json").read_text())
    assert np.isfinite(m["test"]["nll_ind"])
