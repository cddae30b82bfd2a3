"""Command-line interface: ``latentfactor <command> [options]``.

Exit codes: 0 success, 2 argument error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    FeaturePanel,
    IngestionError,
    ReturnsPanel,
    SplitSpec,
    WindowError,
    compute_norm_constant,
    forecast_dates,
    load_panel,
    write_panel,
)
from .numerics import DecompositionError
from .numerics.special import DomainError

EXIT_OK, EXIT_ARGS, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SPLITS = ("train", "val", "test")


class ArgumentError(ValueError):
    """Invalid command-line or configuration input."""


class DataError(ValueError):
    """Missing or malformed input files."""


# ---------------------------------------------------------------------------
# run configuration

_MODEL_KEYS = ("factors", "lookback", "hidden", "dropout", "arch", "seq_layers", "heads", "k_iwae", "lr",
               "weight_decay", "steps", "polyak_start", "val_every", "val_k", "val_dates", "variance_mode",
               "diagonal_only", "seed")

RUN_DEFAULTS: dict = {
    # paths and splits
    "data_dir": None,
    "out": "out",
    "checkpoint": None,
    "train_end": None,
    "val_end": None,
    "norm_constant": None,
    "split": "test",
    "preset": "desk",
    # synthetic market
    "n_stocks": 48,
    "n_true_factors": 4,
    "n_sectors": 6,
    "n_dates": 3000,
    "churn": 0.0,
    "drift": 0.0,
    "regime_day": None,
    "regime_scale": 1.0,
    "start_date": "2000-01-03",
    # forecasting and evaluation
    "date": None,
    "n": 1000,
    "mode": "long_short",
    "leverage": "unconstrained",
    "lam": 1.0,
    "n_posterior": 100,
    "n_prior": 10_000,
    "n_cdf_draws": 200,
    "n_port_samples": 10_000,
    "eval_stride": 1,
    # baselines
    "ppca_factors": 12,
    "ppca_window": 504,
    "ppca_refit": 21,
    "garch_restarts": 20,
}
MODEL_DEFAULTS = {k: None for k in _MODEL_KEYS}
ALLOWED_KEYS = frozenset(RUN_DEFAULTS) | frozenset(MODEL_DEFAULTS)
PRESETS = ("desk", "paper")


def _model_config(run: dict):
    from .model.config import ModelConfig, desk_config

    overrides = {k: run[k] for k in _MODEL_KEYS if run.get(k) is not None}
    try:
        return desk_config(**overrides) if run["preset"] == "desk" else ModelConfig(**overrides)
    except (TypeError, ValueError) as exc:
        raise ArgumentError(f"invalid model configuration: {exc}") from exc


def resolve_config(args: argparse.Namespace) -> dict:
    """Merge defaults, the JSON config file and command-line flags (flags win)."""
    run = dict(RUN_DEFAULTS, **MODEL_DEFAULTS)
    if args.config:
        try:
            with open(args.config) as fh:
                loaded = json.load(fh)
        except OSError as exc:
            raise ArgumentError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ArgumentError(f"config {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ArgumentError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - ALLOWED_KEYS)
        if unknown:
            raise ArgumentError(f"unknown config keys: {unknown}")
        run.update(loaded)
    for key, val in vars(args).items():
        if key in ALLOWED_KEYS and val is not None:
            run[key] = val
    if run["preset"] not in PRESETS:
        raise ArgumentError(f"preset must be one of {PRESETS}")
    if run["leverage"] in ("inf", "none"):
        run["leverage"] = "unconstrained"
    for key in ("n", "n_stocks", "n_dates", "n_posterior", "n_prior", "n_cdf_draws", "n_port_samples",
                "eval_stride", "ppca_factors", "ppca_window", "ppca_refit", "garch_restarts"):
        if not isinstance(run[key], int) or isinstance(run[key], bool) or run[key] < 0:
            raise ArgumentError(f"{key} must be a non-negative integer, got {run[key]!r}")
    if run["eval_stride"] < 1:
        raise ArgumentError("eval_stride must be at least 1")
    if not (isinstance(run["lam"], (int, float)) and run["lam"] > 0):
        raise ArgumentError("lam must be positive")
    _model_config(run)  # validate before any compute
    return run


# ---------------------------------------------------------------------------
# helpers


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out: Path, command: str, run: dict, inputs: list[Path], outputs: list[Path]) -> Path:
    """Record the resolved config, seed and input/output checksums."""
    doc = {
        "command": command,
        "version": __version__,
        "seed": run.get("seed"),
        "config": run,
        "inputs": {str(p): sha256(p) for p in sorted(inputs, key=str)},
        "outputs": {p.name: sha256(p) for p in sorted(outputs, key=str)},
    }
    path = out / "manifest.json"
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return path


def _out_dir(run: dict) -> Path:
    out = Path(run["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _data_files(run: dict) -> dict[str, Path]:
    if not run["data_dir"]:
        raise ArgumentError("--data-dir is required")
    d = Path(run["data_dir"])
    files = {"returns": d / "returns.csv"}
    if not files["returns"].exists():
        raise DataError(f"{files['returns']} not found")
    for name, fname in (("features", "features.csv"), ("static", "static.csv"), ("schema", "schema.json")):
        if (d / fname).exists():
            files[name] = d / fname
    return files


def load_data(run: dict, norm_constant: float | None = None):
    """Load the data directory; returns ``(panel, features, split, input files)``.

    Returns are normalized by ``norm_constant`` when given (a checkpoint's
    constant), else by the configured pin, else by the training-split std.
    """
    files = _data_files(run)
    panel, features = load_panel(files["returns"], files.get("features"), files.get("static"),
                                 files.get("schema"), norm_constant=1.0)
    split = _split(run, panel)
    c = norm_constant if norm_constant is not None else run["norm_constant"]
    if c is None:
        train_end = int(split.indices(panel.dates)["train"][-1])
        c = compute_norm_constant(panel.returns, panel.membership, train_end)
    panel = panel.renormalized(float(c))
    if features.n_ts == 0 and features.n_static == 0:
        features = None
    return panel, features, split, list(files.values())


def _split(run: dict, panel: ReturnsPanel) -> SplitSpec:
    try:
        if run["train_end"] is None and run["val_end"] is None:
            split = SplitSpec.from_fractions(panel.dates, 0.6, 0.2)
        elif run["train_end"] is None or run["val_end"] is None:
            raise ValueError("train_end and val_end must be given together")
        else:
            split = SplitSpec(run["train_end"], run["val_end"])
        idx = split.indices(panel.dates)
    except ValueError as exc:
        raise ArgumentError(f"invalid split ({panel.dates[0]} .. {panel.dates[-1]} available): {exc}") from exc
    if idx["train"].size == 0:
        raise ArgumentError("training split is empty")
    return split


def _split_names(run: dict) -> list[str]:
    names = SPLITS if run["split"] == "all" else [s.strip() for s in str(run["split"]).split(",")]
    bad = [s for s in names if s not in SPLITS]
    if bad or not names:
        raise ArgumentError(f"--split must be 'all' or a comma list of {SPLITS}, got {run['split']!r}")
    return list(names)


def _eval_dates(run: dict, panel: ReturnsPanel, split: SplitSpec, name: str, warmup: int) -> np.ndarray:
    idx = split.indices(panel.dates)[name]
    dates = forecast_dates(panel, idx, warmup)
    if dates.size == 0:
        raise ArgumentError(f"split {name!r} has no forecastable dates after a {warmup}-day warm-up "
                            f"(split spans {panel.dates[idx[0]] if idx.size else '-'} .. "
                            f"{panel.dates[idx[-1]] if idx.size else '-'})")
    return dates[:: run["eval_stride"]]


def _date_index(run: dict, panel: ReturnsPanel, warmup: int) -> int:
    if run["date"] is None:
        raise ArgumentError("--date is required")
    lo, hi = panel.dates[min(warmup, panel.n_dates - 1)], panel.dates[-1]
    try:
        t = panel.date_index(run["date"])
    except (KeyError, ValueError) as exc:
        raise ArgumentError(f"date {run['date']} is not a panel date; valid range {lo} .. {hi}") from exc
    if t < warmup:
        raise ArgumentError(f"date {run['date']} lacks a {warmup}-day lookback warm-up; valid range {lo} .. {hi}")
    if not panel.membership[t].any():
        raise ArgumentError(f"no member stocks on {run['date']}")
    return t


def _load_model(run: dict):
    from .model.checkpoint import CheckpointError
    from .model.estimator import LatentFactorModel

    path = Path(run["checkpoint"] or Path(run["out"]) / "checkpoint.bin")
    if not path.exists():
        raise DataError(f"checkpoint {path} not found")
    try:
        return LatentFactorModel.load(path), path
    except CheckpointError as exc:
        raise DataError(str(exc)) from exc


def _check_features(model, features: FeaturePanel | None) -> None:
    meta = model.checkpoint_.meta
    have_ts = [] if features is None else list(features.ts_names)
    have_static = [] if features is None else list(features.static_names)
    if meta.get("ts_channels", have_ts) != have_ts or meta.get("static_channels", have_static) != have_static:
        raise DataError(f"feature channels {have_ts + have_static} do not match the checkpoint's "
                        f"{meta.get('ts_channels', []) + meta.get('static_channels', [])}")


def _json_dump(path: Path, doc) -> Path:
    from .evaluation.metrics import write_metrics

    return write_metrics(path, doc)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(run: dict) -> list[Path]:
    from .synthetic import MarketSpec, generate, make_truth, write_truth

    seed = run["seed"] if run["seed"] is not None else 0
    if run["n_stocks"] < 1 or run["n_dates"] < 2:
        raise ArgumentError("synthetic market needs n_stocks >= 1 and n_dates >= 2")
    try:
        spec = MarketSpec(n_stocks=run["n_stocks"], n_factors=run["n_true_factors"], n_sectors=run["n_sectors"],
                          drift=run["drift"], regime_day=run["regime_day"], regime_scale=run["regime_scale"])
        truth = make_truth(spec, seed)
        market = generate(truth, run["n_dates"], seed=seed, churn=run["churn"], start_date=run["start_date"])
    except (TypeError, ValueError) as exc:
        raise ArgumentError(f"invalid synthetic market settings: {exc}") from exc
    out = _out_dir(run)
    try:
        paths = list(write_panel(market.panel, market.features, out).values())
        paths.append(write_truth(truth, out))
    except OSError as exc:
        raise DataError(f"cannot write to {out}: {exc}") from exc
    run["seed"] = seed
    write_manifest(out, "synth", run, [], paths)
    return paths


def cmd_train(run: dict) -> list[Path]:
    from .model.estimator import LatentFactorModel
    from .model.training import jsonl_logger

    config = _model_config(run)
    panel, features, split, inputs = load_data(run)
    out = _out_dir(run)
    log = jsonl_logger(out / "train_log.jsonl")
    try:
        model = LatentFactorModel.from_config(config).fit(panel, features, split, log=log)
    except ValueError as exc:
        if isinstance(exc, (FloatingPointError, DecompositionError)):
            raise
        raise ArgumentError(str(exc)) from exc
    finally:
        log.close()
    ckpt = model.save(Path(run["checkpoint"] or out / "checkpoint.bin"))
    run = dict(run, **config.to_dict())
    write_manifest(out, "train", run, inputs, [ckpt])
    return [ckpt, out / "train_log.jsonl"]


def cmd_eval(run: dict) -> list[Path]:
    from .evaluation.harness import ModelForecaster, evaluate
    from .evaluation.metrics import write_calibration_curve

    model, ckpt = _load_model(run)
    panel, features, split, inputs = load_data(run, model.checkpoint_.norm_constant)
    _check_features(model, features)
    fc = ModelForecaster(model, panel, features)
    seed = model.checkpoint_.config.seed if run["seed"] is None else run["seed"]
    out = _out_dir(run)
    metrics, outputs = {}, []
    for name in _split_names(run):
        dates = _eval_dates(run, panel, split, name, model.checkpoint_.config.lookback)
        block = evaluate(fc, panel, dates, seed=seed, n_posterior=run["n_posterior"], n_prior=run["n_prior"],
                         n_cdf_draws=run["n_cdf_draws"], n_port_samples=run["n_port_samples"], lam=run["lam"])
        rep = block.pop("calibration_portfolio_report", None)
        if rep is not None:
            outputs.append(write_calibration_curve(out / f"calibration_portfolio_{name}.csv", rep))
        metrics[name] = block
    outputs.append(_json_dump(out / "metrics.json", metrics))
    write_manifest(out, "eval", run, inputs + [ckpt], outputs)
    return outputs


def cmd_forecast(run: dict) -> list[Path]:
    model, ckpt = _load_model(run)
    panel, features, _, inputs = load_data(run, model.checkpoint_.norm_constant)
    _check_features(model, features)
    t = _date_index(run, panel, model.checkpoint_.config.lookback)
    mf = model.forecast_moments(panel, features, t)
    doc = {"date": str(panel.dates[t]), "horizon": "next trading day", "units": "normalized",
           "norm_constant": panel.norm_constant, **mf.to_dict()}
    out = _out_dir(run)
    path = _json_dump(out / f"forecast_{panel.dates[t]}.json", doc)
    write_manifest(out, "forecast", run, inputs + [ckpt], [path])
    return [path]


def cmd_sample(run: dict) -> list[Path]:
    model, ckpt = _load_model(run)
    panel, features, _, inputs = load_data(run, model.checkpoint_.norm_constant)
    _check_features(model, features)
    t = _date_index(run, panel, model.checkpoint_.config.lookback)
    seed = model.checkpoint_.config.seed if run["seed"] is None else run["seed"]
    draws = model.sample_day(panel, features, t, run["n"], seed=seed)
    tickers = panel.tickers[panel.membership[t]]
    out = _out_dir(run)
    path = out / f"samples_{panel.dates[t]}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(tickers))
        w.writerows([repr(float(x)) for x in row] for row in draws)
    write_manifest(out, "sample", run, inputs + [ckpt], [path])
    return [path]


def cmd_portfolio(run: dict) -> list[Path]:
    from .evaluation.portfolio import PortfolioSpec, backtest, write_cumulative

    try:
        spec = PortfolioSpec(run["mode"], str(run["leverage"]), float(run["lam"]))
    except ValueError as exc:
        raise ArgumentError(str(exc)) from exc
    model, ckpt = _load_model(run)
    panel, features, split, inputs = load_data(run, model.checkpoint_.norm_constant)
    _check_features(model, features)
    names = _split_names(run)
    if len(names) != 1:
        raise ArgumentError("portfolio backtests take a single split")
    dates = _eval_dates(run, panel, split, names[0], model.checkpoint_.config.lookback)
    prior = model.prior()
    from .factor_model import forecast_moments

    forecasts, realized = [], []
    for t in dates:
        day, win = model.embed_day(panel, features, int(t), require_next=True)
        forecasts.append(forecast_moments(day, prior, model.checkpoint_.config.variance_mode))
        realized.append(win.targets)
    rep = backtest(forecasts, realized, spec, panel.norm_constant)
    out = _out_dir(run)
    doc = dict(rep.to_dict(), split=names[0])
    paths = [_json_dump(out / f"backtest_{spec.label}.json", doc),
             write_cumulative(out / f"cumulative_{spec.label}.csv", panel.dates[dates + 1], rep)]
    write_manifest(out, "portfolio", run, inputs + [ckpt], paths)
    return paths


def cmd_baseline(run: dict, kind: str) -> list[Path]:
    from .evaluation.harness import PPCAForecaster, evaluate, evaluate_marginals

    panel, features, split, inputs = load_data(run)
    idx = split.indices(panel.dates)
    out = _out_dir(run)
    seed = 0 if run["seed"] is None else run["seed"]
    metrics, outputs = {}, []
    if kind == "ppca":
        from .baselines.ppca import ppca_fit

        fc = PPCAForecaster(panel, run["ppca_factors"], run["ppca_window"], run["ppca_refit"])
        warmup = run["ppca_window"] - 1
        for name in _split_names(run):
            dates = _eval_dates(run, panel, split, name, warmup)
            block = evaluate(fc, panel, dates, seed=seed, n_posterior=run["n_posterior"], n_prior=run["n_prior"],
                             n_cdf_draws=run["n_cdf_draws"], n_port_samples=run["n_port_samples"],
                             lam=run["lam"])
            block.pop("calibration_portfolio_report", None)
            metrics[name] = block
        last = int(idx["train"][-1])
        if last < warmup:
            raise ArgumentError(f"training split is shorter than the {run['ppca_window']}-day PPCA window")
        model, _ = ppca_fit(panel, last, run["ppca_window"], run["ppca_factors"])
        model.save(out / "ppca.json")
        outputs.append(out / "ppca.json")
    else:
        from .baselines.garch import MIN_OBS, SkewTGARCH, save_models

        tr = idx["train"]
        models = {}
        for j in range(panel.n_tickers):
            r = panel.returns[tr, j]
            r = r[np.isfinite(r)]
            if r.size < MIN_OBS:
                continue
            models[j] = SkewTGARCH(n_restarts=run["garch_restarts"], seed=seed).fit(r)
        if not models:
            raise ArgumentError(f"no stock has {MIN_OBS} training observations for GARCH")
        for name in _split_names(run):
            dates = _eval_dates(run, panel, split, name, 0)
            metrics[name] = evaluate_marginals(models, panel, dates)
        save_models({panel.tickers[j]: m for j, m in models.items()}, out / "garch.json")
        outputs.append(out / "garch.json")
    outputs.append(_json_dump(out / f"{kind}_metrics.json", metrics))
    write_manifest(out, f"baseline {kind}", run, inputs, outputs)
    return outputs


def cmd_export_betas(run: dict) -> list[Path]:
    model, ckpt = _load_model(run)
    panel, features, _, inputs = load_data(run, model.checkpoint_.norm_constant)
    _check_features(model, features)
    t = _date_index(run, panel, model.checkpoint_.config.lookback)
    day, _ = model.embed_day(panel, features, t)
    out = _out_dir(run)
    path = out / f"betas_{panel.dates[t]}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ticker", "alpha", *[f"beta_{k + 1}" for k in range(day.n_factors)], "sigma", "nu"])
        for i, tk in enumerate(day.tickers):
            w.writerow([tk, repr(float(day.alpha[i])), *[repr(float(b)) for b in day.B[i]],
                        repr(float(day.sigma[i])), repr(float(day.nu[i]))])
    write_manifest(out, "export-betas", run, inputs + [ckpt], [path])
    return [path]


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ARGS, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("common options")
    g.add_argument("--config", help="JSON run configuration; flags override its values")
    g.add_argument("--data-dir", dest="data_dir", help="directory with returns.csv and optional features")
    g.add_argument("--out", help="output directory")
    g.add_argument("--checkpoint", help="checkpoint path (default: <out>/checkpoint.bin)")
    g.add_argument("--seed", type=int, help="master seed")
    g.add_argument("--split", help="train, val, test, a comma list of these, or all")
    g.add_argument("--date", help="forecast date (YYYY-MM-DD); the forecast targets the next date")
    g.add_argument("--n", type=int, help="number of joint samples")
    g.add_argument("--mode", choices=("long_only", "long_short"))
    g.add_argument("--leverage", choices=("1", "unconstrained", "inf"))
    g.add_argument("--lambda", dest="lam", type=float, help="risk aversion (normalized returns)")
    g.add_argument("--arch", choices=("attention", "recurrent"))
    g.add_argument("--factors", type=int)
    g.add_argument("--lookback", type=int)
    g.add_argument("--steps", type=int)
    g.add_argument("--k", dest="k_iwae", type=int, help="importance samples in the training bound")
    g.add_argument("--preset", choices=PRESETS, help="model defaults: desk scale or full scale")

    parser = _Parser(prog="latentfactor", description="Latent factor return model toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "synth": "generate a synthetic market and its ground truth",
        "train": "train the factor network",
        "eval": "compute forecast metrics per split",
        "forecast": "mean and covariance for the day after --date",
        "sample": "joint return samples for the day after --date",
        "portfolio": "mean-variance backtest over a split",
        "export-betas": "per-stock alpha, exposures, sigma and nu for --date",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    base = sub.add_parser("baseline", parents=[common], help="fit and evaluate a baseline",
                          description="fit and evaluate a baseline")
    base.add_argument("kind", choices=("ppca", "garch"))
    return parser


_COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "forecast": cmd_forecast,
             "sample": cmd_sample, "portfolio": cmd_portfolio, "export-betas": cmd_export_betas}


def main(argv: list[str] | None = None) -> int:
    from .baselines.garch import GarchFitError
    from .model.training import TrainingDiverged

    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        run = resolve_config(args)
        if args.command == "baseline":
            paths = cmd_baseline(run, args.kind)
        else:
            paths = _COMMANDS[args.command](run)
    except ArgumentError as exc:
        print(f"latentfactor {args.command}: argument error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except (DataError, IngestionError, WindowError, OSError) as exc:
        print(f"latentfactor {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, DecompositionError, GarchFitError, DomainError, FloatingPointError) as exc:
        print(f"latentfactor {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    for p in paths:
        print(p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
