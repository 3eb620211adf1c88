"""Command-line interface: stats, clean, sanitize, accountant, train, tune,
evaluate, report.

Every command that writes artifacts also writes a ``manifest.json`` with
input digests, the effective configuration, seeds, and the library
version; equal manifests imply byte-identical metric outputs. Exit codes:
0 success, 1 runtime failure, 2 usage or configuration error.
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
from .config import ConfigError, ExperimentConfig, parse_config
from .core import RngStream
from .data import DataFormatError, descriptive_stats, iqr_clean, load_csv
from .forecast import (
    ModelConfig,
    TrainConfig,
    run_baseline,
    run_gradient_perturbation,
    run_input_perturbation,
    run_nonprivate,
    utility_loss,
)
from .nn import save_params
from .optim import DpSgdConfig, TrainingDiverged
from .privacy import (
    BudgetError,
    BudgetLedger,
    MechanismValidityError,
    PrivacyParams,
    compute_epsilon,
    sanitize_series,
)
from .tune import SearchSpace, run_search, write_trials_csv

USAGE_ERROR = 2
RUNTIME_ERROR = 1

_CONFIG_ERRORS = (ConfigError, DataFormatError, MechanismValidityError, BudgetError, ValueError)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out_dir: Path, inputs: list[Path], config_echo: dict, seeds) -> None:
    manifest = {
        "version": __version__,
        "inputs": {str(p): _sha256(p) for p in inputs if p is not None and p.exists()},
        "config": config_echo,
        "seeds": list(seeds),
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_config(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("this command requires --config <path>")
    return parse_config(args.config)


def _dataset_series(cfg: ExperimentConfig, clean: bool = True):
    path = Path(cfg.require("dataset", "path"))
    series = load_csv(path)
    if clean:
        series = iqr_clean(series)
    return series, path


def _seeds(cfg: ExperimentConfig, args) -> tuple[int, ...]:
    seeds = cfg.get("run", "seeds")
    if seeds:
        return seeds
    base = args.seed if args.seed is not None else 0
    return tuple(range(base, base + 10))


def _model_config(cfg: ExperimentConfig) -> ModelConfig:
    section = cfg.section("model")
    return ModelConfig(
        cell=section.get("cell", "gru"),
        bidirectional=section.get("bidirectional", True),
        hidden_size=section.get("hidden_size", 175),
        activation=section.get("activation", "relu"),
    )


def _train_config(cfg: ExperimentConfig) -> TrainConfig:
    section = cfg.section("train")
    return TrainConfig(
        batch_size=section.get("batch_size", 5),
        learning_rate=section.get("learning_rate", 2.89e-4),
        epochs=section.get("epochs", 100),
    )


def cmd_stats(args) -> int:
    cfg = _load_config(args)
    series, path = _dataset_series(cfg, clean=True)
    stats = descriptive_stats(series)
    out = _out_dir(args)
    with open(out / "stats.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["statistic", *series.region_labels])
        for name in ("min", "max", "mean", "std", "median"):
            writer.writerow([name, *[repr(float(v)) for v in stats[name]]])
    _write_manifest(out, [path], cfg.echo(), [])
    print(f"wrote {out / 'stats.csv'}")
    return 0


def _write_series_csv(series, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["datetime", *series.region_labels])
        stamps = [str(t).replace("T", " ") for t in series.timestamps.astype("datetime64[s]")]
        for stamp, row in zip(stamps, series.counts):
            writer.writerow([stamp, *[repr(float(v)) for v in row]])


def cmd_clean(args) -> int:
    cfg = _load_config(args)
    series, path = _dataset_series(cfg, clean=True)
    out = _out_dir(args)
    _write_series_csv(series, out / "cleaned.csv")
    _write_manifest(out, [path], cfg.echo(), [])
    print(f"wrote {out / 'cleaned.csv'}")
    return 0


def cmd_sanitize(args) -> int:
    cfg = _load_config(args)
    series, path = _dataset_series(cfg, clean=True)
    params = PrivacyParams(
        epsilon=cfg.require("privacy", "epsilon"),
        delta=cfg.require("privacy", "delta"),
        l2_sensitivity=cfg.get("privacy", "sensitivity", 1.0),
    )
    seed = args.seed if args.seed is not None else 0
    sanitized = sanitize_series(series, params, RngStream(seed))
    out = _out_dir(args)
    _write_series_csv(sanitized, out / "sanitized.csv")
    ledger = BudgetLedger.uniform(
        params.epsilon, params.delta, count=series.n_slots, n_population=series.n_slots
    )
    ledger.write_csv(out / "ledger.csv")
    record = sanitized.privacy
    with open(out / "privacy.json", "w") as fh:
        json.dump(
            {
                "mechanism": record.mechanism,
                "epsilon": record.epsilon,
                "delta": record.delta,
                "l2_sensitivity": record.l2_sensitivity,
                "sigma": record.sigma,
                "total_epsilon": ledger.total()[0],
                "total_delta": ledger.total()[1],
            },
            fh, indent=2, sort_keys=True,
        )
        fh.write("\n")
    _write_manifest(out, [path], cfg.echo(), [seed])
    print(f"wrote {out / 'sanitized.csv'} (sigma={record.sigma:.6g})")
    return 0


def cmd_accountant(args) -> int:
    if args.q is not None:
        q = args.q
    elif args.n is not None and args.batch is not None:
        q = args.batch / args.n
    else:
        raise ConfigError("provide --q or both --n and --batch")
    if args.steps is not None:
        steps = args.steps
    elif args.epochs is not None and args.n is not None and args.batch is not None:
        steps = args.epochs * (args.n // args.batch)
    else:
        raise ConfigError("provide --steps or --epochs with --n/--batch")
    if steps == 0:
        print("warning: zero steps; epsilon reflects the conversion term only",
              file=sys.stderr)
    eps, order = compute_epsilon(q, args.noise_multiplier, steps, args.delta)
    print(f"eps={eps:.6f} at order={order} (delta={args.delta:g})")
    return 0


def _run_pipeline(cfg: ExperimentConfig, args):
    kind = cfg.get("run", "kind", "nonprivate")
    series, path = _dataset_series(cfg, clean=True)
    lag = cfg.get("run", "lag", 6)
    train_days = cfg.get("run", "train_days", 65)
    test_days = cfg.get("run", "test_days", 7)
    scale = cfg.get("run", "scale", True)
    jobs = args.jobs if args.jobs else cfg.get("run", "jobs", 1)
    seeds = _seeds(cfg, args)
    if kind == "baseline":
        artifact = run_baseline(series, lag, train_days, test_days)
    elif kind == "nonprivate":
        artifact = run_nonprivate(
            series, _model_config(cfg), _train_config(cfg), seeds,
            lag, train_days, test_days, scale, jobs,
        )
    elif kind == "gradient":
        train_cfg = _train_config(cfg)
        dp = cfg.section("dp")
        dp_cfg = DpSgdConfig(
            l2_norm_clip=dp.get("l2_norm_clip", 1.0),
            noise_multiplier=dp.get("noise_multiplier", 35.0),
            num_microbatches=dp.get("num_microbatches", 5),
            batch_size=train_cfg.batch_size,
            epochs=train_cfg.epochs,
            learning_rate=train_cfg.learning_rate,
        )
        delta = cfg.require("privacy", "delta")
        artifact = run_gradient_perturbation(
            series, _model_config(cfg), dp_cfg, delta, seeds,
            lag, train_days, test_days, scale, jobs,
        )
    elif kind == "input":
        params = PrivacyParams(
            epsilon=cfg.require("privacy", "epsilon"),
            delta=cfg.require("privacy", "delta"),
            l2_sensitivity=cfg.get("privacy", "sensitivity", 1.0),
        )
        artifact = run_input_perturbation(
            series, _model_config(cfg), _train_config(cfg), params, seeds,
            lag, train_days, test_days, scale, jobs,
        )
    else:
        raise ConfigError(f"unknown run kind {kind!r}")
    return artifact, path, seeds


def cmd_train(args) -> int:
    cfg = _load_config(args)
    artifact, path, seeds = _run_pipeline(cfg, args)
    out = _out_dir(args)
    artifact.write_metrics_csv(out / "metrics.csv")
    artifact.write_predictions_csv(out / "predictions.csv")
    artifact.write_summary_json(out / "summary.json")
    if artifact.train_log is not None:
        artifact.train_log.write_csv(out / "trainlog.csv")
    if artifact.params is not None:
        save_params(out / "params.npz", artifact.params)
    _write_manifest(out, [path], cfg.echo(), seeds)
    print(f"{artifact.run_kind}: mean RMSE {artifact.metrics.mean_rmse:.1f}, "
          f"mean MAE {artifact.metrics.mean_mae:.1f}")
    return 0


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run)
    pred_file = run_dir / "predictions.csv"
    if not pred_file.exists():
        raise ConfigError(f"no predictions.csv under {run_dir}")
    per_region: dict[str, list[tuple[float, float]]] = {}
    with open(pred_file, newline="") as fh:
        for row in csv.DictReader(fh):
            per_region.setdefault(row["region"], []).append(
                (float(row["y_true"]), float(row["y_pred"]))
            )
    out = _out_dir(args)
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["region", "rmse", "mae"])
        rmses, maes = [], []
        for region, pairs in per_region.items():
            arr = np.asarray(pairs)
            err = arr[:, 0] - arr[:, 1]
            r = float(np.sqrt(np.mean(err**2)))
            m = float(np.mean(np.abs(err)))
            rmses.append(r)
            maes.append(m)
            writer.writerow([region, repr(r), repr(m)])
        writer.writerow(["mean", repr(float(np.mean(rmses))), repr(float(np.mean(maes)))])
    print(f"wrote {out / 'metrics.csv'}")
    return 0


def cmd_report(args) -> int:
    def _summary(path: Path) -> dict:
        summary_file = Path(path) / "summary.json"
        if not summary_file.exists():
            raise ConfigError(f"no summary.json under {path}")
        with open(summary_file) as fh:
            return json.load(fh)

    dp = _summary(Path(args.run))
    ref = _summary(Path(args.reference))
    out = _out_dir(args)
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "dp_value", "np_value", "utility_loss_pct"])
        for metric in ("mean_rmse", "mean_mae"):
            loss = utility_loss(dp[metric], ref[metric])
            writer.writerow([metric, repr(dp[metric]), repr(ref[metric]), repr(loss)])
    print(f"wrote {out / 'report.csv'}")
    return 0


def cmd_tune(args) -> int:
    cfg = _load_config(args)
    series, path = _dataset_series(cfg, clean=True)
    kind = cfg.get("run", "kind", "nonprivate")
    budget = cfg.get("tune", "budget", 100)
    strategy = cfg.get("tune", "strategy", "random")
    trial_epochs = cfg.get("tune", "epochs", cfg.get("train", "epochs", 100))
    lag = cfg.get("run", "lag", 6)
    train_days = cfg.get("run", "train_days", 65)
    test_days = cfg.get("run", "test_days", 7)
    scale = cfg.get("run", "scale", True)
    model = _model_config(cfg)
    delta = cfg.get("privacy", "delta", 1e-7)

    if kind == "gradient":
        dp = cfg.section("dp")
        space = SearchSpace(
            clip_choices=(1.0, 1.5, 2.0, 2.5),
            noise_multiplier=dp.get("noise_multiplier", 35.0),
        )

        def pipeline(config, seed):
            dp_cfg = DpSgdConfig(
                l2_norm_clip=config["l2_norm_clip"],
                noise_multiplier=config["noise_multiplier"],
                num_microbatches=dp.get("num_microbatches", 5),
                batch_size=config["batch_size"],
                epochs=trial_epochs,
                learning_rate=config["learning_rate"],
            )
            model_cfg = ModelConfig(model.cell, model.bidirectional,
                                    config["h1"], model.activation)
            artifact = run_gradient_perturbation(
                series, model_cfg, dp_cfg, delta, [seed],
                lag, train_days, test_days, scale,
            )
            return artifact.metrics, artifact.privacy["epsilon"]
    else:
        space = SearchSpace()

        def pipeline(config, seed):
            model_cfg = ModelConfig(model.cell, model.bidirectional,
                                    config["h1"], model.activation)
            train_cfg = TrainConfig(config["batch_size"], config["learning_rate"],
                                    trial_epochs)
            artifact = run_nonprivate(
                series, model_cfg, train_cfg, [seed],
                lag, train_days, test_days, scale,
            )
            return artifact.metrics, None

    seed = args.seed if args.seed is not None else 0
    result = run_search(space, pipeline, budget, strategy, RngStream(seed))
    out = _out_dir(args)
    write_trials_csv(result, out / "trials.csv")
    with open(out / "best.json", "w") as fh:
        json.dump(
            {"config": result.best.config, "objective": result.best.objective,
             "mean_rmse": result.best.metrics.mean_rmse, "seed": result.best.seed},
            fh, indent=2, sort_keys=True,
        )
        fh.write("\n")
    _write_manifest(out, [path], cfg.echo(), [seed])
    print(f"best objective {result.best.objective:.3f} with {result.best.config}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpforecast",
        description="Differentially private recurrent forecasting of mobility counts",
    )
    parser.add_argument("--config", help="experiment config file", default=None)
    parser.add_argument("--out", help="output directory", default="out")
    parser.add_argument("--seed", type=int, default=None, help="base random seed")
    parser.add_argument("--jobs", type=int, default=None, help="parallel workers")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("stats", help="descriptive statistics CSV").set_defaults(fn=cmd_stats)
    sub.add_parser("clean", help="IQR-clean the dataset").set_defaults(fn=cmd_clean)
    sub.add_parser("sanitize", help="Gaussian-mechanism release").set_defaults(fn=cmd_sanitize)

    acct = sub.add_parser("accountant", help="DP-SGD epsilon for given settings")
    acct.add_argument("--q", type=float, default=None, help="sampling rate")
    acct.add_argument("--n", type=int, default=None, help="training set size")
    acct.add_argument("--batch", type=int, default=None, help="batch size")
    acct.add_argument("--noise-multiplier", type=float, required=True)
    acct.add_argument("--steps", type=int, default=None)
    acct.add_argument("--epochs", type=int, default=None)
    acct.add_argument("--delta", type=float, required=True)
    acct.set_defaults(fn=cmd_accountant)

    sub.add_parser("train", help="run the configured pipeline").set_defaults(fn=cmd_train)
    sub.add_parser("tune", help="hyperparameter search").set_defaults(fn=cmd_tune)

    ev = sub.add_parser("evaluate", help="recompute metrics from a run directory")
    ev.add_argument("--run", required=True)
    ev.set_defaults(fn=cmd_evaluate)

    rep = sub.add_parser("report", help="utility loss of a DP run vs a reference")
    rep.add_argument("--run", required=True, help="DP run directory")
    rep.add_argument("--reference", required=True, help="non-private run directory")
    rep.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (TrainingDiverged, RuntimeError, OSError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
