"""End-to-end experiment pipelines and evaluation metrics.

Four run kinds share one evaluation harness:

* ``baseline``   — persistence model, x_{t+1} = x_t, no training;
* ``nonprivate`` — Adam-trained recurrent forecaster on cleaned data;
* ``gradient``   — the same forecaster trained with DP-Adam (clip+noise),
  with an RDP accountant attached to the run;
* ``input``      — the whole series is sanitized once with the Gaussian
  mechanism, training sees only the noisy data, and evaluation compares
  predictions against the raw test targets.

Metrics are per-region RMSE and MAE over the test slots, reported in the
original count scale, plus their means and the across-region RMSE spread.
Model selection across seeds keeps the best mean RMSE.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import RngStream
from .data import (
    IdentityScaler,
    MinMaxScaler,
    MobilitySeries,
    WindowedDataset,
    make_windows,
    split,
)
from .estimator import RecurrentForecaster
from .optim import DpSgdConfig, NonPrivateConfig, TrainLog
from .privacy import (
    BudgetError,
    BudgetLedger,
    MechanismValidityError,
    PrivacyParams,
    compute_epsilon,
    delta_budget_check,
    gaussian_sigma,
    sanitize_series,
)

# Sanitization consumes its own sub-stream so the release is independent of
# model-training randomness.
_SANITIZE_STREAM = 7


@dataclass(frozen=True)
class MetricsReport:
    """Per-region RMSE/MAE with region-averaged summaries."""

    region_labels: tuple[str, ...]
    rmse: np.ndarray
    mae: np.ndarray
    mean_rmse: float
    mean_mae: float
    std_rmse: float

    def to_rows(self) -> list[dict]:
        rows = [
            {"region": label, "rmse": float(r), "mae": float(m)}
            for label, r, m in zip(self.region_labels, self.rmse, self.mae)
        ]
        rows.append({"region": "mean", "rmse": self.mean_rmse, "mae": self.mean_mae})
        return rows


def rmse(y_true: np.ndarray, y_pred: np.ndarray, formula: str = "conventional") -> np.ndarray:
    """Per-region root-mean-square error over test slots.

    ``formula="conventional"`` is sqrt of the mean squared error;
    ``"literal"`` divides the root of the summed squares by n instead and
    exists only for auditing alternative conventions.
    """
    y_true, y_pred = _check_pair(y_true, y_pred)
    sq = np.sum((y_true - y_pred) ** 2, axis=0)
    n = y_true.shape[0]
    if formula == "conventional":
        return np.sqrt(sq / n)
    if formula == "literal":
        return np.sqrt(sq) / n
    raise ValueError(f"unknown RMSE formula {formula!r}")


def mae(y_true: np.ndarray, y_pred: np.ndarray) -> np.ndarray:
    """Per-region mean absolute error over test slots."""
    y_true, y_pred = _check_pair(y_true, y_pred)
    return np.mean(np.abs(y_true - y_pred), axis=0)


def _check_pair(y_true, y_pred):
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape or y_true.ndim != 2:
        raise ValueError(
            f"y_true and y_pred must share a 2-d shape, got {y_true.shape} vs {y_pred.shape}"
        )
    return y_true, y_pred


def evaluate_forecast(
    y_true: np.ndarray,
    y_pred: np.ndarray,
    region_labels: Sequence[str],
    rmse_formula: str = "conventional",
) -> MetricsReport:
    region_rmse = rmse(y_true, y_pred, formula=rmse_formula)
    region_mae = mae(y_true, y_pred)
    return MetricsReport(
        region_labels=tuple(region_labels),
        rmse=region_rmse,
        mae=region_mae,
        mean_rmse=float(region_rmse.mean()),
        mean_mae=float(region_mae.mean()),
        std_rmse=float(region_rmse.std(ddof=1)) if len(region_rmse) > 1 else 0.0,
    )


def utility_loss(e_dp: float, e_np: float) -> float:
    """Percentage degradation of a private model versus its reference."""
    if e_np <= 0:
        raise ValueError("reference error must be positive")
    return 100.0 * (e_dp - e_np) / e_np


def persistence_forecast(test_counts: np.ndarray, last_train: np.ndarray) -> np.ndarray:
    """Predict each slot as the previous slot's counts.

    The first test slot is predicted by the final training slot; slot k>1
    by test slot k-1.
    """
    test_counts = np.asarray(test_counts, dtype=np.float64)
    last_train = np.asarray(last_train, dtype=np.float64)
    if test_counts.ndim != 2 or test_counts.shape[0] == 0:
        raise ValueError("test counts must be a nonempty (n, regions) matrix")
    return np.vstack([last_train[None, :], test_counts[:-1]])


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters shared by all trained pipelines."""

    cell: str = "gru"
    bidirectional: bool = True
    hidden_size: int = 175
    activation: str = "relu"


@dataclass(frozen=True)
class TrainConfig:
    """Non-private optimizer hyperparameters."""

    batch_size: int = 5
    learning_rate: float = 2.89e-4
    epochs: int = 100


@dataclass
class SeedResult:
    seed: int
    metrics: MetricsReport
    predictions: np.ndarray
    params: dict
    train_log: Optional[TrainLog]


@dataclass
class RunArtifact:
    """Everything needed to audit one experiment run."""

    run_kind: str
    region_labels: tuple[str, ...]
    metrics: MetricsReport
    predictions: np.ndarray
    y_true: np.ndarray
    target_timestamps: np.ndarray
    seeds: tuple[int, ...]
    best_seed: Optional[int]
    per_seed: list[SeedResult] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    privacy: Optional[dict] = None
    scaler_state: Optional[dict] = None
    params: Optional[dict] = None
    train_log: Optional[TrainLog] = None

    def write_metrics_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["run_kind", "region", "rmse", "mae"])
            for row in self.metrics.to_rows():
                writer.writerow(
                    [self.run_kind, row["region"], repr(row["rmse"]), repr(row["mae"])]
                )

    def write_predictions_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["datetime", "region", "y_true", "y_pred"])
            stamps = [str(t) for t in self.target_timestamps.astype("datetime64[s]")]
            for i, stamp in enumerate(stamps):
                for j, region in enumerate(self.region_labels):
                    writer.writerow(
                        [stamp.replace("T", " "), region,
                         repr(float(self.y_true[i, j])),
                         repr(float(self.predictions[i, j]))]
                    )

    def summary(self) -> dict:
        out = {
            "run_kind": self.run_kind,
            "regions": list(self.region_labels),
            "seeds": list(self.seeds),
            "best_seed": self.best_seed,
            "mean_rmse": self.metrics.mean_rmse,
            "mean_mae": self.metrics.mean_mae,
            "std_rmse": self.metrics.std_rmse,
            "per_region_rmse": self.metrics.rmse.tolist(),
            "per_region_mae": self.metrics.mae.tolist(),
            "per_seed": [
                {"seed": r.seed, "mean_rmse": r.metrics.mean_rmse,
                 "mean_mae": r.metrics.mean_mae}
                for r in self.per_seed
            ],
            "config": self.config,
        }
        if self.privacy is not None:
            out["privacy"] = self.privacy
        if self.scaler_state is not None:
            out["scaler"] = self.scaler_state
        if self.train_log is not None:
            out["train_steps"] = self.train_log.step_count
        return out

    def write_summary_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


@dataclass
class Prepared:
    """Split, windowed, and scaled data ready for training and scoring."""

    train_windows: WindowedDataset
    test_inputs: np.ndarray
    raw_test_targets: np.ndarray
    target_timestamps: np.ndarray
    scaler: object
    region_labels: tuple[str, ...]
    n_train_slots: int
    last_train_counts: np.ndarray


def prepare(
    series: MobilitySeries,
    lag: int = 6,
    train_days: int = 65,
    test_days: int = 7,
    scale: bool = True,
) -> Prepared:
    """Split, window, and scale one series.

    Evaluation targets default to the (unscaled) test-window targets; the
    input-perturbation pipeline swaps in the raw counts afterwards since
    its training data is noisy.
    """
    train_s, test_s = split(series, train_days, test_days)
    train_w = make_windows(train_s, lag)
    test_w = make_windows(test_s, lag, context=train_s)
    scaler = MinMaxScaler() if scale else IdentityScaler()
    scaler.fit(train_w)
    raw_targets = np.array(test_w.targets, subok=False)
    return Prepared(
        train_windows=scaler.transform(train_w),
        test_inputs=scaler.transform_inputs(test_w.inputs),
        raw_test_targets=raw_targets,
        target_timestamps=test_w.target_timestamps,
        scaler=scaler,
        region_labels=series.region_labels,
        n_train_slots=train_s.n_slots,
        last_train_counts=np.array(train_s.counts[-1], subok=False),
    )


def _fit_one_seed(args) -> SeedResult:
    prepared, model_cfg, opt, seed = args
    dp = isinstance(opt, DpSgdConfig)
    est = RecurrentForecaster(
        cell=model_cfg.cell,
        bidirectional=model_cfg.bidirectional,
        hidden_size=model_cfg.hidden_size,
        activation=model_cfg.activation,
        learning_rate=opt.learning_rate,
        batch_size=opt.batch_size,
        epochs=opt.epochs,
        l2_norm_clip=opt.l2_norm_clip if dp else None,
        noise_multiplier=opt.noise_multiplier if dp else None,
        num_microbatches=opt.num_microbatches if dp else None,
        seed=seed,
    )
    est.fit(prepared.train_windows.inputs, prepared.train_windows.targets)
    scaled_preds = est.predict(prepared.test_inputs)
    preds = prepared.scaler.inverse_transform_targets(scaled_preds)
    metrics = evaluate_forecast(prepared.raw_test_targets, preds, prepared.region_labels)
    return SeedResult(seed, metrics, preds, est.params_, est.train_log_)


def _run_seeds(prepared, model_cfg, opt, seeds, jobs=1) -> list[SeedResult]:
    tasks = [(prepared, model_cfg, opt, seed) for seed in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_fit_one_seed, tasks))
    else:
        results = [_fit_one_seed(t) for t in tasks]
    return results


def _best(results: list[SeedResult]) -> SeedResult:
    return min(results, key=lambda r: (r.metrics.mean_rmse, r.seed))


def run_baseline(
    series: MobilitySeries,
    lag: int = 6,
    train_days: int = 65,
    test_days: int = 7,
) -> RunArtifact:
    """Persistence-model run; fully deterministic."""
    train_s, test_s = split(series, train_days, test_days)
    preds = persistence_forecast(test_s.counts, train_s.counts[-1])
    metrics = evaluate_forecast(test_s.counts, preds, series.region_labels)
    return RunArtifact(
        run_kind="baseline",
        region_labels=series.region_labels,
        metrics=metrics,
        predictions=preds,
        y_true=np.array(test_s.counts),
        target_timestamps=np.array(test_s.timestamps),
        seeds=(),
        best_seed=None,
        config={"lag": lag, "train_days": train_days, "test_days": test_days},
    )


def run_nonprivate(
    series: MobilitySeries,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    seeds: Sequence[int],
    lag: int = 6,
    train_days: int = 65,
    test_days: int = 7,
    scale: bool = True,
    jobs: int = 1,
) -> RunArtifact:
    """Plain-Adam pipeline; the best of the seeded runs (by mean RMSE) wins."""
    prepared = prepare(series, lag, train_days, test_days, scale)
    opt = NonPrivateConfig(train_cfg.batch_size, train_cfg.epochs, train_cfg.learning_rate)
    results = _run_seeds(prepared, model_cfg, opt, seeds, jobs)
    best = _best(results)
    return RunArtifact(
        run_kind="nonprivate",
        region_labels=series.region_labels,
        metrics=best.metrics,
        predictions=best.predictions,
        y_true=prepared.raw_test_targets,
        target_timestamps=prepared.target_timestamps,
        seeds=tuple(seeds),
        best_seed=best.seed,
        per_seed=results,
        config={
            "model": vars(model_cfg) | {},
            "train": vars(train_cfg) | {},
            "lag": lag, "train_days": train_days, "test_days": test_days,
            "scale": scale,
        },
        scaler_state=prepared.scaler.to_dict(),
        params=best.params,
        train_log=best.train_log,
    )


def run_gradient_perturbation(
    series: MobilitySeries,
    model_cfg: ModelConfig,
    dp_cfg: DpSgdConfig,
    delta: float,
    seeds: Sequence[int],
    lag: int = 6,
    train_days: int = 65,
    test_days: int = 7,
    scale: bool = True,
    jobs: int = 1,
) -> RunArtifact:
    """DP-Adam pipeline with an RDP accountant attached to the artifact.

    The per-sample epsilon comes from the accountant run at the sampling
    rate ``batch_size / n_train_slots`` over the exact step count the
    training log reports; the worst-case total assumes one user present in
    every training slot (sequential composition).
    """
    if dp_cfg.noise_multiplier <= 0:
        raise MechanismValidityError(
            "gradient perturbation requires noise_multiplier > 0; "
            "a zero-noise run has no finite privacy guarantee"
        )
    prepared = prepare(series, lag, train_days, test_days, scale)
    n_basis = prepared.n_train_slots
    if not delta_budget_check(delta, n_basis):
        raise BudgetError(
            f"delta={delta} fails the budget check over {n_basis} samples; "
            f"need delta < {1.0 / (n_basis * n_basis):.3e}"
        )
    results = _run_seeds(prepared, model_cfg, dp_cfg, seeds, jobs)
    best = _best(results)
    q = dp_cfg.batch_size / n_basis
    steps = best.train_log.step_count
    epsilon, order = compute_epsilon(q, dp_cfg.noise_multiplier, steps, delta)
    ledger = BudgetLedger.uniform(epsilon, delta, count=n_basis, n_population=n_basis)
    eps_total, delta_total = ledger.total()
    privacy = {
        "mechanism": "dp-sgd",
        "epsilon": epsilon,
        "delta": delta,
        "epsilon_total": eps_total,
        "delta_total": delta_total,
        "q": q,
        "noise_multiplier": dp_cfg.noise_multiplier,
        "l2_norm_clip": dp_cfg.l2_norm_clip,
        "steps": steps,
        "best_order": order,
        "n_basis": n_basis,
    }
    return RunArtifact(
        run_kind="gradient",
        region_labels=series.region_labels,
        metrics=best.metrics,
        predictions=best.predictions,
        y_true=prepared.raw_test_targets,
        target_timestamps=prepared.target_timestamps,
        seeds=tuple(seeds),
        best_seed=best.seed,
        per_seed=results,
        config={
            "model": vars(model_cfg) | {},
            "dp": {
                "l2_norm_clip": dp_cfg.l2_norm_clip,
                "noise_multiplier": dp_cfg.noise_multiplier,
                "num_microbatches": dp_cfg.num_microbatches,
                "batch_size": dp_cfg.batch_size,
                "epochs": dp_cfg.epochs,
                "learning_rate": dp_cfg.learning_rate,
            },
            "delta": delta,
            "lag": lag, "train_days": train_days, "test_days": test_days,
            "scale": scale,
        },
        privacy=privacy,
        scaler_state=prepared.scaler.to_dict(),
        params=best.params,
        train_log=best.train_log,
    )


@dataclass
class InputRelease:
    """Output of the one raw-data touchpoint of the input-perturbation run.

    Everything downstream receives only this object: the sanitized series
    plus a detached copy of the raw test targets used for scoring. The raw
    training counts are unreachable from it.
    """

    sanitized: MobilitySeries
    raw_test_counts: np.ndarray
    n_train_slots: int


def input_release(
    series: MobilitySeries,
    params: PrivacyParams,
    rng: RngStream,
    train_days: int = 65,
    test_days: int = 7,
) -> InputRelease:
    """Sanitize the whole series and detach the raw test targets."""
    sanitized = sanitize_series(series, params, rng)
    raw_train, raw_test = split(series, train_days, test_days)
    return InputRelease(
        sanitized=sanitized,
        raw_test_counts=np.array(raw_test.counts, dtype=np.float64, subok=False),
        n_train_slots=raw_train.n_slots,
    )


def run_input_perturbation(
    series: MobilitySeries,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    privacy_params: PrivacyParams,
    seeds: Sequence[int],
    lag: int = 6,
    train_days: int = 65,
    test_days: int = 7,
    scale: bool = True,
    jobs: int = 1,
) -> RunArtifact:
    """Sanitize-then-train pipeline.

    The series is sanitized once (training inputs, training targets, and
    test inputs are all noisy); the scaler is fitted on the sanitized
    training windows; metrics compare predictions with the raw test
    targets. The privacy ledger composes one release per training slot.
    """
    sigma = gaussian_sigma(
        privacy_params.l2_sensitivity, privacy_params.epsilon, privacy_params.delta
    )
    release = input_release(
        series, privacy_params, RngStream(seeds[0]).child(_SANITIZE_STREAM),
        train_days, test_days,
    )
    artifact = fit_release(
        release, model_cfg, train_cfg, seeds,
        lag=lag, train_days=train_days, test_days=test_days, scale=scale, jobs=jobs,
    )
    ledger = BudgetLedger.uniform(
        privacy_params.epsilon, privacy_params.delta,
        count=release.n_train_slots, n_population=release.n_train_slots,
    )
    eps_total, delta_total = ledger.total()
    artifact.privacy = {
        "mechanism": "gaussian-input",
        "epsilon": privacy_params.epsilon,
        "delta": privacy_params.delta,
        "l2_sensitivity": privacy_params.l2_sensitivity,
        "sigma": sigma,
        "epsilon_total": eps_total,
        "delta_total": delta_total,
        "n_releases": release.n_train_slots,
        "n_basis": release.n_train_slots,
    }
    artifact.config |= {
        "privacy": {
            "epsilon": privacy_params.epsilon,
            "delta": privacy_params.delta,
            "sensitivity": privacy_params.l2_sensitivity,
        }
    }
    return artifact


def fit_release(
    release: InputRelease,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    seeds: Sequence[int],
    lag: int = 6,
    train_days: int = 65,
    test_days: int = 7,
    scale: bool = True,
    jobs: int = 1,
) -> RunArtifact:
    """Train and score on an :class:`InputRelease`; never sees raw data."""
    prepared = prepare(release.sanitized, lag, train_days, test_days, scale)
    prepared.raw_test_targets = release.raw_test_counts
    opt = NonPrivateConfig(train_cfg.batch_size, train_cfg.epochs, train_cfg.learning_rate)
    results = _run_seeds(prepared, model_cfg, opt, seeds, jobs)
    best = _best(results)
    return RunArtifact(
        run_kind="input",
        region_labels=release.sanitized.region_labels,
        metrics=best.metrics,
        predictions=best.predictions,
        y_true=release.raw_test_counts,
        target_timestamps=prepared.target_timestamps,
        seeds=tuple(seeds),
        best_seed=best.seed,
        per_seed=results,
        config={
            "model": vars(model_cfg) | {},
            "train": vars(train_cfg) | {},
            "lag": lag, "train_days": train_days, "test_days": test_days,
            "scale": scale,
        },
        scaler_state=prepared.scaler.to_dict(),
        params=best.params,
        train_log=best.train_log,
    )
