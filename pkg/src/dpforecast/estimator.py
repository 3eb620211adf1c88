"""Scikit-learn style estimator wrapping the recurrent network and optimizers."""

from __future__ import annotations

import inspect
from types import SimpleNamespace

import numpy as np

from .core import RngStream
from .nn import ModelSpec, forward_batch, init_params
from .optim import DpSgdConfig, NonPrivateConfig, train
from .validation import check_windows

# Fixed sub-stream ids so initialization and batching draw independent noise.
_INIT_STREAM = 1
_TRAIN_STREAM = 2


class RecurrentForecaster:
    """One-step-ahead multivariate forecaster (LSTM/GRU, optionally Bi-).

    Follows the fit/predict estimator protocol: hyperparameters are
    constructor arguments exposed through ``get_params``/``set_params``,
    ``fit`` consumes windows of shape (n, lag, d) with targets
    (n, regions), and ``predict`` maps windows to next-slot forecasts.
    Training minimizes MAE with Adam; setting ``noise_multiplier`` (with
    ``l2_norm_clip`` and ``num_microbatches``) switches to the
    differentially private clip-and-noise variant. Everything is
    deterministic given ``seed``.
    """

    def __init__(
        self,
        cell: str = "gru",
        bidirectional: bool = True,
        hidden_size: int = 32,
        activation: str = "relu",
        learning_rate: float = 1e-3,
        batch_size: int = 32,
        epochs: int = 100,
        l2_norm_clip: float | None = None,
        noise_multiplier: float | None = None,
        num_microbatches: int | None = None,
        seed: int = 0,
    ):
        self.cell = cell
        self.bidirectional = bidirectional
        self.hidden_size = hidden_size
        self.activation = activation
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.l2_norm_clip = l2_norm_clip
        self.noise_multiplier = noise_multiplier
        self.num_microbatches = num_microbatches
        self.seed = seed

    @classmethod
    def _param_names(cls) -> list[str]:
        sig = inspect.signature(cls.__init__)
        return [p for p in sig.parameters if p != "self"]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params) -> "RecurrentForecaster":
        valid = set(self._param_names())
        for key, value in params.items():
            if key not in valid:
                raise ValueError(f"unknown parameter {key!r} for RecurrentForecaster")
            setattr(self, key, value)
        return self

    @property
    def is_private(self) -> bool:
        return self.noise_multiplier is not None

    def _training_config(self):
        if self.is_private:
            if self.l2_norm_clip is None or self.num_microbatches is None:
                raise ValueError(
                    "private training needs l2_norm_clip and num_microbatches "
                    "alongside noise_multiplier"
                )
            return DpSgdConfig(
                l2_norm_clip=self.l2_norm_clip,
                noise_multiplier=self.noise_multiplier,
                num_microbatches=self.num_microbatches,
                batch_size=self.batch_size,
                epochs=self.epochs,
                learning_rate=self.learning_rate,
            )
        return NonPrivateConfig(
            batch_size=self.batch_size,
            epochs=self.epochs,
            learning_rate=self.learning_rate,
        )

    def fit(self, X, y) -> "RecurrentForecaster":
        X, y = check_windows(X, y)
        self.spec_ = ModelSpec(
            cell=self.cell,
            bidirectional=self.bidirectional,
            hidden_size=self.hidden_size,
            input_size=X.shape[2],
            output_size=y.shape[1],
            activation=self.activation,
        )
        base = RngStream(self.seed)
        params0 = init_params(self.spec_, base.child(_INIT_STREAM))
        dataset = SimpleNamespace(inputs=X, targets=y)
        self.params_, self.train_log_ = train(
            self.spec_, params0, dataset, self._training_config(),
            base.child(_TRAIN_STREAM),
        )
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise RuntimeError("estimator is not fitted; call fit(X, y) first")

    def predict(self, X) -> np.ndarray:
        self._check_fitted()
        X = check_windows(X)
        preds, _ = forward_batch(self.spec_, self.params_, X)
        return preds

    def score(self, X, y) -> float:
        """Negative mean absolute error (greater is better)."""
        y = np.asarray(y, dtype=np.float64)
        return -float(np.mean(np.abs(self.predict(X) - y)))
