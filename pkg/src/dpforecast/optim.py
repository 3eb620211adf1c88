"""Adam and DP-Adam (clip-and-noise) optimizers plus the training loop.

The differentially private path bounds each microbatch's influence by
clipping its gradient to a global L2 norm ``C``, adds a single draw of
``N(0, (noise_multiplier * C)^2)`` Gaussian noise to the clipped sum, and
normalizes by the number of microbatches. A microbatch of size one is a
single training example, which is the granularity the privacy analysis
assumes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np

from .core import RngStream, l2_norm
from .nn import ModelSpec, Params, backward_batch, forward_batch


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite."""

    def __init__(self, epoch: int):
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class NonPrivateConfig:
    """Plain Adam training configuration."""

    batch_size: int
    epochs: int
    learning_rate: float

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate <= 0:
            raise ValueError("batch_size >= 1, epochs >= 0, learning_rate > 0 required")


@dataclass(frozen=True)
class DpSgdConfig:
    """DP-Adam configuration; num_microbatches must divide batch_size."""

    l2_norm_clip: float
    noise_multiplier: float
    num_microbatches: int
    batch_size: int
    epochs: int
    learning_rate: float

    def __post_init__(self):
        if self.l2_norm_clip <= 0:
            raise ValueError("l2_norm_clip must be positive")
        if self.noise_multiplier < 0:
            raise ValueError("noise_multiplier must be nonnegative")
        if self.num_microbatches < 1 or self.batch_size % self.num_microbatches != 0:
            raise ValueError("num_microbatches must be >= 1 and divide batch_size")
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate <= 0:
            raise ValueError("batch_size >= 1, epochs >= 0, learning_rate > 0 required")


def global_norm(g: Mapping[str, np.ndarray]) -> float:
    """L2 norm over all entries of all tensors in ``g``."""
    return math.sqrt(math.fsum(float(np.vdot(v, v)) for v in g.values()))


def clip_to_norm(g: Mapping[str, np.ndarray], clip: float) -> Params:
    """Scale ``g`` down to global norm ``clip`` when it exceeds it."""
    if clip <= 0:
        raise ValueError("clip must be positive")
    norm = global_norm(g)
    if norm <= clip:
        return dict(g)
    scale = clip / norm
    return {k: v * scale for k, v in g.items()}


def dp_aggregate(
    per_microbatch: Sequence[Mapping[str, np.ndarray]],
    clip: float,
    noise_multiplier: float,
    rng: Union[RngStream, np.random.Generator],
) -> Params:
    """Clip each microbatch gradient, sum, noise once, and average.

    Returns ``(1/m) * (sum_i clip(g_i) + N(0, (noise_multiplier*clip)^2 I))``
    with ``m = len(per_microbatch)``. The noise is added entrywise to the
    sum, once per call; with ``noise_multiplier == 0`` no randomness is
    consumed.
    """
    if not per_microbatch:
        raise ValueError("per_microbatch must be nonempty")
    keys = list(per_microbatch[0].keys())
    for g in per_microbatch[1:]:
        if list(g.keys()) != keys or any(
            g[k].shape != per_microbatch[0][k].shape for k in keys
        ):
            raise ValueError("inconsistent gradient shapes across microbatches")
    first = clip_to_norm(per_microbatch[0], clip)
    total: Params = {k: np.array(first[k], dtype=np.float64) for k in keys}
    for g in per_microbatch[1:]:
        clipped = clip_to_norm(g, clip)
        for k in keys:
            total[k] = total[k] + clipped[k]
    if noise_multiplier > 0:
        gen = rng.generator() if isinstance(rng, RngStream) else rng
        scale = noise_multiplier * clip
        for k in keys:
            total[k] = total[k] + scale * gen.standard_normal(size=total[k].shape)
    m = len(per_microbatch)
    return {k: v / m for k, v in total.items()}


@dataclass
class AdamState:
    """First/second moment accumulators with a strictly increasing step count."""

    m: Params
    v: Params
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-7


def init_adam_state(params: Mapping[str, np.ndarray]) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
    )


def adam_step(
    params: Mapping[str, np.ndarray],
    g: Mapping[str, np.ndarray],
    state: AdamState,
    learning_rate: float,
) -> tuple[Params, AdamState]:
    """One bias-corrected Adam update; purely functional."""
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_m, new_v, new_p = {}, {}, {}
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for k, p in params.items():
        gk = g[k]
        mk = b1 * state.m[k] + (1.0 - b1) * gk
        vk = b2 * state.v[k] + (1.0 - b2) * gk * gk
        m_hat = mk / bc1
        v_hat = vk / bc2
        new_m[k] = mk
        new_v[k] = vk
        new_p[k] = p - learning_rate * m_hat / (np.sqrt(v_hat) + state.eps_hat)
    return new_p, AdamState(new_m, new_v, t, b1, b2, state.eps_hat)


@dataclass
class TrainLog:
    """Per-epoch training MAE plus the exact optimizer step count."""

    epoch_mae: list[float] = field(default_factory=list)
    step_count: int = 0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "step_count", "train_mae"])
            steps_per_epoch = (
                self.step_count // len(self.epoch_mae) if self.epoch_mae else 0
            )
            for e, mae in enumerate(self.epoch_mae):
                writer.writerow([e, steps_per_epoch * (e + 1), repr(mae)])


def train(
    spec: ModelSpec,
    params0: Mapping[str, np.ndarray],
    dataset,
    cfg: Union[NonPrivateConfig, DpSgdConfig],
    rng: RngStream,
) -> tuple[Params, TrainLog]:
    """Train over shuffled batches for ``cfg.epochs`` epochs.

    ``dataset`` needs ``inputs`` of shape (n, lag, d) and ``targets`` of
    shape (n, output). Each epoch draws a fresh uniform permutation from
    ``rng`` and drops the incomplete trailing batch, so exactly
    ``epochs * floor(n / batch_size)`` optimizer steps run. A non-private
    config bypasses clipping and noise entirely.
    """
    inputs = np.asarray(dataset.inputs, dtype=np.float64)
    targets = np.asarray(dataset.targets, dtype=np.float64)
    n = inputs.shape[0]
    if n == 0:
        raise ValueError("dataset is empty")
    if cfg.batch_size > n:
        raise ValueError(f"batch_size {cfg.batch_size} exceeds dataset size {n}")
    dp = isinstance(cfg, DpSgdConfig)
    b = cfg.batch_size
    n_batches = n // b
    gen = rng.generator()
    params: Params = dict(params0)
    state = init_adam_state(params)
    log = TrainLog()

    for epoch in range(cfg.epochs):
        perm = gen.permutation(n)
        epoch_losses = []
        for j in range(n_batches):
            idx = perm[j * b:(j + 1) * b]
            xb, yb = inputs[idx], targets[idx]
            if dp:
                grad, batch_mae = _dp_batch_gradient(spec, params, xb, yb, cfg, gen)
            else:
                preds, tape = forward_batch(spec, params, xb)
                batch_mae = float(np.mean(np.abs(preds - yb)))
                grad = backward_batch(spec, params, tape, yb, reduce="mean")
            if not math.isfinite(batch_mae):
                raise TrainingDiverged(epoch)
            params, state = adam_step(params, grad, state, cfg.learning_rate)
            log.step_count += 1
            epoch_losses.append(batch_mae)
        log.epoch_mae.append(float(np.mean(epoch_losses)) if epoch_losses else math.nan)
    return params, log


def _dp_batch_gradient(spec, params, xb, yb, cfg: DpSgdConfig, gen):
    m = cfg.num_microbatches
    size = cfg.batch_size // m
    if size == 1:
        preds, tape = forward_batch(spec, params, xb)
        stacked = backward_batch(spec, params, tape, yb, reduce="stack")
        micro = [{k: v[i] for k, v in stacked.items()} for i in range(m)]
        batch_mae = float(np.mean(np.abs(preds - yb)))
    else:
        micro = []
        maes = []
        for i in range(m):
            sl = slice(i * size, (i + 1) * size)
            preds, tape = forward_batch(spec, params, xb[sl])
            micro.append(backward_batch(spec, params, tape, yb[sl], reduce="mean"))
            maes.append(float(np.mean(np.abs(preds - yb[sl]))))
        batch_mae = float(np.mean(maes))
    grad = dp_aggregate(micro, cfg.l2_norm_clip, cfg.noise_multiplier, gen)
    return grad, batch_mae
