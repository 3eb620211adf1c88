"""Recurrent cells (LSTM, GRU), bidirectional networks, and exact BPTT.

Parameters live in a flat ``dict[str, np.ndarray]`` keyed by direction
prefix plus tensor name. One direction of a GRU holds

    W_z, W_r, W_c : (d, h)   input weights (update, reset, candidate)
    U_z, U_r, U_c : (h, h)   recurrent weights
    b_z, b_r, b_c : (h,)     biases

and one direction of an LSTM holds

    W_xi, W_xf, W_xo, W_xg : (d, h)
    W_hi, W_hf, W_ho, W_hg : (h, h)
    b_i,  b_f,  b_o,  b_g  : (h,)

Keys are prefixed ``fw_`` (always) and ``bw_`` (bidirectional only); the
dense output layer is ``out_W`` (H, output) and ``out_b`` (output,) with
H = hidden or 2*hidden under bidirectional concatenation.

Step equations, with x_t the input row and ⊗ elementwise:

    GRU:   z = sigmoid(x W_z + h U_z + b_z)
           r = sigmoid(x W_r + h U_r + b_r)
           c = act(x W_c + (r ⊗ h) U_c + b_c)
           h' = (1 - z) ⊗ h + z ⊗ c

    LSTM:  i, f, o = sigmoid(x W_x* + h W_h* + b_*)
           g = act(x W_xg + h W_hg + b_g)
           c' = f ⊗ c + i ⊗ g
           h' = o ⊗ act(c')

``act`` is tanh or relu; gates are always sigmoid. The loss everywhere is
per-example MAE over output coordinates, with the subgradient at a zero
residual defined as 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .core import RngStream

Params = dict[str, np.ndarray]

GRU_INPUT = ("W_z", "W_r", "W_c")
GRU_RECUR = ("U_z", "U_r", "U_c")
GRU_BIAS = ("b_z", "b_r", "b_c")
LSTM_INPUT = ("W_xi", "W_xf", "W_xo", "W_xg")
LSTM_RECUR = ("W_hi", "W_hf", "W_ho", "W_hg")
LSTM_BIAS = ("b_i", "b_f", "b_o", "b_g")


class StaleTapeError(RuntimeError):
    """Raised when backward() is given a tape from different parameters."""


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a single-hidden-layer recurrent forecaster.

    ``output_size`` equals the number of regions being forecast. The
    bidirectional merge is concatenation of the two final hidden states.
    """

    cell: str = "gru"
    bidirectional: bool = True
    hidden_size: int = 32
    input_size: int = 1
    output_size: int = 1
    activation: str = "relu"

    def __post_init__(self):
        if self.cell not in ("lstm", "gru"):
            raise ValueError(f"cell must be 'lstm' or 'gru', got {self.cell!r}")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"activation must be 'relu' or 'tanh', got {self.activation!r}")
        if self.hidden_size < 1 or self.input_size < 1 or self.output_size < 1:
            raise ValueError("hidden_size, input_size and output_size must be >= 1")

    @property
    def directions(self) -> tuple[str, ...]:
        return ("fw", "bw") if self.bidirectional else ("fw",)

    @property
    def dense_input(self) -> int:
        return self.hidden_size * len(self.directions)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def _act(a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(a)
    return np.maximum(a, 0.0)


def _act_grad(pre: np.ndarray, out: np.ndarray, kind: str) -> np.ndarray:
    # tanh' from the activation output; relu' from the pre-activation,
    # with the subgradient at exactly 0 taken as 0.
    if kind == "tanh":
        return 1.0 - out * out
    return (pre > 0).astype(np.float64)


def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Deterministically ordered name -> shape map for ``spec``."""
    d, h = spec.input_size, spec.hidden_size
    if spec.cell == "gru":
        groups = [(GRU_INPUT, (d, h)), (GRU_RECUR, (h, h)), (GRU_BIAS, (h,))]
    else:
        groups = [(LSTM_INPUT, (d, h)), (LSTM_RECUR, (h, h)), (LSTM_BIAS, (h,))]
    shapes: dict[str, tuple[int, ...]] = {}
    for direction in spec.directions:
        for names, shape in groups:
            for name in names:
                shapes[f"{direction}_{name}"] = shape
    shapes["out_W"] = (spec.dense_input, spec.output_size)
    shapes["out_b"] = (spec.output_size,)
    return shapes


def init_params(spec: ModelSpec, rng: RngStream) -> Params:
    """Glorot-uniform weights (per-gate fans), zero biases."""
    gen = rng.generator()
    params: Params = {}
    for name, shape in param_shapes(spec).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = gen.uniform(-bound, bound, size=shape)
    return params


def direction_view(params: Mapping[str, np.ndarray], direction: str) -> Params:
    """Un-prefixed view of one direction's cell parameters."""
    prefix = direction + "_"
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def _check_vec(x, dim: int, name: str):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != dim:
        raise ValueError(f"{name} has trailing dimension {x.shape[-1]}, expected {dim}")
    return x


def lstm_step(p: Mapping[str, np.ndarray], x_t, h_prev, c_prev, activation: str = "tanh"):
    """One LSTM step; returns (h_t, c_t). Accepts (d,)/(h,) or batched rows."""
    d, h = p["W_xi"].shape
    x_t = _check_vec(x_t, d, "x_t")
    h_prev = _check_vec(h_prev, h, "h_prev")
    c_prev = _check_vec(c_prev, h, "c_prev")
    i = _sigmoid(x_t @ p["W_xi"] + h_prev @ p["W_hi"] + p["b_i"])
    f = _sigmoid(x_t @ p["W_xf"] + h_prev @ p["W_hf"] + p["b_f"])
    o = _sigmoid(x_t @ p["W_xo"] + h_prev @ p["W_ho"] + p["b_o"])
    g = _act(x_t @ p["W_xg"] + h_prev @ p["W_hg"] + p["b_g"], activation)
    c_t = f * c_prev + i * g
    h_t = o * _act(c_t, activation)
    return h_t, c_t


def gru_step(p: Mapping[str, np.ndarray], x_t, h_prev, activation: str = "tanh"):
    """One GRU step; returns h_t. Accepts (d,)/(h,) or batched rows."""
    d, h = p["W_z"].shape
    x_t = _check_vec(x_t, d, "x_t")
    h_prev = _check_vec(h_prev, h, "h_prev")
    z = _sigmoid(x_t @ p["W_z"] + h_prev @ p["U_z"] + p["b_z"])
    r = _sigmoid(x_t @ p["W_r"] + h_prev @ p["U_r"] + p["b_r"])
    c = _act(x_t @ p["W_c"] + (r * h_prev) @ p["U_c"] + p["b_c"], activation)
    return (1.0 - z) * h_prev + z * c


@dataclass
class _DirectionCache:
    # All arrays are (T, n, h); xs is the direction-ordered input (n, T, d).
    xs: np.ndarray
    h_prev: list = field(default_factory=list)
    # GRU
    z: list = field(default_factory=list)
    r: list = field(default_factory=list)
    c: list = field(default_factory=list)
    a_c: list = field(default_factory=list)
    # LSTM
    i: list = field(default_factory=list)
    f: list = field(default_factory=list)
    o: list = field(default_factory=list)
    g: list = field(default_factory=list)
    a_g: list = field(default_factory=list)
    c_prev: list = field(default_factory=list)
    c_t: list = field(default_factory=list)
    act_c: list = field(default_factory=list)
    final: np.ndarray | None = None


@dataclass
class ForwardTape:
    """Intermediates retained by forward() for exact backpropagation."""

    spec: ModelSpec
    params: Mapping[str, np.ndarray]
    caches: dict[str, _DirectionCache]
    h_cat: np.ndarray
    prediction: np.ndarray

    @property
    def direction_finals(self) -> dict[str, np.ndarray]:
        return {d: c.final for d, c in self.caches.items()}


def _run_direction(spec: ModelSpec, dp: Params, xs: np.ndarray) -> _DirectionCache:
    n, T, _ = xs.shape
    h = np.zeros((n, spec.hidden_size))
    cache = _DirectionCache(xs=xs)
    if spec.cell == "gru":
        for t in range(T):
            x_t = xs[:, t, :]
            a_z = x_t @ dp["W_z"] + h @ dp["U_z"] + dp["b_z"]
            a_r = x_t @ dp["W_r"] + h @ dp["U_r"] + dp["b_r"]
            z = _sigmoid(a_z)
            r = _sigmoid(a_r)
            a_c = x_t @ dp["W_c"] + (r * h) @ dp["U_c"] + dp["b_c"]
            c = _act(a_c, spec.activation)
            cache.h_prev.append(h)
            cache.z.append(z)
            cache.r.append(r)
            cache.c.append(c)
            cache.a_c.append(a_c)
            h = (1.0 - z) * h + z * c
    else:
        c_state = np.zeros((n, spec.hidden_size))
        for t in range(T):
            x_t = xs[:, t, :]
            i = _sigmoid(x_t @ dp["W_xi"] + h @ dp["W_hi"] + dp["b_i"])
            f = _sigmoid(x_t @ dp["W_xf"] + h @ dp["W_hf"] + dp["b_f"])
            o = _sigmoid(x_t @ dp["W_xo"] + h @ dp["W_ho"] + dp["b_o"])
            a_g = x_t @ dp["W_xg"] + h @ dp["W_hg"] + dp["b_g"]
            g = _act(a_g, spec.activation)
            c_t = f * c_state + i * g
            act_c = _act(c_t, spec.activation)
            cache.h_prev.append(h)
            cache.c_prev.append(c_state)
            cache.i.append(i)
            cache.f.append(f)
            cache.o.append(o)
            cache.g.append(g)
            cache.a_g.append(a_g)
            cache.c_t.append(c_t)
            cache.act_c.append(act_c)
            h = o * act_c
            c_state = c_t
    cache.final = h
    return cache


def forward_batch(spec: ModelSpec, params: Mapping[str, np.ndarray], windows: np.ndarray):
    """Run the network over a batch of windows (n, lag, d).

    Initial hidden (and cell) states are zero for every window; the
    backward direction consumes the reversed window. Returns
    ``(predictions (n, output), tape)``.
    """
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 3:
        raise ValueError(f"windows must be 3-d (n, lag, d), got shape {windows.shape}")
    if windows.shape[1] < 1:
        raise ValueError("window must contain at least one step")
    if windows.shape[2] != spec.input_size:
        raise ValueError(
            f"window feature size {windows.shape[2]} != spec input_size {spec.input_size}"
        )
    caches: dict[str, _DirectionCache] = {}
    finals = []
    for direction in spec.directions:
        xs = windows if direction == "fw" else windows[:, ::-1, :]
        cache = _run_direction(spec, direction_view(params, direction), xs)
        caches[direction] = cache
        finals.append(cache.final)
    h_cat = np.concatenate(finals, axis=1) if len(finals) > 1 else finals[0]
    prediction = h_cat @ params["out_W"] + params["out_b"]
    return prediction, ForwardTape(spec, params, caches, h_cat, prediction)


def forward(spec: ModelSpec, params: Mapping[str, np.ndarray], window: np.ndarray):
    """Single-window forward pass; returns ``(prediction (output,), tape)``."""
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2:
        raise ValueError(f"window must be 2-d (lag, d), got shape {window.shape}")
    pred, tape = forward_batch(spec, params, window[None])
    return pred[0], tape


def _outer(x: np.ndarray, d: np.ndarray, per_example: bool) -> np.ndarray:
    if per_example:
        return np.einsum("ni,nj->nij", x, d)
    return x.T @ d


def _backprop_direction(
    spec: ModelSpec,
    dp: Params,
    cache: _DirectionCache,
    dh_final: np.ndarray,
    per_example: bool,
) -> Params:
    n, T, _ = cache.xs.shape
    act = spec.activation

    def zeros(name: str) -> np.ndarray:
        shape = dp[name].shape
        return np.zeros((n,) + shape) if per_example else np.zeros(shape)

    if spec.cell == "gru":
        grads = {k: zeros(k) for k in GRU_INPUT + GRU_RECUR + GRU_BIAS}
        dh = dh_final
        for t in reversed(range(T)):
            x_t = cache.xs[:, t, :]
            z, r, c, a_c, h_prev = (
                cache.z[t], cache.r[t], cache.c[t], cache.a_c[t], cache.h_prev[t],
            )
            dz = dh * (c - h_prev)
            dc = dh * z
            dh_prev = dh * (1.0 - z)
            da_c = dc * _act_grad(a_c, c, act)
            d_rh = da_c @ dp["U_c"].T
            dr = d_rh * h_prev
            dh_prev = dh_prev + d_rh * r
            da_z = dz * z * (1.0 - z)
            da_r = dr * r * (1.0 - r)
            dh_prev = dh_prev + da_z @ dp["U_z"].T + da_r @ dp["U_r"].T
            grads["W_z"] += _outer(x_t, da_z, per_example)
            grads["W_r"] += _outer(x_t, da_r, per_example)
            grads["W_c"] += _outer(x_t, da_c, per_example)
            grads["U_z"] += _outer(h_prev, da_z, per_example)
            grads["U_r"] += _outer(h_prev, da_r, per_example)
            grads["U_c"] += _outer(r * h_prev, da_c, per_example)
            grads["b_z"] += da_z if per_example else da_z.sum(axis=0)
            grads["b_r"] += da_r if per_example else da_r.sum(axis=0)
            grads["b_c"] += da_c if per_example else da_c.sum(axis=0)
            dh = dh_prev
    else:
        grads = {k: zeros(k) for k in LSTM_INPUT + LSTM_RECUR + LSTM_BIAS}
        dh = dh_final
        dc = np.zeros_like(dh_final)
        for t in reversed(range(T)):
            x_t = cache.xs[:, t, :]
            i, f, o, g = cache.i[t], cache.f[t], cache.o[t], cache.g[t]
            a_g, c_prev, c_t, act_c = (
                cache.a_g[t], cache.c_prev[t], cache.c_t[t], cache.act_c[t],
            )
            h_prev = cache.h_prev[t]
            do = dh * act_c
            dc_t = dc + dh * o * _act_grad(c_t, act_c, act)
            df = dc_t * c_prev
            di = dc_t * g
            dg = dc_t * i
            da_o = do * o * (1.0 - o)
            da_f = df * f * (1.0 - f)
            da_i = di * i * (1.0 - i)
            da_g = dg * _act_grad(a_g, g, act)
            dc = dc_t * f
            dh = (
                da_i @ dp["W_hi"].T
                + da_f @ dp["W_hf"].T
                + da_o @ dp["W_ho"].T
                + da_g @ dp["W_hg"].T
            )
            grads["W_xi"] += _outer(x_t, da_i, per_example)
            grads["W_xf"] += _outer(x_t, da_f, per_example)
            grads["W_xo"] += _outer(x_t, da_o, per_example)
            grads["W_xg"] += _outer(x_t, da_g, per_example)
            grads["W_hi"] += _outer(h_prev, da_i, per_example)
            grads["W_hf"] += _outer(h_prev, da_f, per_example)
            grads["W_ho"] += _outer(h_prev, da_o, per_example)
            grads["W_hg"] += _outer(h_prev, da_g, per_example)
            grads["b_i"] += da_i if per_example else da_i.sum(axis=0)
            grads["b_f"] += da_f if per_example else da_f.sum(axis=0)
            grads["b_o"] += da_o if per_example else da_o.sum(axis=0)
            grads["b_g"] += da_g if per_example else da_g.sum(axis=0)
    return grads


def backward_batch(
    spec: ModelSpec,
    params: Mapping[str, np.ndarray],
    tape: ForwardTape,
    targets: np.ndarray,
    loss: str = "mae",
    reduce: str = "mean",
) -> Params:
    """Gradients of per-example MAE w.r.t. every parameter tensor.

    ``reduce="mean"`` returns the average gradient over the batch;
    ``reduce="stack"`` returns per-example gradients with a leading batch
    axis on every tensor.
    """
    if loss != "mae":
        raise ValueError(f"unsupported loss {loss!r}")
    if reduce not in ("mean", "stack"):
        raise ValueError(f"reduce must be 'mean' or 'stack', got {reduce!r}")
    if tape.params is not params:
        raise StaleTapeError("tape was produced by a different parameter set")
    targets = np.asarray(targets, dtype=np.float64)
    pred = tape.prediction
    if targets.shape != pred.shape:
        raise ValueError(f"targets shape {targets.shape} != predictions {pred.shape}")
    n, out = pred.shape
    per_example = reduce == "stack"
    h = spec.hidden_size

    dpred = np.sign(pred - targets) / out
    grads: Params = {}
    grads["out_W"] = _outer(tape.h_cat, dpred, per_example)
    grads["out_b"] = dpred if per_example else dpred.sum(axis=0)
    dh_cat = dpred @ params["out_W"].T
    for k, direction in enumerate(spec.directions):
        dh_final = dh_cat[:, k * h:(k + 1) * h]
        dgrads = _backprop_direction(
            spec, direction_view(params, direction), tape.caches[direction],
            dh_final, per_example,
        )
        for name, g in dgrads.items():
            grads[f"{direction}_{name}"] = g
    if not per_example:
        grads = {k: v / n for k, v in grads.items()}
    return grads


def backward(
    spec: ModelSpec,
    params: Mapping[str, np.ndarray],
    tape: ForwardTape,
    target: np.ndarray,
    loss: str = "mae",
) -> Params:
    """Single-example gradient of MAE; ``tape`` must come from forward()."""
    target = np.asarray(target, dtype=np.float64)
    if target.ndim == 1:
        target = target[None]
    return backward_batch(spec, params, tape, target, loss=loss, reduce="mean")


def save_params(path, params: Mapping[str, np.ndarray]) -> None:
    """Write parameters as a named-tensor archive; round-trips bit-exactly."""
    np.savez(path, **{k: np.asarray(v) for k, v in params.items()})


def load_params(path) -> Params:
    with np.load(path) as data:
        return {k: data[k] for k in data.files}
