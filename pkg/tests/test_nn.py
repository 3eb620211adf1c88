"""Cell equations, network forward/backward, and gradient oracles."""

import math

import numpy as np
import pytest

from dpforecast import (
    ModelSpec,
    RngStream,
    StaleTapeError,
    backward,
    backward_batch,
    finite_diff_grad,
    forward,
    forward_batch,
    gru_step,
    init_params,
    load_params,
    lstm_step,
    save_params,
)
from dpforecast.nn import param_shapes


def zero_params(spec):
    return {k: np.zeros(s) for k, s in param_shapes(spec).items()}


def gru_dir_params(W_z=0.0, U_z=0.0, b_z=0.0, W_r=0.0, U_r=0.0, b_r=0.0,
                   W_c=0.0, U_c=0.0, b_c=0.0):
    return {
        "W_z": np.array([[W_z]]), "U_z": np.array([[U_z]]), "b_z": np.array([b_z]),
        "W_r": np.array([[W_r]]), "U_r": np.array([[U_r]]), "b_r": np.array([b_r]),
        "W_c": np.array([[W_c]]), "U_c": np.array([[U_c]]), "b_c": np.array([b_c]),
    }


class TestInitParams:
    def test_weights_within_per_gate_bound(self):
        spec = ModelSpec("gru", False, 25, 10, 4)
        params = init_params(spec, RngStream(0))
        bound_in = math.sqrt(6.0 / (10 + 25))
        bound_rec = math.sqrt(6.0 / (25 + 25))
        for name in ("fw_W_z", "fw_W_r", "fw_W_c"):
            assert np.all(np.abs(params[name]) <= bound_in)
        for name in ("fw_U_z", "fw_U_r", "fw_U_c"):
            assert np.all(np.abs(params[name]) <= bound_rec)

    def test_tiny_spec_bound(self):
        spec = ModelSpec("lstm", False, 1, 1, 1)
        params = init_params(spec, RngStream(1))
        for name, value in params.items():
            if value.ndim == 2:
                rows, cols = value.shape
                assert np.all(np.abs(value) <= math.sqrt(6.0 / (rows + cols)))

    def test_biases_zero_and_seed_reproducible(self):
        spec = ModelSpec("gru", True, 3, 2, 2)
        a = init_params(spec, RngStream(9))
        b = init_params(spec, RngStream(9))
        for name in a:
            assert np.array_equal(a[name], b[name])
            if name.endswith(("b_z", "b_r", "b_c", "out_b")):
                assert np.all(a[name] == 0.0)


class TestLstmStep:
    def test_zero_fixed_point(self):
        p = {k: np.zeros((1, 1)) if k.startswith("W") else np.zeros(1)
             for k in ("W_xi", "W_xf", "W_xo", "W_xg", "W_hi", "W_hf", "W_ho", "W_hg",
                        "b_i", "b_f", "b_o", "b_g")}
        h, c = lstm_step(p, np.zeros(1), np.zeros(1), np.zeros(1), activation="tanh")
        assert np.all(h == 0.0) and np.all(c == 0.0)

    def test_hand_evaluated_gate_equations(self):
        # All weights and biases zero except b_g = 10: gates are 0.5, the
        # candidate saturates to tanh(10), so c = 0.5*tanh(10) and
        # h = 0.5*tanh(c).
        p = {k: np.zeros((1, 1)) if k.startswith("W") else np.zeros(1)
             for k in ("W_xi", "W_xf", "W_xo", "W_xg", "W_hi", "W_hf", "W_ho", "W_hg",
                        "b_i", "b_f", "b_o", "b_g")}
        p["b_g"] = np.array([10.0])
        h, c = lstm_step(p, np.zeros(1), np.zeros(1), np.zeros(1), activation="tanh")
        assert c[0] == pytest.approx(0.49999999793884636, abs=1e-12)
        assert h[0] == pytest.approx(0.2310585778195101, abs=1e-12)

    def test_relu_kills_candidate(self):
        p = {k: np.zeros((1, 1)) if k.startswith("W") else np.zeros(1)
             for k in ("W_xi", "W_xf", "W_xo", "W_xg", "W_hi", "W_hf", "W_ho", "W_hg",
                        "b_i", "b_f", "b_o", "b_g")}
        p["b_g"] = np.array([-4.0])
        c_prev = np.array([0.8])
        h, c = lstm_step(p, np.zeros(1), np.zeros(1), c_prev, activation="relu")
        # f = 0.5 exactly, g = relu(-4) = 0, so c = f * c_prev exactly
        assert c[0] == 0.5 * 0.8

    def test_shape_mismatch_rejected(self):
        p = {k: np.zeros((2, 3)) if k.startswith("W_x") else
             (np.zeros((3, 3)) if k.startswith("W_h") else np.zeros(3))
             for k in ("W_xi", "W_xf", "W_xo", "W_xg", "W_hi", "W_hf", "W_ho", "W_hg",
                        "b_i", "b_f", "b_o", "b_g")}
        with pytest.raises(ValueError):
            lstm_step(p, np.zeros(5), np.zeros(3), np.zeros(3))


class TestGruStep:
    def test_zero_fixed_point(self):
        h = gru_step(gru_dir_params(), np.zeros(1), np.zeros(1), activation="tanh")
        assert np.all(h == 0.0)

    def test_halving_with_zero_weights(self):
        v = np.array([0.62])
        h = gru_step(gru_dir_params(), np.zeros(1), v, activation="tanh")
        # z = r = 0.5 and the candidate is act(0) = 0, so h = (1-z) v = v/2
        assert h[0] == pytest.approx(0.31, abs=1e-15)

    def test_hand_evaluated_update(self):
        # W_z = W_c = 1, everything else 0, x = 2, h_prev = 0.7:
        # z = sigmoid(2), r = 0.5, c = tanh(2), h = (1-z)*0.7 + z*c.
        p = gru_dir_params(W_z=1.0, W_c=1.0)
        h = gru_step(p, np.array([2.0]), np.array([0.7]), activation="tanh")
        z = 0.8807970779778823
        expected = (1 - z) * 0.7 + z * 0.9640275800758169
        assert h[0] == pytest.approx(expected, abs=1e-12)
        assert h[0] == pytest.approx(0.9325547210363508, abs=1e-12)

    def test_gate_convention_keeps_history_when_update_closed(self):
        # Strongly negative update-gate bias forces z ~ 0 and h ~ h_prev.
        p = gru_dir_params(b_z=-30.0, W_c=1.0)
        h = gru_step(p, np.array([2.0]), np.array([0.7]), activation="tanh")
        assert h[0] == pytest.approx(0.7, abs=1e-9)


class TestForward:
    def test_zero_params_returns_dense_bias(self):
        spec = ModelSpec("gru", True, 3, 2, 2, "relu")
        params = zero_params(spec)
        params["out_b"] = np.array([1.5, -2.0])
        pred, _ = forward(spec, params, np.ones((4, 2)))
        np.testing.assert_allclose(pred, [1.5, -2.0], atol=0)

    def test_palindromic_window_symmetry(self):
        spec = ModelSpec("gru", True, 3, 2, 2, "tanh")
        params = init_params(spec, RngStream(3))
        for name in list(params):
            if name.startswith("bw_"):
                params[name] = params["fw_" + name[3:]].copy()
        window = np.array([[0.1, -0.4], [1.0, 0.2], [0.1, -0.4]])
        _, tape = forward(spec, params, window)
        finals = tape.direction_finals
        np.testing.assert_allclose(finals["fw"], finals["bw"], atol=1e-15)

    def test_matches_chained_gru_steps(self):
        spec = ModelSpec("gru", False, 1, 1, 1, "tanh")
        dirp = gru_dir_params(W_z=0.8, U_z=0.3, W_r=-0.5, U_r=0.2, W_c=1.1, U_c=0.7,
                              b_z=0.1, b_r=-0.2, b_c=0.05)
        params = {f"fw_{k}": v for k, v in dirp.items()}
        params["out_W"] = np.array([[2.0]])
        params["out_b"] = np.array([0.25])
        window = np.array([[0.4], [-1.2]])
        h = np.zeros(1)
        for t in range(2):
            h = gru_step(dirp, window[t], h, activation="tanh")
        expected = h @ params["out_W"] + params["out_b"]
        pred, _ = forward(spec, params, window)
        np.testing.assert_allclose(pred, expected, atol=1e-15)

    def test_reversal_swaps_direction_finals(self):
        spec = ModelSpec("lstm", True, 3, 2, 1, "tanh")
        params = init_params(spec, RngStream(8))
        gen = RngStream(8).generator()
        window = gen.standard_normal((5, 2))
        _, tape = forward(spec, params, window)
        swapped = dict(params)
        for name in params:
            if name.startswith("fw_"):
                swapped[name] = params["bw_" + name[3:]]
            elif name.startswith("bw_"):
                swapped[name] = params["fw_" + name[3:]]
        _, tape_rev = forward(spec, swapped, window[::-1])
        np.testing.assert_allclose(
            tape.direction_finals["fw"], tape_rev.direction_finals["bw"], atol=0
        )
        np.testing.assert_allclose(
            tape.direction_finals["bw"], tape_rev.direction_finals["fw"], atol=0
        )

    def test_deterministic(self):
        spec = ModelSpec("lstm", False, 4, 3, 2, "relu")
        params = init_params(spec, RngStream(2))
        window = RngStream(2).generator().standard_normal((6, 3))
        a, _ = forward(spec, params, window)
        b, _ = forward(spec, params, window)
        assert np.array_equal(a, b)

    def test_gate_boundedness_tanh(self):
        spec = ModelSpec("gru", False, 4, 2, 1, "tanh")
        params = init_params(spec, RngStream(4))
        gen = RngStream(5).generator()
        window = 3.0 * gen.standard_normal((10, 2))
        _, tape = forward(spec, params, window)
        assert np.all(np.abs(tape.direction_finals["fw"]) <= 1.0)
        for z in tape.caches["fw"].z:
            assert np.all((z > 0) & (z < 1))


def max_rel_err(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-5)
    return float(np.max(np.abs(analytic - numeric) / denom))


def loss_fn(spec, params, X, y):
    pred, _ = forward_batch(spec, params, X)
    return float(np.mean(np.abs(pred - y)))


class TestBackward:
    def test_zero_gradients_when_prediction_matches_target(self):
        spec = ModelSpec("gru", False, 2, 1, 1, "tanh")
        params = init_params(spec, RngStream(0))
        window = np.array([[0.3], [0.1]])
        pred, tape = forward(spec, params, window)
        grads = backward(spec, params, tape, pred)
        for g in grads.values():
            assert np.all(g == 0.0)

    def test_dense_bias_gradient_is_sign_over_output_size(self):
        spec = ModelSpec("gru", False, 2, 1, 3, "tanh")
        params = init_params(spec, RngStream(1))
        window = np.array([[0.5], [-0.2]])
        pred, tape = forward(spec, params, window)
        target = pred + np.array([1.0, -2.0, 0.5])
        grads = backward(spec, params, tape, target)
        np.testing.assert_allclose(
            grads["out_b"], np.sign(pred - target) / 3.0, atol=0
        )

    @pytest.mark.parametrize("cell", ["gru", "lstm"])
    @pytest.mark.parametrize("bidirectional", [False, True])
    def test_gradients_match_finite_differences(self, cell, bidirectional):
        spec = ModelSpec(cell, bidirectional, 3, 2, 2, "tanh")
        rng = RngStream(12)
        params = init_params(spec, rng)
        gen = rng.generator()
        X = gen.standard_normal((1, 4, 2))
        y = gen.standard_normal((1, 2))
        _, tape = forward_batch(spec, params, X)
        grads = backward_batch(spec, params, tape, y)
        for name in params:
            def f(t, name=name):
                trial = dict(params)
                trial[name] = t
                return loss_fn(spec, trial, X, y)
            fd = finite_diff_grad(f, params[name], 1e-5)
            assert max_rel_err(grads[name], fd) < 1e-4, name

    def test_stack_reduce_means_to_batch_gradient(self):
        spec = ModelSpec("lstm", True, 3, 2, 2, "relu")
        params = init_params(spec, RngStream(6))
        gen = RngStream(7).generator()
        X = gen.standard_normal((5, 4, 2))
        y = gen.standard_normal((5, 2))
        _, tape = forward_batch(spec, params, X)
        mean_g = backward_batch(spec, params, tape, y, reduce="mean")
        _, tape2 = forward_batch(spec, params, X)
        stacked = backward_batch(spec, params, tape2, y, reduce="stack")
        for name in mean_g:
            np.testing.assert_allclose(
                stacked[name].mean(axis=0), mean_g[name], atol=1e-12
            )

    def test_stale_tape_rejected(self):
        spec = ModelSpec("gru", False, 2, 1, 1, "tanh")
        params = init_params(spec, RngStream(0))
        _, tape = forward(spec, params, np.ones((2, 1)))
        other = {k: v.copy() for k, v in params.items()}
        with pytest.raises(StaleTapeError):
            backward(spec, other, tape, np.zeros(1))


class TestSerialization:
    def test_round_trip_is_bit_exact(self, tmp_path):
        spec = ModelSpec("lstm", True, 5, 3, 2, "relu")
        params = init_params(spec, RngStream(33))
        path = tmp_path / "params.npz"
        save_params(path, params)
        loaded = load_params(path)
        assert set(loaded) == set(params)
        for name in params:
            assert np.array_equal(loaded[name], params[name])
            assert loaded[name].dtype == params[name].dtype
