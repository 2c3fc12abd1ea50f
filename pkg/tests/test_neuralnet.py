"""Network forward/backward correctness, the optimizer, checkpoints."""

import numpy as np
import pytest

from diffsched.neuralnet import (
    AdamState,
    adam_step,
    load_model,
    mlp_backward,
    mlp_forward,
    mlp_init,
    mlp_predict,
    parameter_checksum,
    save_model,
    schedule_network,
    score_network,
)
from diffsched.numerics import RngState


def _loss_and_grads(model, x, alpha, target):
    y, tape = mlp_forward(model, x, alpha)
    grads, _ = mlp_backward(tape, y - target)
    return 0.5 * float(np.sum((y - target) ** 2)), grads


def _fd_check(model, loss_fn, grads, h=1e-5, floor=1e-7):
    worst = 0.0
    for li, layer in enumerate(model.layers):
        for arr, g in ((layer.weight, grads.layers[li][0]), (layer.bias, grads.layers[li][1])):
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                old = arr[idx]
                arr[idx] = old + h
                lp = loss_fn()
                arr[idx] = old - h
                lm = loss_fn()
                arr[idx] = old
                fd = (lp - lm) / (2.0 * h)
                worst = max(worst, abs(fd - g[idx]) / max(floor, abs(fd), abs(g[idx])))
    return worst


class TestForward:
    def test_zero_weights_identity_head(self):
        rng = RngState(0)
        model = mlp_init([3, 4, 2], ["tanh", "identity"], "none", rng)
        for layer in model.layers:
            layer.weight[:] = 0.0
            layer.bias[:] = 0.0
        y = mlp_predict(model, np.ones(3))
        np.testing.assert_array_equal(y, np.zeros(2))

    def test_zero_weights_sigmoid_head(self):
        model = mlp_init([3, 4, 2], ["tanh", "sigmoid"], "none", RngState(0))
        for layer in model.layers:
            layer.weight[:] = 0.0
            layer.bias[:] = 0.0
        y = mlp_predict(model, np.ones(3))
        np.testing.assert_allclose(y, 0.5)

    def test_dimension_mismatch(self):
        model = mlp_init([3, 4, 2], ["tanh", "identity"], "none", RngState(0))
        with pytest.raises(ValueError, match="dim"):
            mlp_predict(model, np.ones(5))

    def test_conditioning_range(self):
        model = score_network(2, RngState(0), hidden=(8,))
        with pytest.raises(ValueError, match="scale"):
            mlp_predict(model, np.ones(2), 1.0)
        with pytest.raises(ValueError, match="scale"):
            mlp_predict(model, np.ones(2), 0.0)

    def test_batch_matches_single(self):
        model = score_network(3, RngState(4), hidden=(16, 16))
        rng = RngState(1)
        xs = rng.standard_normal((5, 3))
        batch = mlp_predict(model, xs, 0.5)
        for i in range(5):
            np.testing.assert_allclose(mlp_predict(model, xs[i], 0.5), batch[i], atol=1e-14)


class TestBackward:
    def test_zero_output_gradient(self):
        model = mlp_init([3, 4, 2], ["tanh", "identity"], "none", RngState(2))
        y, tape = mlp_forward(model, np.ones(3))
        grads, dx = mlp_backward(tape, np.zeros(2))
        for dw, db in grads:
            assert not dw.any() and not db.any()
        assert not np.asarray(dx).any()

    def test_linear_layer_rows(self):
        # y = W x, seed e_i: the W-gradient has x in row pattern (n_in, n_out)
        model = mlp_init([3, 3], ["identity"], "none", RngState(0))
        x = np.array([1.0, 2.0, 3.0])
        y, tape = mlp_forward(model, x)
        dy = np.zeros(3)
        dy[1] = 1.0
        grads, _ = mlp_backward(tape, dy)
        dw = grads.layers[0][0]
        np.testing.assert_array_equal(dw[:, 1], x)
        assert not dw[:, 0].any() and not dw[:, 2].any()

    def test_two_layer_tanh_finite_differences(self):
        rng = RngState(8)
        model = mlp_init([4, 8, 3], ["tanh", "identity"], "none", rng)
        x = rng.standard_normal((6, 4))
        target = rng.standard_normal((6, 3))
        _, grads = _loss_and_grads(model, x, None, target)

        def loss_fn():
            y = mlp_predict(model, x)
            return 0.5 * float(np.sum((y - target) ** 2))

        assert _fd_check(model, loss_fn, grads) < 1e-6

    def test_gradient_check_many_random_models(self):
        # randomized nets and inputs, all activations and conditioning modes
        worst = 0.0
        for trial in range(100):
            rng = RngState(1000 + trial)
            cond = "alpha" if trial % 2 else "none"
            acts = [["tanh", "identity"], ["tanh", "sigmoid"], ["sigmoid", "identity"]][trial % 3]
            d_in = 2 + trial % 3
            model = mlp_init([d_in + (cond == "alpha"), 6, 2], acts, cond, rng)
            x = rng.standard_normal((3, d_in))
            alpha = 0.3 + 0.4 * float(rng.random()) if cond == "alpha" else None
            target = rng.standard_normal((3, 2))
            _, grads = _loss_and_grads(model, x, alpha, target)

            def loss_fn():
                y = mlp_predict(model, x, alpha)
                return 0.5 * float(np.sum((y - target) ** 2))

            worst = max(worst, _fd_check(model, loss_fn, grads))
        assert worst < 1e-5

    def test_stale_tape_rejected(self):
        model = mlp_init([3, 4, 2], ["tanh", "identity"], "none", RngState(2))
        adam = AdamState.for_model(model)
        y, tape = mlp_forward(model, np.ones(3))
        grads, _ = mlp_backward(tape, y)
        adam_step(adam, model, grads)
        with pytest.raises(ValueError, match="stale tape"):
            mlp_backward(tape, y)

    def test_dy_shape_checked(self):
        model = mlp_init([3, 4, 2], ["tanh", "identity"], "none", RngState(2))
        _, tape = mlp_forward(model, np.ones(3))
        with pytest.raises(ValueError, match="shape"):
            mlp_backward(tape, np.zeros((2, 2)))


class TestAdam:
    def test_zero_gradient_no_change(self):
        model = mlp_init([2, 3, 1], ["tanh", "identity"], "none", RngState(3))
        before = parameter_checksum(model)
        adam = AdamState.for_model(model)
        y, tape = mlp_forward(model, np.ones(2))
        grads, _ = mlp_backward(tape, np.zeros(1))
        adam_step(adam, model, grads)
        assert parameter_checksum(model) == before

    def test_first_step_is_signed_learning_rate(self):
        # bias correction makes the very first update lr * sign(g) up to epsilon
        model = mlp_init([1, 1], ["identity"], "none", RngState(0))
        model.layers[0].weight[:] = 0.5
        adam = AdamState.for_model(model, lr=1e-3)
        grads_pos = [(np.array([[2.7]]), np.zeros(1))]
        from diffsched.neuralnet import Gradients

        adam_step(adam, model, Gradients(grads_pos))
        assert model.layers[0].weight[0, 0] == pytest.approx(0.5 - 1e-3, abs=1e-8)

    def test_constant_gradient_monotone(self):
        model = mlp_init([1, 1], ["identity"], "none", RngState(0))
        model.layers[0].weight[:] = 0.0
        adam = AdamState.for_model(model, lr=1e-2)
        from diffsched.neuralnet import Gradients

        values = [0.0]
        for _ in range(5):
            adam_step(adam, model, Gradients([(np.array([[1.5]]), np.zeros(1))]))
            values.append(float(model.layers[0].weight[0, 0]))
        assert all(b < a for a, b in zip(values, values[1:]))

    def test_non_finite_gradient_diverged(self):
        model = mlp_init([1, 1], ["identity"], "none", RngState(0))
        adam = AdamState.for_model(model)
        from diffsched.neuralnet import Gradients

        with pytest.raises(RuntimeError, match="diverged"):
            adam_step(adam, model, Gradients([(np.array([[np.nan]]), np.zeros(1))]))


class TestScheduleNetwork:
    def test_output_strictly_inside_unit_interval(self):
        net = schedule_network(2, RngState(7), hidden=(16, 16), head=4)
        rng = RngState(8)
        x = 50.0 * rng.standard_normal((200, 2))  # extreme inputs
        out = net.predict(x)
        assert np.all(out > 0.0) and np.all(out < 1.0)

    def test_scalar_input_gives_scalar(self):
        net = schedule_network(3, RngState(7))
        out = net.predict(np.ones(3))
        assert isinstance(out, float)
        assert 0.0 < out < 1.0


class TestCheckpoints:
    def test_round_trip_score(self, tmp_path):
        model = score_network(2, RngState(12), hidden=(8, 8))
        path = tmp_path / "m.ckpt"
        save_model(path, model)
        loaded = load_model(path)
        assert loaded.conditioning == "alpha"
        assert parameter_checksum(loaded) == parameter_checksum(model)
        x = RngState(1).standard_normal((4, 2))
        np.testing.assert_array_equal(mlp_predict(loaded, x, 0.5), mlp_predict(model, x, 0.5))

    def test_round_trip_ratio_network(self, tmp_path):
        net = schedule_network(2, RngState(13))
        path = tmp_path / "s.ckpt"
        save_model(path, net)
        loaded = load_model(path)
        x = RngState(2).standard_normal((4, 2))
        np.testing.assert_array_equal(loaded.predict(x), net.predict(x))
