import numpy as np
import pytest

from sriqa.errors import ConfigError, NumericError, ShapeError
from sriqa import tensor
from sriqa.tensor import (
    AdamState,
    LayerSpec,
    adam_apply,
    adam_init,
    backward_stack,
    forward_stack,
    grad_check,
    init_layer,
    layer_backward,
    layer_forward,
    loss_mse_l2,
)

from oracles import conv3x3_loop, maxpool2_grad_loop, maxpool2_loop


class TestConv:
    def test_forward_matches_loop_oracle(self, rng):
        for _ in range(10):
            n, h, w = rng.integers(1, 4), 2 * rng.integers(1, 5), 2 * rng.integers(1, 5)
            cin, cout = rng.integers(1, 5), rng.integers(1, 5)
            x = rng.standard_normal((n, h, w, cin))
            wt = rng.standard_normal((3, 3, cin, cout))
            b = rng.standard_normal(cout)
            got = tensor.conv3x3_forward(x, wt, b)
            want = conv3x3_loop(x, wt, b)
            assert np.max(np.abs(got - want)) < 1e-12

    def test_preserves_spatial_dims(self, rng):
        x = rng.standard_normal((2, 6, 10, 3))
        wt = rng.standard_normal((3, 3, 3, 7))
        assert tensor.conv3x3_forward(x, wt, np.zeros(7)).shape == (2, 6, 10, 7)

    def test_channel_mismatch_raises(self, rng):
        x = rng.standard_normal((1, 4, 4, 3))
        wt = rng.standard_normal((3, 3, 2, 4))
        with pytest.raises(ShapeError):
            tensor.conv3x3_forward(x, wt, np.zeros(4))

    def test_gradients(self, rng):
        spec = LayerSpec("conv", in_channels=2, out_channels=3)
        params = init_layer(spec, rng)
        x = rng.standard_normal((2, 4, 6, 2))
        tgt = rng.standard_normal((2, 4, 6, 3))

        def loss_fn():
            y = tensor.conv3x3_forward(x, params["w"], params["b"])
            return float(((y - tgt) ** 2).sum())

        y = tensor.conv3x3_forward(x, params["w"], params["b"])
        gx, gw, gb = tensor.conv3x3_backward(x, params["w"], 2.0 * (y - tgt))
        err = grad_check(loss_fn, params, {"w": gw, "b": gb}, rng=rng)
        assert err < 1e-6

        inputs = {"x": x}
        err = grad_check(loss_fn, inputs, {"x": gx}, rng=rng)
        assert err < 1e-6


class TestMaxPool:
    def test_forward_matches_loop_oracle(self, rng):
        for _ in range(10):
            n, c = rng.integers(1, 4), rng.integers(1, 5)
            h, w = 2 * rng.integers(1, 7), 2 * rng.integers(1, 7)
            x = rng.standard_normal((n, h, w, c))
            got, _ = tensor.maxpool2_forward(x)
            assert np.array_equal(got, maxpool2_loop(x))

    def test_ties_match_loop_oracle(self, rng):
        # integer-valued inputs force frequent ties inside windows
        x = rng.integers(0, 3, (3, 8, 8, 2)).astype(np.float64)
        y, cache = tensor.maxpool2_forward(x)
        assert np.array_equal(y, maxpool2_loop(x))
        g = rng.standard_normal(y.shape)
        assert np.array_equal(tensor.maxpool2_backward(cache, g), maxpool2_grad_loop(x, g))

    def test_shift_invariance(self, rng):
        x = rng.standard_normal((2, 6, 4, 3))
        y0, _ = tensor.maxpool2_forward(x)
        y1, _ = tensor.maxpool2_forward(x + 2.5)
        assert np.allclose(y0 + 2.5, y1)

    def test_odd_dims_raise(self, rng):
        with pytest.raises(ShapeError):
            tensor.maxpool2_forward(rng.standard_normal((1, 5, 4, 1)))

    def test_gradient(self, rng):
        x = rng.standard_normal((1, 4, 4, 2))
        tgt = rng.standard_normal((1, 2, 2, 2))

        def loss_fn():
            y, _ = tensor.maxpool2_forward(x)
            return float(((y - tgt) ** 2).sum())

        y, cache = tensor.maxpool2_forward(x)
        gx = tensor.maxpool2_backward(cache, 2.0 * (y - tgt))
        assert grad_check(loss_fn, {"x": x}, {"x": gx}, rng=rng) < 1e-6


class TestDense:
    def test_closed_form(self, rng):
        x = rng.standard_normal((3, 1, 1, 5))
        w = rng.standard_normal((5, 4))
        b = rng.standard_normal(4)
        y = tensor.dense_forward(x, w, b)
        assert y.shape == (3, 1, 1, 4)
        assert np.allclose(y[:, 0, 0, :], x[:, 0, 0, :] @ w + b)

    def test_shape_mismatch_raises(self, rng):
        with pytest.raises(ShapeError):
            tensor.dense_forward(rng.standard_normal((1, 1, 1, 3)), rng.standard_normal((5, 4)), np.zeros(4))
        with pytest.raises(ShapeError):
            tensor.dense_forward(rng.standard_normal((1, 2, 2, 5)), rng.standard_normal((5, 4)), np.zeros(4))

    def test_gradients(self, rng):
        spec = LayerSpec("dense", in_units=6, out_units=3)
        params = init_layer(spec, rng)
        x = rng.standard_normal((2, 1, 1, 6))
        tgt = rng.standard_normal((2, 1, 1, 3))

        def loss_fn():
            y = tensor.dense_forward(x, params["w"], params["b"])
            return float(((y - tgt) ** 2).sum())

        y = tensor.dense_forward(x, params["w"], params["b"])
        gx, gw, gb = tensor.dense_backward(x, params["w"], 2.0 * (y - tgt))
        assert grad_check(loss_fn, params, {"w": gw, "b": gb}, rng=rng) < 1e-6
        assert grad_check(loss_fn, {"x": x}, {"x": gx}, rng=rng) < 1e-6


class TestRelu:
    def test_forward(self):
        x = np.array([[[[-1.0, 0.0, 2.5]]]])
        y, _ = layer_forward(LayerSpec("relu"), {}, x)
        assert np.array_equal(y, [[[[0.0, 0.0, 2.5]]]])

    def test_gradient_away_from_kink(self, rng):
        spec = LayerSpec("relu")
        x = rng.standard_normal((2, 3, 3, 2))
        x[np.abs(x) < 1e-3] = 0.5  # keep probes off the kink
        tgt = rng.standard_normal(x.shape)

        def loss_fn():
            y, _ = layer_forward(spec, {}, x)
            return float(((y - tgt) ** 2).sum())

        y, cache = layer_forward(spec, {}, x)
        gx, _ = layer_backward(spec, {}, cache, 2.0 * (y - tgt))
        exclude = {"x": np.abs(x) <= 10 * 1e-5}
        assert grad_check(loss_fn, {"x": x}, {"x": gx}, exclude=exclude, rng=rng) < 1e-6


class TestDropout:
    def test_inference_is_identity(self, rng):
        spec = LayerSpec("dropout", dropout_p=0.5)
        x = rng.standard_normal((2, 4, 4, 3))
        y, cache = layer_forward(spec, {}, x, training=False)
        assert y is x and cache is None

    def test_training_mask_scaling(self, rng):
        spec = LayerSpec("dropout", dropout_p=0.5)
        x = np.ones((1, 50, 50, 4))
        y, mask = layer_forward(spec, {}, x, training=True, rng=rng)
        kept = y != 0.0
        assert np.allclose(y[kept], 2.0)  # surviving units scaled by 1/(1-p)
        assert 0.4 < kept.mean() < 0.6
        g = rng.standard_normal(x.shape)
        gx, _ = layer_backward(spec, {}, mask, g)
        assert np.array_equal(gx, g * mask)

    def test_zero_probability_passthrough(self, rng):
        spec = LayerSpec("dropout", dropout_p=0.0)
        x = rng.standard_normal((1, 2, 2, 1))
        y, _ = layer_forward(spec, {}, x, training=True, rng=rng)
        assert y is x

    def test_invalid_probability_rejected(self):
        with pytest.raises(ConfigError):
            LayerSpec("dropout", dropout_p=1.0)

    def test_training_without_rng_rejected(self, rng):
        with pytest.raises(ConfigError):
            layer_forward(LayerSpec("dropout", dropout_p=0.3), {}, np.ones((1, 1, 1, 1)), training=True)


class TestFlatten:
    def test_collapses_everything(self, rng):
        x = rng.standard_normal((3, 8, 8, 4))
        y, cache = layer_forward(LayerSpec("flatten"), {}, x)
        assert y.shape == (1, 1, 1, 3 * 8 * 8 * 4)
        g, _ = layer_backward(LayerSpec("flatten"), {}, cache, y)
        assert np.array_equal(g, x)


class TestLoss:
    def test_value_and_gradient(self):
        preds = np.array([1.0, 2.0, 3.0])
        gts = np.array([1.5, 2.0, 1.0])
        w = np.array([[2.0, -1.0]])
        loss, grad = loss_mse_l2(preds, gts, [w], lam=0.1)
        mse = ((preds - gts) ** 2).mean()
        assert loss == pytest.approx(mse + 0.1 * 5.0)
        assert np.allclose(grad, 2.0 * (preds - gts) / 3)

    def test_no_weights_is_plain_mse(self):
        loss, _ = loss_mse_l2(np.array([2.0]), np.array([0.0]), [], lam=0.5)
        assert loss == pytest.approx(4.0)

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            loss_mse_l2(np.array([1.0]), np.array([1.0, 2.0]), [], 0.0)
        with pytest.raises(ShapeError):
            loss_mse_l2(np.array([]), np.array([]), [], 0.0)


def adam_reference(grads_seq, p0, eta, b1, b2, eps):
    """Scalar Adam straight from the update formulas."""
    p, m, v = p0, 0.0, 0.0
    for t, g in enumerate(grads_seq, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p -= eta * mhat / (np.sqrt(vhat) + eps)
    return p


class TestAdam:
    def test_first_step_magnitude(self):
        params = {"p": np.array([1.0])}
        state = adam_init(params, eta=1e-4)
        adam_apply(state, params, {"p": np.array([0.5])})
        # bias-corrected first step: -eta * g / (sqrt(g^2) + eps) ~= -eta
        assert params["p"][0] == pytest.approx(1.0 - 1e-4, abs=1e-9)
        assert state.step == 1

    def test_matches_scalar_reference(self, rng):
        grads = rng.standard_normal(7)
        params = {"p": np.array([0.3])}
        state = adam_init(params, eta=0.01)
        for g in grads:
            adam_apply(state, params, {"p": np.array([g])})
        want = adam_reference(grads, 0.3, 0.01, 0.9, 0.999, 1e-8)
        assert params["p"][0] == pytest.approx(want, rel=1e-12)

    def test_fresh_state_has_zero_moments(self):
        params = {"a": np.ones((2, 2))}
        state = adam_init(params)
        assert state.step == 0
        assert not state.m["a"].any() and not state.v["a"].any()

    def test_nonfinite_gradient_names_array(self):
        params = {"layer3.w": np.ones(2)}
        state = adam_init(params)
        with pytest.raises(NumericError, match="layer3.w"):
            adam_apply(state, params, {"layer3.w": np.array([1.0, np.nan])})

    def test_mismatched_grads_rejected(self):
        params = {"a": np.ones(1)}
        with pytest.raises(ConfigError):
            adam_apply(adam_init(params), params, {"b": np.ones(1)})


class TestGradCheck:
    def test_accepts_correct_gradient(self, rng):
        p = {"x": rng.standard_normal(10)}

        def loss_fn():
            return float((p["x"] ** 2).sum())

        assert grad_check(loss_fn, p, {"x": 2.0 * p["x"]}, rng=rng) < 1e-8

    def test_flags_wrong_gradient(self, rng):
        p = {"x": rng.standard_normal(10)}

        def loss_fn():
            return float((p["x"] ** 2).sum())

        assert grad_check(loss_fn, p, {"x": 3.0 * p["x"]}, rng=rng) > 0.1

    def test_exclusion_mask_respected(self, rng):
        p = {"x": np.array([0.0, 1.0])}

        def loss_fn():
            return float(np.abs(p["x"]).sum())  # kink at 0

        exclude = {"x": np.array([True, False])}
        assert grad_check(loss_fn, p, {"x": np.array([99.0, 1.0])}, exclude=exclude, rng=rng) < 1e-8


class TestStack:
    def test_chain_gradients(self, rng):
        layers = [
            (LayerSpec("conv", in_channels=2, out_channels=4), None),
            (LayerSpec("relu"), None),
            (LayerSpec("maxpool"), None),
            (LayerSpec("flatten"), None),
            (LayerSpec("dense", in_units=2 * 2 * 2 * 4, out_units=1), None),
        ]
        layers = [(spec, init_layer(spec, rng)) for spec, _ in layers]
        x = rng.standard_normal((2, 4, 4, 2))

        def loss_fn():
            y, _ = forward_stack(layers, x)
            return float(y[0, 0, 0, 0] ** 2)

        y, caches = forward_stack(layers, x)
        _, grads = backward_stack(layers, caches, np.full((1, 1, 1, 1), 2.0 * y[0, 0, 0, 0]))
        params = {f"{i}.{k}": v for i, (_, p) in enumerate(layers) for k, v in p.items()}
        analytic = {f"{i}.{k}": v for i, g in enumerate(grads) for k, v in g.items()}
        assert grad_check(loss_fn, params, analytic, rng=rng) < 1e-5

    def test_forward_shapes(self, rng):
        layers = [
            (LayerSpec("conv", in_channels=3, out_channels=8), None),
            (LayerSpec("maxpool"), None),
        ]
        layers = [(spec, init_layer(spec, rng)) for spec, _ in layers]
        y, _ = forward_stack(layers, rng.standard_normal((5, 8, 8, 3)))
        assert y.shape == (5, 4, 4, 8)


class TestInit:
    def test_he_variance_and_zero_bias(self):
        rng = np.random.default_rng(0)
        spec = LayerSpec("conv", in_channels=16, out_channels=64)
        params = init_layer(spec, rng)
        assert not params["b"].any()
        assert params["w"].std() == pytest.approx(np.sqrt(2.0 / (9 * 16)), rel=0.05)

    def test_dense_fan_in(self):
        rng = np.random.default_rng(0)
        params = init_layer(LayerSpec("dense", in_units=400, out_units=50), rng)
        assert params["w"].std() == pytest.approx(np.sqrt(2.0 / 400), rel=0.05)

    def test_paramless_layers(self, rng):
        assert init_layer(LayerSpec("relu"), rng) == {}
