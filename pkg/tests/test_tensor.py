import math

import numpy as np
import pytest

from gradcheck import check_gradients, scalar_probe
from lmtrain.tensor import (
    Parameter,
    Tensor,
    concat_channels,
    conv2d,
    maxpool2,
    mul,
    relu,
    upsample2,
    weighted_bce_with_logits,
)
from lmtrain.optim import Adam


def tensor4(rng, *shape, grad=False):
    return Tensor(rng.standard_normal(shape), requires_grad=grad, dtype=np.float64)


def naive_conv3(x, w, b):
    # reference implementation: explicit padded loop, no shared code with conv2d
    n, cin, h, width = x.shape
    cout = w.shape[0]
    xp = np.zeros((n, cin, h + 2, width + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    out = np.zeros((n, cout, h, width), dtype=x.dtype)
    for o in range(cout):
        for c in range(cin):
            for dy in range(3):
                for dx in range(3):
                    out[:, o] += w[o, c, dy, dx] * xp[:, c, dy:dy + h, dx:dx + width]
        out[:, o] += b[o]
    return out


class TestConvForward:
    def test_center_tap_is_identity(self):
        rng = np.random.default_rng(0)
        x = tensor4(rng, 2, 1, 4, 5)
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        out = conv2d(x, Tensor(w), Tensor(np.zeros(1)))
        assert np.array_equal(out.data, x.data)

    def test_corner_tap_shifts_content(self):
        # a weight at (0, 0) reads the padded pixel one up-left of each output
        x = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 0, 0] = 1.0
        out = conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(1))).data[0, 0]
        expected = np.zeros((3, 3))
        expected[1:, 1:] = x[0, 0, :2, :2]
        assert np.array_equal(out, expected)

    def test_all_ones_kernel_sums_neighbourhood(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
        assert np.array_equal(out.data[0, 0], np.full((2, 2), 10.0))

    def test_bias_added_per_channel(self):
        x = Tensor(np.zeros((1, 1, 2, 2)))
        w = Tensor(np.zeros((3, 1, 3, 3)))
        out = conv2d(x, w, Tensor(np.array([1.0, -2.0, 0.5])))
        assert np.array_equal(out.data[0, :, 0, 0], [1.0, -2.0, 0.5])

    @pytest.mark.parametrize("shape,cout", [((1, 1, 5, 5), 2), ((2, 3, 4, 7), 4), ((3, 2, 6, 3), 1)])
    def test_matches_reference_loop(self, shape, cout):
        rng = np.random.default_rng(hash(shape) % 2**32)
        x = rng.standard_normal(shape)
        w = rng.standard_normal((cout, shape[1], 3, 3))
        b = rng.standard_normal(cout)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b)).data
        assert np.allclose(out, naive_conv3(x, w, b), rtol=1e-12, atol=1e-12)

    def test_shape_validation(self):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        with pytest.raises(ValueError, match="Cin=2"):
            conv2d(x, Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))
        with pytest.raises(ValueError, match="bias"):
            conv2d(x, Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros(2)))
        with pytest.raises(ValueError, match="weight"):
            conv2d(x, Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros(1)))


class TestOpBehaviour:
    def test_relu_clamps_and_gates(self):
        x = Tensor(np.array([-2.0, 0.0, 3.0]), requires_grad=True)
        out = mul(relu(x), np.array([1.0, 1.0, 1.0])).sum()
        out.backward()
        assert np.array_equal(relu(x).data, [0.0, 0.0, 3.0])
        assert np.array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_maxpool_values(self):
        x = np.array([[1.0, 2.0, 5.0, 0.0], [3.0, 4.0, 1.0, 1.0]]).reshape(1, 1, 2, 4)
        out = maxpool2(Tensor(x))
        assert np.array_equal(out.data, [[[[4.0, 5.0]]]])

    def test_maxpool_tie_routes_to_first_cell(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        out = maxpool2(x).sum()
        out.backward()
        assert np.array_equal(x.grad, [[[[1.0, 0.0], [0.0, 0.0]]]])

    def test_maxpool_rejects_odd_dims(self):
        with pytest.raises(ValueError, match="even"):
            maxpool2(Tensor(np.zeros((1, 1, 3, 4))))

    def test_upsample_repeats_pixels(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        out = upsample2(Tensor(x))
        expected = np.array([[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]], dtype=float)
        assert np.array_equal(out.data[0, 0], expected)

    def test_concat_orders_channels(self):
        a = Tensor(np.full((1, 2, 2, 2), 1.0))
        b = Tensor(np.full((1, 1, 2, 2), 2.0))
        out = concat_channels(a, b)
        assert out.shape == (1, 3, 2, 2)
        assert np.array_equal(out.data[0, :, 0, 0], [1.0, 1.0, 2.0])

    def test_concat_rejects_spatial_mismatch(self):
        with pytest.raises(ValueError, match="matching"):
            concat_channels(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 4, 4))))

    def test_mul_rejects_enlarging_factor(self):
        with pytest.raises(ValueError, match="broadcast"):
            mul(Tensor(np.zeros(2)), np.zeros(3))

    def test_backward_requires_scalar(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            relu(x).backward()

    def test_no_grad_tracking_without_requires_grad(self):
        out = relu(Tensor(np.ones(3)))
        assert not out.requires_grad
        assert out._backward is None

    def test_grad_accumulates_when_tensor_used_twice(self):
        x = Tensor(np.full((1, 1, 1, 1), 2.0), requires_grad=True)
        y = relu(x)
        loss = concat_channels(y, y).sum()
        loss.backward()
        assert np.array_equal(x.grad, [[[[2.0]]]])


class TestBCE:
    def logits(self, values):
        return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)

    def test_zero_logit_positive_target(self):
        z = self.logits(np.zeros((1, 1, 1, 1)))
        loss = weighted_bce_with_logits(z, np.ones((1, 1, 1, 1)), np.array([2.0]))
        assert loss.item() == pytest.approx(2.0 * math.log(2.0), rel=1e-12)

    def test_zero_logit_negative_target(self):
        z = self.logits(np.zeros((1, 1, 1, 1)))
        loss = weighted_bce_with_logits(z, np.zeros((1, 1, 1, 1)), np.array([5.0]))
        # weight applies to the positive term only
        assert loss.item() == pytest.approx(math.log(2.0), rel=1e-12)

    def test_hand_value_mixed_cells(self):
        z = self.logits(np.array([1.0, -2.0]).reshape(1, 1, 1, 2))
        y = np.array([1.0, 0.0]).reshape(1, 1, 1, 2)
        loss = weighted_bce_with_logits(z, y, np.array([3.0]))
        expected = (3.0 * math.log(1 + math.exp(-1.0)) + math.log(1 + math.exp(-2.0))) / 2
        assert loss.item() == pytest.approx(expected, rel=1e-12)

    def test_large_logits_do_not_overflow(self):
        z = self.logits(np.array([800.0, -800.0]).reshape(1, 1, 1, 2))
        y = np.array([0.0, 1.0]).reshape(1, 1, 1, 2)
        loss = weighted_bce_with_logits(z, y, np.array([1.0]))
        assert loss.item() == pytest.approx(800.0, rel=1e-9)

    def test_per_sample_weights(self):
        z = self.logits(np.zeros((2, 1, 1, 1)))
        y = np.ones((2, 1, 1, 1))
        loss = weighted_bce_with_logits(z, y, np.array([[2.0], [4.0]]))
        assert loss.item() == pytest.approx(3.0 * math.log(2.0), rel=1e-12)

    def test_channel_mask_excludes_sum_and_denominator(self):
        z = self.logits(np.array([0.0, 37.0]).reshape(2, 1, 1, 1))
        y = np.array([1.0, 0.0]).reshape(2, 1, 1, 1)
        mask = np.array([[True], [False]])
        loss = weighted_bce_with_logits(z, y, np.array([1.0]), channel_mask=mask)
        assert loss.item() == pytest.approx(math.log(2.0), rel=1e-12)
        loss.backward()
        assert z.grad[1, 0, 0, 0] == 0.0

    def test_masked_weight_may_be_garbage(self):
        z = self.logits(np.zeros((2, 1, 1, 1)))
        y = np.ones((2, 1, 1, 1))
        mask = np.array([[True], [False]])
        loss = weighted_bce_with_logits(z, y, np.array([[1.0], [-9.0]]), channel_mask=mask)
        assert loss.item() == pytest.approx(math.log(2.0), rel=1e-12)

    def test_gradient_hand_value(self):
        z = self.logits(np.zeros((1, 1, 1, 1)))
        loss = weighted_bce_with_logits(z, np.ones((1, 1, 1, 1)), np.array([1.0]))
        loss.backward()
        assert z.grad[0, 0, 0, 0] == pytest.approx(-0.5, rel=1e-12)

    def test_loss_positive_for_imperfect_predictions(self):
        rng = np.random.default_rng(8)
        z = self.logits(rng.standard_normal((2, 3, 4, 4)))
        y = (rng.random((2, 3, 4, 4)) < 0.1).astype(float)
        loss = weighted_bce_with_logits(z, y, np.full(3, 7.0))
        assert loss.item() > 0.0

    def test_validation_errors(self):
        z4 = self.logits(np.zeros((1, 1, 1, 1)))
        with pytest.raises(ValueError, match="binary"):
            weighted_bce_with_logits(z4, np.full((1, 1, 1, 1), 0.5), np.array([1.0]))
        with pytest.raises(ValueError, match="positive"):
            weighted_bce_with_logits(z4, np.ones((1, 1, 1, 1)), np.array([0.0]))
        with pytest.raises(ValueError, match="shape"):
            weighted_bce_with_logits(z4, np.ones((1, 1, 1, 2)), np.array([1.0]))
        with pytest.raises(ValueError, match="non-finite"):
            weighted_bce_with_logits(
                self.logits(np.full((1, 1, 1, 1), np.nan)), np.ones((1, 1, 1, 1)), np.array([1.0])
            )
        with pytest.raises(ValueError, match="excludes every"):
            weighted_bce_with_logits(
                z4, np.ones((1, 1, 1, 1)), np.array([1.0]), channel_mask=np.array([[False]])
            )


class TestGradientsAgainstFiniteDifferences:
    """Spot checks per op; the acceptance suite runs the full instance matrix."""

    def test_conv_gradients(self):
        rng = np.random.default_rng(21)
        arrays = {
            "x": rng.standard_normal((2, 2, 4, 5)),
            "w": rng.standard_normal((3, 2, 3, 3)),
            "b": rng.standard_normal(3),
        }
        probe_rng = np.random.default_rng(99)
        proj = probe_rng.standard_normal((2, 3, 4, 5))

        def build(t):
            return mul(conv2d(t["x"], t["w"], t["b"]), proj).sum()

        worst = check_gradients(build, arrays, rel_tol=1e-6)
        assert worst < 1e-6

    def test_pool_upsample_concat_relu_chain(self):
        rng = np.random.default_rng(22)
        arrays = {"x": rng.standard_normal((1, 2, 4, 4)), "y": rng.standard_normal((1, 2, 4, 4))}
        proj = np.random.default_rng(1).standard_normal((1, 4, 4, 4))

        def build(t):
            pooled = maxpool2(relu(t["x"]))
            return mul(concat_channels(upsample2(pooled), t["y"]), proj).sum()

        check_gradients(build, arrays, rel_tol=1e-6)

    def test_bce_gradients_with_mask(self):
        rng = np.random.default_rng(23)
        arrays = {"z": rng.standard_normal((2, 3, 3, 3))}
        y = (rng.random((2, 3, 3, 3)) < 0.2).astype(float)
        w = rng.uniform(0.5, 4.0, size=(2, 3))
        mask = np.array([[True, False, True], [True, True, False]])

        def build(t):
            return weighted_bce_with_logits(t["z"], y, w, channel_mask=mask)

        check_gradients(build, arrays, rel_tol=1e-6)


class TestAdam:
    def test_first_step_hand_value(self):
        p = Parameter(np.array([1.0, -2.0]), "p", dtype=np.float64)
        opt = Adam([p], lr=0.1)
        p.grad[:] = [0.5, -3.0]
        opt.step()
        g = np.array([0.5, -3.0])
        expected = np.array([1.0, -2.0]) - 0.1 * g / (np.abs(g) + 1e-8)
        assert np.allclose(p.data, expected, rtol=0, atol=1e-12)

    def test_matches_reference_recurrence(self):
        rng = np.random.default_rng(5)
        w0 = rng.standard_normal(4)
        grads = [rng.standard_normal(4) for _ in range(5)]
        p = Parameter(w0.copy(), "p", dtype=np.float64)
        opt = Adam([p], lr=0.02, betas=(0.9, 0.999), eps=1e-8)
        for g in grads:
            p.grad[:] = g
            opt.step()
        # independent scalar reference of the published update rule
        m = np.zeros(4)
        v = np.zeros(4)
        w = w0.copy()
        for t, g in enumerate(grads, start=1):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mh = m / (1 - 0.9**t)
            vh = v / (1 - 0.999**t)
            w = w - 0.02 * mh / (np.sqrt(vh) + 1e-8)
        assert np.allclose(p.data, w, rtol=1e-12, atol=1e-12)

    def test_step_zeroes_gradients(self):
        p = Parameter(np.ones(2), "p")
        opt = Adam([p])
        p.grad[:] = 1.0
        opt.step()
        assert np.array_equal(p.grad, [0.0, 0.0])

    def test_zero_gradient_leaves_parameter_alone(self):
        p = Parameter(np.array([3.0]), "p", dtype=np.float64)
        Adam([p], lr=0.5).step()
        assert np.array_equal(p.data, [3.0])

    def test_state_round_trip_matches_uninterrupted_run(self):
        rng = np.random.default_rng(7)
        grads = [rng.standard_normal(3) for _ in range(4)]

        p_ref = Parameter(np.ones(3), "w", dtype=np.float64)
        ref = Adam([p_ref], lr=0.05)
        for g in grads:
            p_ref.grad[:] = g
            ref.step()

        p_a = Parameter(np.ones(3), "w", dtype=np.float64)
        a = Adam([p_a], lr=0.05)
        for g in grads[:2]:
            p_a.grad[:] = g
            a.step()
        saved = {k: v.copy() for k, v in a.state_tensors().items()}
        assert set(saved) == {"w.m", "w.v"}

        p_b = Parameter(p_a.data.copy(), "w", dtype=np.float64)
        b = Adam([p_b], lr=0.05)
        b.load_state_tensors(saved, t=a.t)
        for g in grads[2:]:
            p_b.grad[:] = g
            b.step()
        assert np.array_equal(p_b.data, p_ref.data)

    def test_validation(self):
        p = Parameter(np.ones(1), "p")
        with pytest.raises(ValueError, match="learning rate"):
            Adam([p], lr=0.0)
        with pytest.raises(ValueError, match="betas"):
            Adam([p], betas=(1.0, 0.999))
