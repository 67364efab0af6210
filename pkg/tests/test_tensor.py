import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcaunet import tensor as T
from dcaunet.checks import gradcheck, scalarize
from dcaunet.errors import ConfigError, NumericsError, ShapeError, UsageError
from dcaunet.tensor import GradTape, Tensor


def naive_conv2d(x, w, b, stride=1, padding=0, groups=1):
    """Nested-loop cross-correlation oracle."""
    batch, height, width, cin = x.shape
    kh, kw, cpg, cout = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    h_out = (height + 2 * padding - kh) // stride + 1
    w_out = (width + 2 * padding - kw) // stride + 1
    og = cout // groups
    out = np.zeros((batch, h_out, w_out, cout))
    for n in range(batch):
        for i in range(h_out):
            for j in range(w_out):
                for g in range(groups):
                    patch = xp[n, i * stride:i * stride + kh,
                               j * stride:j * stride + kw, g * cpg:(g + 1) * cpg]
                    for o in range(og):
                        out[n, i, j, g * og + o] = (patch * w[:, :, :, g * og + o]).sum()
    if b is not None:
        out = out + b
    return out


def naive_pool2d(x, kind, window, stride):
    batch, height, width, channels = x.shape
    h_out = (height - window) // stride + 1
    w_out = (width - window) // stride + 1
    out = np.zeros((batch, h_out, w_out, channels))
    for n in range(batch):
        for i in range(h_out):
            for j in range(w_out):
                for c in range(channels):
                    patch = x[n, i * stride:i * stride + window,
                              j * stride:j * stride + window, c]
                    out[n, i, j, c] = patch.mean() if kind == "avg" else patch.max()
    return out


class TestMatmul:
    def test_identity(self, rng):
        a = Tensor(rng.normal(size=(2, 2)))
        eye = Tensor(np.eye(2))
        assert np.array_equal((eye @ a).data, a.data)

    def test_hand_product(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        assert np.array_equal((a @ b).data, [[19.0, 22.0], [43.0, 50.0]])

    def test_grad_of_sum_is_b_transpose_broadcast(self, rng):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        (a @ b).sum().backward()
        expected = np.tile(b.data.sum(axis=1), (3, 1))
        np.testing.assert_allclose(a.grad, expected, atol=1e-12)
        err = gradcheck(lambda: (a @ b).sum(), [a, b])
        assert err < 1e-4

    def test_batched_broadcast(self, rng):
        a = Tensor(rng.normal(size=(2, 1, 3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(5, 4, 2)), requires_grad=True)
        out = a @ b
        assert out.shape == (2, 5, 3, 2)
        weights = rng.normal(size=out.shape)
        assert gradcheck(lambda: scalarize(a @ b, weights), [a, b]) < 1e-4

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError) as exc:
            Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))
        assert "(2, 3)" in str(exc.value)


class TestSoftmax:
    def test_uniform_vector(self):
        out = T.softmax_lastdim(Tensor([4.2, 4.2, 4.2]))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-12)

    def test_single_element(self):
        assert T.softmax_lastdim(Tensor([11.0])).data.tolist() == [1.0]

    def test_reference_values(self):
        out = T.softmax_lastdim(Tensor([0.0, 1.0, 2.0]))
        np.testing.assert_allclose(
            out.data, [0.09003057, 0.24472847, 0.66524096], atol=1e-8)

    def test_empty_last_axis_rejected(self):
        with pytest.raises(ShapeError):
            T.softmax_lastdim(Tensor(np.zeros(())))

    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=8))
    @settings(max_examples=40, deadline=None)
    def test_rows_sum_to_one_and_positive(self, values):
        out = T.softmax_lastdim(Tensor(np.array(values))).data
        assert abs(out.sum() - 1.0) < 1e-6
        assert (out > 0).all()

    def test_gradient(self, rng):
        x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        weights = rng.normal(size=(3, 5))
        assert gradcheck(lambda: scalarize(T.softmax_lastdim(x), weights), [x]) < 1e-4


class TestConv2d:
    def test_1x1_kernel_is_channel_matmul(self, rng):
        x = Tensor(rng.normal(size=(1, 4, 5, 3)))
        w = Tensor(rng.normal(size=(1, 1, 3, 6)))
        out = T.conv2d(x, w)
        expected = x.data.reshape(-1, 3) @ w.data[0, 0]
        np.testing.assert_allclose(out.data.reshape(-1, 6), expected, atol=1e-12)

    def test_depthwise_ones_on_constant_interior(self):
        c = 1.7
        x = Tensor(np.full((1, 5, 5, 2), c))
        w = Tensor(np.ones((3, 3, 1, 2)))
        out = T.conv2d(x, w, padding=1, groups=2)
        np.testing.assert_allclose(out.data[0, 1:-1, 1:-1, :], 9 * c, atol=1e-12)

    def test_matches_naive_loop(self, rng):
        x = Tensor(rng.normal(size=(2, 5, 5, 4)))
        w = Tensor(rng.normal(size=(3, 3, 4, 6)))
        b = Tensor(rng.normal(size=6))
        out = T.conv2d(x, w, b, stride=1, padding=1)
        ref = naive_conv2d(x.data, w.data, b.data, stride=1, padding=1)
        assert np.abs(out.data - ref).max() < 1e-10

    def test_grouped_and_strided_matches_naive(self, rng):
        x = Tensor(rng.normal(size=(1, 6, 6, 4)))
        w = Tensor(rng.normal(size=(2, 2, 2, 6)))
        out = T.conv2d(x, w, stride=2, groups=2)
        ref = naive_conv2d(x.data, w.data, None, stride=2, groups=2)
        assert np.abs(out.data - ref).max() < 1e-10

    def test_group_mismatch_raises(self, rng):
        x = Tensor(rng.normal(size=(1, 4, 4, 3)))
        w = Tensor(rng.normal(size=(3, 3, 3, 4)))
        with pytest.raises(ShapeError):
            T.conv2d(x, w, groups=2)

    def test_gradients(self, rng):
        x = Tensor(rng.normal(size=(1, 4, 4, 2)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 3, 2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        weights = rng.normal(size=(1, 4, 4, 3))
        err = gradcheck(lambda: scalarize(T.conv2d(x, w, b, padding=1), weights), [x, w, b])
        assert err < 1e-4

    def test_depthwise_gradients(self, rng):
        x = Tensor(rng.normal(size=(1, 4, 4, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 3, 1, 3)), requires_grad=True)
        weights = rng.normal(size=(1, 4, 4, 3))
        err = gradcheck(lambda: scalarize(T.conv2d(x, w, padding=1, groups=3), weights),
                        [x, w])
        assert err < 1e-4


class TestPool2d:
    def test_avg_2x2(self):
        out = T.pool2d(Tensor([[[[1.0], [2.0]], [[3.0], [4.0]]]]), "avg", 2)
        assert out.data.reshape(()) == 2.5

    def test_global_max_constant(self):
        x = Tensor(np.full((1, 4, 4, 2), -3.25))
        out = T.pool2d(x, "max", (4, 4))
        assert (out.data == -3.25).all()

    @pytest.mark.parametrize("kind", ["avg", "max"])
    def test_matches_naive_loop(self, kind, rng):
        x = Tensor(rng.normal(size=(2, 8, 8, 3)))
        out = T.pool2d(x, kind, 2)
        ref = naive_pool2d(x.data, kind, 2, 2)
        if kind == "max":
            assert np.array_equal(out.data, ref)
        else:
            assert np.abs(out.data - ref).max() < 1e-12

    def test_overlapping_windows(self, rng):
        x = Tensor(rng.normal(size=(1, 5, 5, 2)))
        out = T.pool2d(x, "max", 3, stride=1)
        ref = naive_pool2d(x.data, "max", 3, 1)
        assert np.array_equal(out.data, ref)

    def test_non_divisible_without_pad_raises(self, rng):
        x = Tensor(rng.normal(size=(1, 5, 5, 1)))
        with pytest.raises(ShapeError):
            T.pool2d(x, "avg", 2)
        assert T.pool2d(x, "avg", 2, pad=True).shape == (1, 3, 3, 1)

    def test_max_grad_ties_go_to_first_in_scan_order(self):
        x = Tensor(np.array([[[[1.0], [1.0]], [[1.0], [1.0]]]]), requires_grad=True)
        T.pool2d(x, "max", 2).sum().backward()
        assert x.grad.reshape(2, 2).tolist() == [[1.0, 0.0], [0.0, 0.0]]

    @pytest.mark.parametrize("kind", ["avg", "max"])
    def test_gradients(self, kind, rng):
        x = Tensor(rng.normal(size=(1, 4, 4, 2)), requires_grad=True)
        weights = rng.normal(size=(1, 2, 2, 2))
        err = gradcheck(lambda: scalarize(T.pool2d(x, kind, 2), weights), [x])
        assert err < 1e-4


class TestNormalize:
    def test_rmsnorm_unit_vector(self):
        out = T.rmsnorm(Tensor([1.0, 1.0, 1.0]))
        np.testing.assert_allclose(out.data, [1.0, 1.0, 1.0], atol=1e-5)

    def test_rmsnorm_closed_form(self):
        out = T.rmsnorm(Tensor([3.0, 4.0]))
        expected = np.array([3.0, 4.0]) / math.sqrt(12.5)
        np.testing.assert_allclose(out.data, expected, atol=1e-6)

    def test_layernorm_standardizes(self, rng):
        x = Tensor(rng.normal(2.0, 3.0, size=(4, 7)))
        out = T.layernorm(x).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)

    def test_eps_must_be_positive(self):
        with pytest.raises(ConfigError):
            T.layernorm(Tensor([1.0, 2.0]), eps=0.0)
        with pytest.raises(ConfigError):
            T.rmsnorm(Tensor([1.0, 2.0]), eps=-1.0)

    def test_batchnorm_train_stats_and_running_update(self, rng):
        x = Tensor(rng.normal(3.0, 2.0, size=(4, 5, 5, 3)))
        gain = Tensor(np.ones(3))
        bias = Tensor(np.zeros(3))
        running_mean = np.zeros(3)
        running_var = np.ones(3)
        out = T.batchnorm(x, gain, bias, running_mean, running_var, training=True)
        np.testing.assert_allclose(out.data.mean(axis=(0, 1, 2)), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.data.var(axis=(0, 1, 2)), 1.0, atol=1e-3)
        batch_mean = x.data.mean(axis=(0, 1, 2))
        np.testing.assert_allclose(running_mean, 0.1 * batch_mean, atol=1e-12)

    def test_batchnorm_eval_uses_running_stats(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 3, 2)))
        gain, bias = Tensor(np.ones(2)), Tensor(np.zeros(2))
        mean, var = np.array([1.0, -1.0]), np.array([4.0, 0.25])
        out = T.batchnorm(x, gain, bias, mean, var, training=False)
        expected = (x.data - mean) / np.sqrt(var + 1e-5)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    @pytest.mark.parametrize("norm", ["layer", "rms", "batch"])
    def test_gradients(self, norm, rng):
        x = Tensor(rng.normal(size=(2, 3, 3, 4)), requires_grad=True)
        gain = Tensor(rng.normal(1.0, 0.1, size=4), requires_grad=True)
        bias = Tensor(rng.normal(size=4), requires_grad=True)
        weights = rng.normal(size=(2, 3, 3, 4))
        if norm == "layer":
            run = lambda: scalarize(T.layernorm(x, gain, bias), weights)
            tensors = [x, gain, bias]
        elif norm == "rms":
            run = lambda: scalarize(T.rmsnorm(x, gain), weights)
            tensors = [x, gain]
        else:
            rm, rv = np.zeros(4), np.ones(4)
            run = lambda: scalarize(
                T.batchnorm(x, gain, bias, rm, rv, training=True, update_running=False),
                weights)
            tensors = [x, gain, bias]
        assert gradcheck(run, tensors) < 1e-4


class TestElementwise:
    def test_sigmoid_zero(self):
        assert T.sigmoid(Tensor([0.0])).data.tolist() == [0.5]

    def test_relu_cases(self):
        out = T.relu(Tensor([-2.0, 0.0, 3.0]))
        assert out.data.tolist() == [0.0, 0.0, 3.0]

    def test_relu_subgradient_at_zero_is_zero(self):
        x = Tensor([0.0], requires_grad=True)
        T.relu(x).sum().backward()
        assert x.grad.tolist() == [0.0]

    def test_concat_shapes(self, rng):
        a = Tensor(rng.normal(size=(3, 4, 2)))
        b = Tensor(rng.normal(size=(3, 4, 5)))
        assert T.concat([a, b], axis=-1).shape == (3, 4, 7)

    def test_concat_mismatch_raises(self, rng):
        a = Tensor(rng.normal(size=(3, 4, 2)))
        b = Tensor(rng.normal(size=(2, 4, 5)))
        with pytest.raises(ShapeError):
            T.concat([a, b], axis=-1)

    @given(st.lists(st.floats(-5, 5), min_size=2, max_size=6))
    @settings(max_examples=30, deadline=None)
    def test_smooth_unary_gradients(self, values):
        base = np.array(values)
        weights = np.cos(base)  # deterministic, nonzero-ish projection
        for op in (T.exp, T.sigmoid, T.gelu):
            x = Tensor(base.copy(), requires_grad=True)
            assert gradcheck(lambda: scalarize(op(x), weights), [x]) < 1e-4

    def test_broadcast_binary_gradients(self, rng):
        a = Tensor(rng.normal(size=(3, 1, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 4)) + 3.0, requires_grad=True)
        weights = rng.normal(size=(3, 2, 4))
        for op in (T.add, T.sub, T.mul, T.div):
            assert gradcheck(lambda: scalarize(op(a, b), weights), [a, b]) < 1e-4

    def test_reductions_and_layout_gradients(self, rng):
        x = Tensor(rng.normal(size=(3, 4, 2)), requires_grad=True)
        cases = [
            lambda: x.sum(axis=1).sum(),
            lambda: x.mean(axis=(0, 2)).sum(),
            lambda: x.max(axis=1, keepdims=True).sum(),
            lambda: x.reshape((4, 6)).sum(),
            lambda: x.transpose((2, 0, 1)).sum(),
            lambda: x[1:, ::2, :].sum(),
            lambda: T.pad(x, ((1, 0), (0, 2), (1, 1))).sum(),
        ]
        for run in cases:
            assert gradcheck(run, [x]) < 1e-4

    def test_scalar_promotion(self):
        x = Tensor([2.0], requires_grad=True)
        y = 1.0 - 0.5 * x / 2.0 + x ** 2
        y.sum().backward()
        assert y.data.tolist() == [4.5]
        np.testing.assert_allclose(x.grad, [3.75])


class TestBackwardEngine:
    def test_sum_gradient_is_ones(self, rng):
        x = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        x.sum().backward()
        assert np.array_equal(x.grad, np.ones((3, 3)))

    def test_sum_of_squares_gradient(self, rng):
        x = Tensor(rng.normal(size=5), requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-12)

    def test_shared_node_accumulates_once(self):
        x = Tensor([1.5], requires_grad=True)
        ((x * x) + x).sum().backward()
        np.testing.assert_allclose(x.grad, [2 * 1.5 + 1.0])

    def test_non_scalar_backward_raises(self, rng):
        x = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        with pytest.raises(UsageError):
            (x * 2.0).backward()

    def test_repeated_backward_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        loss = (x * x).sum()
        loss.backward()
        loss.backward()
        np.testing.assert_allclose(x.grad, [12.0])

    def test_zero_grad_clears_stale_gradients(self):
        x = Tensor([3.0], requires_grad=True)
        (x * x).sum().backward()
        x.zero_grad()
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, [6.0])

    def test_tape_is_reverse_topological_and_unique(self):
        x = Tensor([1.0], requires_grad=True)
        y = Tensor([2.0], requires_grad=True)
        product = x * y
        out = (product + x).sum()
        tape = GradTape.from_root(out)
        ids = [id(node) for node in tape.nodes]
        assert len(ids) == len(set(ids))
        order = {id(node): k for k, node in enumerate(tape.nodes)}
        for node in tape.nodes:
            for parent in node._parents:
                if parent.requires_grad:
                    assert order[id(parent)] < order[id(node)]

    def test_no_grad_suppresses_graph(self, rng):
        x = Tensor(rng.normal(size=3), requires_grad=True)
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad and y._parents == ()

    def test_bit_identical_gradients_across_runs(self):
        def one_run():
            rng = np.random.default_rng(42)
            x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            out = T.softmax_lastdim(x @ w)
            scalarize(T.gelu(out), rng.normal(size=(4, 4))).backward()
            return x.grad.copy(), w.grad.copy()

        gx1, gw1 = one_run()
        gx2, gw2 = one_run()
        assert np.array_equal(gx1, gx2) and np.array_equal(gw1, gw2)


class TestTensorInvariants:
    def test_positive_extents_enforced(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 0)))

    def test_finite_checks_detect_nan(self):
        T.set_finite_checks(True)
        try:
            with np.errstate(invalid="ignore"), pytest.raises(NumericsError):
                T.log(Tensor([-1.0]))
        finally:
            T.set_finite_checks(False)

    def test_grad_matches_shape(self, rng):
        x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        x.sum().backward()
        assert x.grad.shape == x.shape

    def test_default_dtype_switch(self):
        with T.default_dtype(np.float32):
            assert Tensor([1.0]).dtype == np.float32
        assert Tensor([1.0]).dtype == np.float64
