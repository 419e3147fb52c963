"""Tensor and autodiff tests: closed-form oracles, exact conv references,
and finite-difference batteries for every differentiable op."""

import itertools

import numpy as np
import pytest

from lsaf import tensor as T
from lsaf.errors import ConfigError, ContractError, ShapeError
from lsaf.tensor import Tensor


def rng(seed):
    return np.random.default_rng(seed)


# ----------------------------------------------------------------------
# straight-line references (written against the math, not the library)


def conv2d_naive(x, w, stride=1, padding=0):
    """Accumulates taps in (cin, kh, kw) order, one scalar add at a time."""
    sh = sw = stride if isinstance(stride, int) else None
    if sh is None:
        sh, sw = stride
    ph = pw = padding if isinstance(padding, int) else None
    if ph is None:
        ph, pw = padding
    cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((cout, oh, ow), dtype=x.dtype)
    for co in range(cout):
        for y in range(oh):
            for z in range(ow):
                acc = x.dtype.type(0.0)
                for ci in range(cin):
                    for i in range(kh):
                        for j in range(kw):
                            acc += w[co, ci, i, j] * xp[ci, y * sh + i, z * sw + j]
                out[co, y, z] = acc
    return out


def conv3d_naive(x, w, stride=1, padding=0):
    st = (stride,) * 3 if isinstance(stride, int) else tuple(stride)
    pd = (padding,) * 3 if isinstance(padding, int) else tuple(padding)
    cin, d, h, wd = x.shape
    cout, _, kd, kh, kw = w.shape
    xp = np.pad(x, ((0, 0),) + tuple((p, p) for p in pd))
    od = (d + 2 * pd[0] - kd) // st[0] + 1
    oh = (h + 2 * pd[1] - kh) // st[1] + 1
    ow = (wd + 2 * pd[2] - kw) // st[2] + 1
    out = np.zeros((cout, od, oh, ow), dtype=x.dtype)
    for co in range(cout):
        for u in range(od):
            for y in range(oh):
                for z in range(ow):
                    acc = x.dtype.type(0.0)
                    for ci in range(cin):
                        for a in range(kd):
                            for i in range(kh):
                                for j in range(kw):
                                    acc += (
                                        w[co, ci, a, i, j]
                                        * xp[ci, u * st[0] + a, y * st[1] + i, z * st[2] + j]
                                    )
                    out[co, u, y, z] = acc
    return out


# ----------------------------------------------------------------------
# matmul


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[3.0, 4.0], [5.0, 6.0]])
        assert np.array_equal((a @ b).data, b.data)

    def test_dot_product_oracle(self):
        out = Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])
        assert out.shape == (1, 1)
        assert out.data[0, 0] == 11.0

    def test_zero_left_operand(self):
        a = Tensor(np.zeros((2, 2)))
        b = Tensor(rng(0).normal(size=(2, 2)))
        assert np.array_equal((a @ b).data, np.zeros((2, 2)))

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"(3, 2).*(3, 2)"):
            Tensor(np.ones((3, 2))) @ Tensor(np.ones((3, 2)))

    def test_batched_broadcast(self):
        a = Tensor(rng(1).normal(size=(4, 2, 3)))
        b = Tensor(rng(2).normal(size=(3, 5)))
        out = a @ b
        assert out.shape == (4, 2, 5)
        assert np.allclose(out.data, a.data @ b.data)


# ----------------------------------------------------------------------
# convolution


class TestConv2d:
    def test_unit_kernel_identity(self):
        x = Tensor(rng(0).normal(size=(1, 4, 4)))
        k = Tensor(np.ones((1, 1, 1, 1)))
        assert np.array_equal(T.conv2d(x, k).data, x.data)

    def test_summation_oracle(self):
        x = Tensor([[[1.0, 2.0], [3.0, 4.0]]])
        k = Tensor(np.ones((1, 1, 2, 2)))
        out = T.conv2d(x, k)
        assert out.shape == (1, 1, 1)
        assert out.data[0, 0, 0] == 10.0

    def test_zero_input(self):
        x = Tensor(np.zeros((2, 5, 5)))
        k = Tensor(rng(3).normal(size=(3, 2, 3, 3)))
        assert not T.conv2d(x, k).data.any()

    def test_non_integral_output_rejected(self):
        x = Tensor(np.zeros((1, 5, 5)))
        k = Tensor(np.zeros((1, 1, 2, 2)))
        with pytest.raises(ConfigError):
            T.conv2d(x, k, stride=2)

    def test_kernel_larger_than_input_rejected(self):
        with pytest.raises(ConfigError):
            T.conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 2, 2))))

    @pytest.mark.parametrize("seed", range(12))
    def test_exact_match_with_naive_loops(self, seed):
        r = rng(seed)
        cin = int(r.integers(1, 5))
        cout = int(r.integers(1, 5))
        h, w = (int(r.integers(2, 6)) for _ in range(2))
        kh = int(r.integers(1, h + 1))
        kw = int(r.integers(1, w + 1))
        x = r.normal(size=(cin, h, w))
        k = r.normal(size=(cout, cin, kh, kw))
        got = T.conv2d(Tensor(x), Tensor(k)).data
        want = conv2d_naive(x, k)
        # bit-for-bit, not approximately: same summation order
        assert np.array_equal(got, want)

    @pytest.mark.parametrize("stride,padding", [(2, 0), (1, 1), (2, 1), ((1, 2), (2, 1))])
    def test_exact_match_strided_padded(self, stride, padding):
        r = rng(99)
        x = r.normal(size=(3, 5, 5))
        k = r.normal(size=(2, 3, 3, 3))
        got = T.conv2d(Tensor(x), Tensor(k), stride=stride, padding=padding).data
        assert np.array_equal(got, conv2d_naive(x, k, stride, padding))

    def test_batched_equals_per_sample(self):
        r = rng(7)
        x = r.normal(size=(3, 2, 4, 4))
        k = r.normal(size=(2, 2, 3, 3))
        full = T.conv2d(Tensor(x), Tensor(k)).data
        for i in range(3):
            single = T.conv2d(Tensor(x[i]), Tensor(k)).data
            assert np.array_equal(full[i], single)


class TestConv3d:
    def test_unit_kernel_identity(self):
        x = Tensor(rng(0).normal(size=(1, 3, 3, 3)))
        k = Tensor(np.ones((1, 1, 1, 1, 1)))
        assert np.array_equal(T.conv3d(x, k).data, x.data)

    def test_summation_oracle(self):
        x = Tensor(np.ones((1, 2, 2, 2)))
        k = Tensor(np.ones((1, 1, 2, 2, 2)))
        out = T.conv3d(x, k)
        assert out.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 8.0

    def test_zero_input(self):
        x = Tensor(np.zeros((1, 3, 4, 4)))
        k = Tensor(rng(1).normal(size=(2, 1, 2, 3, 3)))
        assert not T.conv3d(x, k).data.any()

    @pytest.mark.parametrize("seed", range(8))
    def test_exact_match_with_naive_loops(self, seed):
        r = rng(seed + 100)
        cin = int(r.integers(1, 4))
        cout = int(r.integers(1, 3))
        d, h, w = (int(r.integers(2, 5)) for _ in range(3))
        kd = int(r.integers(1, d + 1))
        kh = int(r.integers(1, h + 1))
        kw = int(r.integers(1, w + 1))
        x = r.normal(size=(cin, d, h, w))
        k = r.normal(size=(cout, cin, kd, kh, kw))
        got = T.conv3d(Tensor(x), Tensor(k)).data
        assert np.array_equal(got, conv3d_naive(x, k))


# ----------------------------------------------------------------------
# batch norm


class TestBatchNorm:
    def test_standardized_input_passes_through(self):
        x = np.array([[-1.0, 1.0], [1.0, -1.0]])  # each channel zero-mean, unit-var
        out = T.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        assert np.allclose(out.data, x, atol=np.sqrt(1e-5))

    def test_gamma_zero_gives_beta(self):
        x = Tensor(rng(0).normal(size=(4, 3, 2, 2)))
        beta = np.array([1.0, -2.0, 0.5])
        out = T.batch_norm(x, Tensor(np.zeros(3)), Tensor(beta))
        assert np.allclose(out.data, beta.reshape(1, 3, 1, 1) * np.ones_like(x.data))

    def test_two_point_standardization_oracle(self):
        x = Tensor(np.array([[1.0], [3.0]]))  # batch {1, 3}, one channel
        out = T.batch_norm(Tensor(x.data), Tensor(np.ones(1)), Tensor(np.zeros(1)), eps=1e-12)
        assert np.allclose(out.data.ravel(), [-1.0, 1.0], atol=1e-5)

    def test_single_sample_zero_variance_is_zero_not_error(self):
        x = Tensor(np.full((1, 2), 7.0))
        out = T.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)))
        assert np.allclose(out.data, 0.0)

    def test_running_stats_momentum(self):
        run_m = np.zeros(1)
        run_v = np.ones(1)
        x = Tensor(np.array([[2.0], [4.0]]))
        T.batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)),
                     running_mean=run_m, running_var=run_v, training=True)
        # batch mean 3, biased batch var 1
        assert np.allclose(run_m, [0.9 * 0.0 + 0.1 * 3.0])
        assert np.allclose(run_v, [0.9 * 1.0 + 0.1 * 1.0])

    def test_eval_mode_uses_running_stats(self):
        run_m = np.array([10.0])
        run_v = np.array([4.0])
        x = Tensor(np.array([[12.0]]))
        out = T.batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)),
                           running_mean=run_m, running_var=run_v, training=False)
        assert np.allclose(out.data, [(12.0 - 10.0) / np.sqrt(4.0 + 1e-5)])

    def test_eval_without_running_stats_rejected(self):
        with pytest.raises(ContractError):
            T.batch_norm(Tensor(np.zeros((2, 1))), Tensor(np.ones(1)),
                         Tensor(np.zeros(1)), training=False)


# ----------------------------------------------------------------------
# activations


class TestActivations:
    def test_sigmoid_at_zero(self):
        assert T.sigmoid(Tensor(0.0)).item() == 0.5

    def test_sigmoid_extremes_are_finite(self):
        out = T.sigmoid(Tensor([-1e4, 1e4]))
        assert np.all(np.isfinite(out.data))
        assert np.allclose(out.data, [0.0, 1.0])

    def test_softmax_uniform(self):
        out = T.softmax(Tensor([5.0, 5.0, 5.0]), axis=0)
        assert np.allclose(out.data, np.full(3, 1 / 3))

    def test_softmax_closed_form_oracle(self):
        out = T.softmax(Tensor([0.0, np.log(2.0)]), axis=0)
        assert np.allclose(out.data, [1 / 3, 2 / 3], atol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_softmax_sums_to_one(self, seed):
        x = rng(seed).normal(size=(4, 7)) * 10
        out = T.softmax(Tensor(x), axis=1)
        assert np.allclose(out.data.sum(axis=1), 1.0, atol=1e-6)

    @pytest.mark.parametrize("seed", range(10))
    def test_softmax_shift_invariant(self, seed):
        x = rng(seed).normal(size=(3, 5))
        a = T.softmax(Tensor(x), axis=1).data
        b = T.softmax(Tensor(x + 123.456), axis=1).data
        assert np.allclose(a, b, atol=1e-9)

    def test_relu_clamps(self):
        out = T.relu(Tensor([-2.0, 0.0, 3.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 3.0])


# ----------------------------------------------------------------------
# structural ops


class TestStructural:
    def test_transpose_involution(self):
        x = Tensor(rng(0).normal(size=(2, 3, 4)))
        back = x.transpose((1, 0, 2)).transpose((1, 0, 2))
        assert np.array_equal(back.data, x.data)

    def test_concat_row_blocks(self):
        a = Tensor(rng(1).normal(size=(3, 5)))
        b = Tensor(rng(2).normal(size=(3, 5)))
        out = T.concat([a, b], axis=0)
        assert out.shape == (6, 5)

    def test_concat_then_slice_roundtrip(self):
        a = rng(3).normal(size=(2, 4))
        b = rng(4).normal(size=(5, 4))
        out = T.concat([Tensor(a), Tensor(b)], axis=0)
        assert np.array_equal(out.data[:2], a)
        assert np.array_equal(out.data[2:], b)

    def test_concat_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            T.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4)))], axis=0)

    def test_mul_by_ones_identity(self):
        x = Tensor(rng(5).normal(size=(3, 3)))
        out = x * Tensor(np.ones((3, 3)))
        assert np.array_equal(out.data, x.data)

    def test_broadcast_add(self):
        x = Tensor(np.zeros((2, 3)))
        out = x + Tensor([1.0, 2.0, 3.0])
        assert np.array_equal(out.data, [[1, 2, 3], [1, 2, 3]])

    def test_reshape_bad_size_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 3))).reshape(4, 2)

    def test_transpose_bad_axes_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 3))).transpose((0, 0))


# ----------------------------------------------------------------------
# backward


class TestBackward:
    def test_linear_loss_gives_ones(self):
        theta = Tensor(rng(0).normal(size=(3, 4)), requires_grad=True)
        theta.sum().backward()
        assert np.array_equal(theta.grad, np.ones((3, 4)))

    def test_quadratic_oracle(self):
        theta = Tensor([1.0, 2.0], requires_grad=True)
        (theta * theta).sum().backward()
        assert np.allclose(theta.grad, [2.0, 4.0])

    def test_unreachable_parameter_grad_stays_zero(self):
        used = Tensor([1.0], requires_grad=True)
        unused = Tensor([1.0], requires_grad=True)
        used.sum().backward()
        assert unused.grad is None or not unused.grad.any()

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            x.backward()

    def test_repeated_backward_accumulates(self):
        theta = Tensor([2.0], requires_grad=True)
        for _ in range(2):
            loss = (theta * theta).sum()
            loss.backward()
        assert np.allclose(theta.grad, [8.0])
        theta.zero_grad()
        (theta * theta).sum().backward()
        assert np.allclose(theta.grad, [4.0])

    def test_shared_subexpression_fanout(self):
        # y = x*x + x*x must double the gradient of x*x
        x = Tensor([3.0], requires_grad=True)
        sq = x * x
        (sq + sq).sum().backward()
        assert np.allclose(x.grad, [12.0])

    def test_no_grad_suppresses_tape(self):
        x = Tensor([1.0], requires_grad=True)
        with T.no_grad():
            y = (x * x).sum()
        assert y._grad_fn is None and not y.requires_grad


# ----------------------------------------------------------------------
# finite differences


class TestFiniteDiff:
    def test_quadratic_is_nearly_exact(self):
        theta = Tensor(rng(0).normal(size=6), requires_grad=True)
        err = T.finite_diff_check(lambda t: (t * t).sum(), theta)
        assert err < 1e-7

    def test_constant_function_zero_gradients(self):
        theta = Tensor(rng(1).normal(size=4), requires_grad=True)
        err = T.finite_diff_check(lambda t: Tensor(1.0) + (t * 0.0).sum(), theta)
        assert err == 0.0
        assert not theta.grad.any()

    @pytest.mark.parametrize("seed", range(10))
    def test_every_op_battery(self, seed):
        """A composite touching each differentiable op keeps rel error < 1e-4."""
        r = rng(seed)
        theta = Tensor(r.normal(size=(2, 3, 4, 4)) * 0.5, requires_grad=True)
        w2 = Tensor(r.normal(size=(2, 3, 3, 3)) * 0.3)
        mat = Tensor(r.normal(size=(4, 3)) * 0.4)

        def f(t):
            c = T.conv2d(t, w2, stride=1, padding=1)            # (2,2,4,4)
            c = T.relu(c)
            g = T.sigmoid(c.mean(axis=(2, 3)))                  # (2,2)
            s = T.softmax(c.reshape(2, 32), axis=1)             # (2,32)
            m = (s.reshape(2, 2, 4, 4).sum(axis=1) @ mat)       # (2,4,3)
            joined = T.concat([m, m * 2.0], axis=2)             # (2,4,6)
            flip = joined.transpose((0, 2, 1))
            total = flip.sum() + (g * g).sum() + (c.exp() * 1e-3).sum()
            return total + ((t * t).sum() + 1.0).sqrt() + ((t * t).sum() + 1.0).log()

        err = T.finite_diff_check(f, theta, max_coords=12, seed=seed)
        assert err < 1e-4

    @pytest.mark.parametrize("seed", range(10))
    def test_conv3d_and_batchnorm_battery(self, seed):
        r = rng(seed + 50)
        theta = Tensor(r.normal(size=(2, 1, 4, 4, 4)) * 0.5, requires_grad=True)
        k = Tensor(r.normal(size=(2, 1, 2, 2, 2)) * 0.4)
        gamma = Tensor(r.normal(size=2) * 0.2 + 1.0, requires_grad=True)
        beta = Tensor(r.normal(size=2) * 0.2, requires_grad=True)

        def f(t):
            c = T.conv3d(t, k)                                   # (2,2,3,3,3)
            b = T.batch_norm(c, gamma, beta)
            return (b * b).mean() + T.relu(c).sum() * 0.1

        err = T.finite_diff_check(f, theta, max_coords=10, seed=seed)
        assert err < 1e-4

    @pytest.mark.parametrize("seed", range(10))
    def test_cross_entropy_battery(self, seed):
        r = rng(seed + 200)
        theta = Tensor(r.normal(size=(4, 5)), requires_grad=True)
        labels = r.integers(0, 5, size=4)
        err = T.finite_diff_check(lambda t: T.cross_entropy(t, labels), theta)
        assert err < 1e-4

    def test_div_pow_battery(self):
        theta = Tensor(rng(9).normal(size=5) + 3.0, requires_grad=True)
        err = T.finite_diff_check(lambda t: ((t ** 3) / (t + 1.0)).sum(), theta)
        assert err < 1e-4


# ----------------------------------------------------------------------
# cross-entropy values


class TestCrossEntropy:
    def test_uniform_logits_log_k(self):
        logits = Tensor(np.zeros((2, 4)), requires_grad=True)
        loss = T.cross_entropy(logits, np.array([0, 3]))
        assert np.allclose(loss.item(), np.log(4.0))

    def test_matches_manual_log_softmax(self):
        r = rng(4)
        z = r.normal(size=(6, 3))
        labels = r.integers(0, 3, size=6)
        loss = T.cross_entropy(Tensor(z), labels).item()
        logp = z - np.log(np.exp(z - z.max(1, keepdims=True)).sum(1, keepdims=True)) - z.max(1, keepdims=True)
        want = -logp[np.arange(6), labels].mean()
        assert np.allclose(loss, want)

    def test_bad_label_rejected(self):
        with pytest.raises(ContractError):
            T.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


# ----------------------------------------------------------------------
# dtype and checked mode


def test_default_dtype_switch():
    T.set_default_dtype(np.float32)
    try:
        assert Tensor([1.0]).dtype == np.float32
    finally:
        T.set_default_dtype(np.float64)
    assert Tensor([1.0]).dtype == np.float64


def test_checked_mode_flags_nonfinite():
    from lsaf.errors import NumericError

    T.set_checked(True)
    try:
        with pytest.raises(NumericError):
            Tensor([np.inf])
    finally:
        T.set_checked(False)


def test_finite_values_invariant_shape():
    t = Tensor(rng(0).normal(size=(2, 3)))
    assert t.size == 6 and t.shape == (2, 3)
    assert np.all(np.isfinite(t.data))
