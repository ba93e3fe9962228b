import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from vala import numerics as nx
from vala.numerics import Tensor


def naive_conv(x, w, b, stride, pad):
    """Loop-level cross-correlation, independent of the im2col path."""
    c, H, W = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((c, H + 2 * pad, W + 2 * pad))
    xp[:, pad : pad + H, pad : pad + W] = x
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((o, Ho, Wo))
    for oc in range(o):
        for i in range(Ho):
            for j in range(Wo):
                acc = 0.0
                for ci in range(c):
                    for u in range(kh):
                        for v in range(kw):
                            acc += xp[ci, i * stride + u, j * stride + v] * w[oc, ci, u, v]
                out[oc, i, j] = acc + (b[oc] if b is not None else 0.0)
    return out


finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


class TestConv2d:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(3, 5, 4))
        w = np.zeros((3, 3, 1, 1))
        w[np.arange(3), np.arange(3)] = 1.0
        out = nx.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3)))
        assert np.array_equal(out.data, x)

    def test_all_ones_kernel_on_twos(self):
        out = nx.conv2d(Tensor(np.full((1, 5, 5), 2.0)), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
        assert out.shape == (1, 3, 3)
        assert np.all(out.data == 18.0)

    def test_inception_tap_shape(self):
        x = Tensor(np.zeros((384, 17, 17)))
        out = nx.conv2d(x, Tensor(np.zeros((128, 384, 1, 1))))
        assert out.shape == (128, 17, 17)

    @pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (2, 1, 3), (1, 1, 1), (3, 2, 2), (2, 0, 1)])
    def test_matches_loop_oracle(self, stride, pad, k):
        rng = np.random.default_rng(stride * 10 + pad + k)
        x = rng.normal(size=(3, 7, 6))
        w = rng.normal(size=(4, 3, k, k))
        b = rng.normal(size=4)
        got = nx.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad).data
        np.testing.assert_allclose(got, naive_conv(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)

    def test_batched_equals_per_image(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 6, 6))
        w = rng.normal(size=(5, 3, 3, 3))
        batched = nx.conv2d(Tensor(x), Tensor(w), None, stride=2, padding=1).data
        for i in range(2):
            np.testing.assert_allclose(batched[i], naive_conv(x[i], w, None, 2, 1), atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(nx.ShapeError, match="channel"):
            nx.conv2d(Tensor(np.zeros((3, 4, 4))), Tensor(np.zeros((2, 4, 1, 1))))

    def test_kernel_larger_than_padded_input(self):
        with pytest.raises(nx.ShapeError):
            nx.conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


class TestLinear:
    def test_hand_product(self):
        out = nx.linear(Tensor(np.array([1.0, 2.0])), Tensor(np.array([[1.0, 1.0], [0.0, 1.0]])), Tensor(np.array([0.0, 1.0])))
        assert out.data.tolist() == [3.0, 3.0]

    def test_identity_and_zero_input(self):
        x = np.array([0.3, -1.2, 4.0])
        assert np.array_equal(nx.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)
        b = np.array([1.0, -2.0])
        assert np.array_equal(nx.linear(Tensor(np.zeros(3)), Tensor(np.ones((2, 3))), Tensor(b)).data, b)

    def test_mismatch(self):
        with pytest.raises(nx.ShapeError):
            nx.linear(Tensor(np.zeros(3)), Tensor(np.zeros((2, 4))))


class TestPooling:
    def test_row_max_and_column_mean(self):
        x = Tensor(np.array([1.0, 5.0, 3.0]).reshape(1, 1, 3))
        assert nx.directional_pool(x, "width", "max").data.item() == 5.0
        y = Tensor(np.array([2.0, 4.0]).reshape(1, 2, 1))
        assert nx.directional_pool(y, "height", "avg").data.item() == 3.0

    @pytest.mark.parametrize("axis,mode", [("width", "max"), ("height", "avg"), ("width", "avg"), ("height", "max")])
    def test_constant_and_shape(self, axis, mode):
        x = Tensor(np.full((2, 3, 4), 1.75))
        out = nx.directional_pool(x, axis, mode)
        assert out.shape == ((2, 3, 1) if axis == "width" else (2, 1, 4))
        assert np.all(out.data == 1.75)

    def test_max_gradient_goes_to_first_argmax(self):
        x = Tensor(np.array([[[2.0, 7.0, 7.0, 1.0]]]), requires_grad=True)
        nx.directional_pool(x, "width", "max").sum().backward()
        assert x.grad.tolist() == [[[0.0, 1.0, 0.0, 0.0]]]

    def test_avg_gradient_is_uniform(self):
        x = Tensor(np.arange(6.0).reshape(1, 3, 2), requires_grad=True)
        nx.directional_pool(x, "height", "avg").sum().backward()
        np.testing.assert_allclose(x.grad, np.full((1, 3, 2), 1 / 3), rtol=0, atol=1e-15)

    def test_global_avg_pool(self):
        assert nx.global_avg_pool(Tensor(np.zeros((128, 17, 17)))).shape == (128, 1, 1)
        one = np.array([[[4.5]]])
        assert np.array_equal(nx.global_avg_pool(Tensor(one)).data, one)
        half = np.array([0.0, 2.0] * 8).reshape(1, 4, 4)
        assert nx.global_avg_pool(Tensor(half)).data.item() == 1.0


class TestActivations:
    def test_closed_forms(self):
        assert nx.sigmoid(Tensor(0.0)).item() == 0.5
        assert nx.softmax(Tensor(np.full(4, 1.3))).data.tolist() == [0.25] * 4
        hs = nx.h_swish(Tensor(np.array([0.0, -3.0, 3.0, 1.0]))).data
        assert hs[0] == 0.0 and hs[1] == 0.0 and hs[2] == 3.0
        assert abs(hs[3] - 4 / 6) < 1e-15
        assert nx.relu(Tensor(np.array([-1.0, 2.0]))).data.tolist() == [0.0, 2.0]

    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=st.floats(-700, 700)))
    def test_softmax_is_a_distribution(self, z):
        p = nx.softmax(Tensor(z), axis=-1).data
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, rtol=0, atol=1e-12)

    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4)), elements=finite))
    def test_shape_preserving(self, x):
        for kind in ("sigmoid", "h_swish", "relu"):
            assert nx.activation(Tensor(x), kind).shape == x.shape

    def test_h_swish_reference(self):
        x = np.linspace(-6, 6, 49)
        np.testing.assert_allclose(nx.h_swish(Tensor(x)).data, x * np.clip(x + 3, 0, 6) / 6, atol=1e-15)

    def test_log_softmax_extreme_logits(self):
        out = nx.log_softmax(Tensor(np.array([[1000.0, 0.0, -1000.0]]))).data
        assert np.all(np.isfinite(out))
        assert out[0, 0] == 0.0


class TestBatchNorm:
    def test_eval_identity(self):
        x = np.random.default_rng(1).normal(size=(4, 3))
        out = nx.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), nx.RunningStats(3), "eval")
        np.testing.assert_allclose(out.data, x / np.sqrt(1 + nx.BN_EPS), rtol=1e-15)

    def test_train_pair(self):
        x = np.array([[-1.0, -1.0], [1.0, 1.0]])
        stats = nx.RunningStats(2)
        out = nx.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), stats, "train")
        expected = np.array([[-1.0, -1.0], [1.0, 1.0]]) / np.sqrt(1 + nx.BN_EPS)
        np.testing.assert_allclose(out.data, expected, rtol=1e-15)
        # running stats: momentum 0.1 toward batch mean 0 and variance 1
        np.testing.assert_allclose(stats.mean, 0.0)
        np.testing.assert_allclose(stats.var, 1.0)

    def test_running_update(self):
        x = np.array([[1.0], [3.0]])
        stats = nx.RunningStats(1)
        nx.batch_norm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), stats, "train")
        assert stats.mean[0] == pytest.approx(0.1 * 2.0)
        assert stats.var[0] == pytest.approx(0.9 * 1.0 + 0.1 * 1.0)

    def test_gamma_zero_gives_beta(self):
        x = np.random.default_rng(2).normal(size=(5, 2, 3, 3))
        out = nx.batch_norm(Tensor(x), Tensor(np.zeros(2)), Tensor(np.array([0.5, -2.0])), nx.RunningStats(2), "train")
        assert np.all(out.data[:, 0] == 0.5) and np.all(out.data[:, 1] == -2.0)

    def test_single_sample_zero_variance(self):
        out = nx.batch_norm(Tensor(np.array([[3.0, 3.0]])), Tensor(np.ones(2)), Tensor(np.zeros(2)), nx.RunningStats(2), "train")
        assert np.all(np.isfinite(out.data)) and np.all(out.data == 0.0)


class TestConcatSplit:
    def test_joint_shape(self):
        joint = nx.concat_hw(Tensor(np.zeros((2, 3, 1))), Tensor(np.zeros((2, 1, 4))))
        assert joint.shape == (2, 7, 1)

    @given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32 - 1))
    def test_roundtrip_bit_exact(self, c, h, w, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(c, h, 1)), rng.normal(size=(c, 1, w))
        ra, rb = nx.split_hw(nx.concat_hw(Tensor(a), Tensor(b)), h, w)
        assert np.array_equal(ra.data, a) and np.array_equal(rb.data, b)
        parts = nx.split(nx.concat([Tensor(a), Tensor(a * 2)], axis=1), [h, h], axis=1)
        assert np.array_equal(parts[0].data, a) and np.array_equal(parts[1].data, a * 2)

    def test_rejects_degenerate_and_mismatch(self):
        with pytest.raises(nx.ShapeError):
            nx.concat_hw(Tensor(np.zeros((2, 0, 1))), Tensor(np.zeros((2, 1, 3))))
        with pytest.raises(nx.ShapeError):
            nx.concat_hw(Tensor(np.zeros((2, 3, 1))), Tensor(np.zeros((3, 1, 3))))


class TestElementwise:
    def test_broadcast_examples(self):
        a = np.random.default_rng(4).normal(size=(2, 3))
        assert np.array_equal(nx.elementwise(Tensor(a), Tensor(np.ones((2, 3))), "mul").data, a)
        assert np.array_equal(nx.elementwise(Tensor(a), Tensor(0.0), "add").data, a)
        out = nx.elementwise(Tensor(2.0), Tensor(np.full((3, 3), 1.5)), "mul")
        assert np.all(out.data == 3.0)

    def test_broadcast_gradient_sums(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.array([[1.0, 2.0, 3.0]]), requires_grad=True)
        (a * b).sum().backward()
        assert b.grad.tolist() == [[2.0, 2.0, 2.0]]
        assert a.grad.tolist() == [[1.0, 2.0, 3.0]] * 2

    def test_incompatible(self):
        with pytest.raises(nx.ShapeError):
            nx.elementwise(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))), "add")


class TestBackward:
    def test_sum_and_square(self):
        x = Tensor(np.array([1.0, -2.0, 3.5]), requires_grad=True)
        x.sum().backward()
        assert x.grad.tolist() == [1.0, 1.0, 1.0]
        y = Tensor(np.array([1.0, -2.0, 3.5]), requires_grad=True)
        (y * y).sum().backward()
        assert y.grad.tolist() == [2.0, -4.0, 7.0]

    def test_repeated_backward_accumulates(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        loss = (x * x).sum()
        loss.backward()
        loss.backward()
        assert x.grad.tolist() == [4.0, 8.0]

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(nx.ShapeError):
            (x * 2.0).backward()

    def test_every_parameter_gets_grad(self):
        rng = np.random.default_rng(5)
        w = Tensor.param(rng.normal(size=(2, 3, 3, 3)), "w")
        unused_path = Tensor.param(rng.normal(size=2), "b")
        x = Tensor(rng.normal(size=(1, 3, 4, 4)))
        nx.conv2d(x, w, unused_path, padding=1).sum().backward()
        assert w.grad is not None and w.grad.shape == w.shape
        assert unused_path.grad.tolist() == [16.0, 16.0]

    def test_no_grad_builds_no_graph(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with nx.no_grad():
            y = x * 3.0
        assert not y.requires_grad

    def test_diamond_graph(self):
        x = Tensor(np.array(2.0), requires_grad=True)
        a = x * 3.0
        (a * a + a).backward()
        assert x.grad == pytest.approx(2 * 3 * 6 + 3)


class TestGradCheck:
    def test_sigmoid_chain(self):
        x = Tensor(np.random.default_rng(6).normal(size=4))
        r = nx.grad_check(lambda t: nx.sigmoid(nx.sigmoid(t) * 2.0), [x])
        assert r.max_rel_error < 1e-6 and r.passed

    def test_directional_max_unique(self):
        x = Tensor(np.random.default_rng(7).permutation(24).reshape(2, 3, 4).astype(float))
        r = nx.grad_check(lambda t: nx.directional_pool(t, "width", "max") * 1.7, [x])
        assert r.max_rel_error < 1e-6

    def test_identity_is_exact(self):
        x = Tensor(np.array([0.5, -1.0, 2.0]))
        r = nx.grad_check(lambda t: t, [x])
        assert r.max_rel_error == 0.0

    def test_relu_kink_is_skipped(self):
        x = Tensor(np.array([0.0, 1.0, -1.0]))
        r = nx.grad_check(lambda t: nx.relu(t), [x])
        assert r.skipped_kinks == 1 and r.checked == 2 and r.passed

    def test_detects_wrong_gradient(self):
        def bad_square(t):
            return Tensor._make(t.data**2, (t,), lambda g: (g * t.data,), "bad_square")

        r = nx.grad_check(bad_square, [Tensor(np.array([1.0, 2.0]))])
        assert not r.passed and r.max_rel_error == pytest.approx(0.5)

    def test_relative_error_floor(self):
        assert nx.relative_error(0.0, 0.0) == 0.0
        assert nx.relative_error(1e-12, 0.0) == pytest.approx(1e-4)


def test_rng_is_reproducible():
    a = nx.make_rng(123).normal(size=5)
    b = nx.make_rng(123).normal(size=5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, nx.make_rng(124).normal(size=5))


@settings(max_examples=30)
@given(hnp.arrays(np.float64, st.integers(1, 12), elements=finite))
def test_tensor_shape_invariant(x):
    t = Tensor(x)
    assert int(np.prod(t.shape)) == t.data.size
    y = Tensor(x.copy(), requires_grad=True)
    y.sum().backward()
    assert y.grad.size == y.data.size
