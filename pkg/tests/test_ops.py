import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import naive_conv2d, naive_maxpool
from seeaunet import kernels, ops
from seeaunet.autodiff import Tensor, backward
from seeaunet.errors import ShapeError, StateError


def _t(a, grad=False):
    return Tensor(np.asarray(a, np.float64), requires_grad=grad)


@pytest.mark.parametrize("stride,padding", [(1, "same"), (2, "same"), (1, "valid"), (2, "valid")])
def test_conv_matches_naive_oracle_bitwise(rng, stride, padding):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    got = ops.conv2d(_t(x), _t(w), _t(b), stride, padding).data
    assert np.array_equal(got, naive_conv2d(x, w, b, stride, padding))


def test_same_padding_output_size():
    for h in range(1, 12):
        for s in (1, 2, 3):
            ho, wo, pads = kernels.conv_geometry(h, h, 3, 3, s, "same")
            assert ho == wo == -(-h // s)
            assert pads[0] <= pads[1]


def test_one_by_one_conv_is_channel_matmul(rng):
    x = rng.standard_normal((2, 5, 4, 4))
    w = rng.standard_normal((3, 5, 1, 1))
    got = ops.conv2d(_t(x), _t(w)).data
    ref = np.einsum("nchw,oc->nohw", x, w[:, :, 0, 0])
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_conv_rejects_channel_mismatch(rng):
    with pytest.raises(ShapeError):
        ops.conv2d(_t(rng.standard_normal((1, 2, 4, 4))), _t(rng.standard_normal((3, 4, 3, 3))))


def test_blocked_matmul_matches_numpy(rng):
    a, b, bias = rng.standard_normal((131, 17)), rng.standard_normal((17, 9)), rng.standard_normal(9)
    np.testing.assert_allclose(kernels.blocked_matmul(a, b, bias), a @ b + bias, rtol=1e-12, atol=1e-12)


def test_blocked_matmul_thread_count_invariant(rng):
    a, b = rng.standard_normal((300, 40)), rng.standard_normal((40, 7))
    before = kernels.set_num_threads()
    one = kernels.blocked_matmul(a, b)
    kernels.set_num_threads(before)
    assert np.array_equal(one, kernels.blocked_matmul(a, b))


def test_maxpool_matches_oracle_and_truncates(rng):
    x = rng.standard_normal((1, 2, 5, 7))
    got = ops.maxpool2d(_t(x)).data
    assert got.shape == (1, 2, 2, 3)
    np.testing.assert_array_equal(got, naive_maxpool(x))


def test_maxpool_tie_sends_gradient_to_first():
    x = _t(np.zeros((1, 1, 2, 2)), grad=True)
    backward(ops.sum_all(ops.maxpool2d(x)))
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


def test_relu_subgradient_zero_at_zero():
    x = _t([-1.0, 0.0, 2.0], grad=True)
    backward(ops.sum_all(ops.relu(x)))
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_sigmoid_is_stable_at_extremes():
    out = ops.sigmoid(_t([-1000.0, 0.0, 1000.0])).data
    assert np.all((out > 0) & (out < 1))
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0], atol=1e-15)
    f32 = ops.sigmoid(Tensor(np.array([-200.0, 40.0], np.float32))).data
    assert f32.dtype == np.float32 and np.all((f32 > 0) & (f32 < 1))


def test_upsample_nearest(rng):
    x = rng.standard_normal((1, 1, 2, 3))
    np.testing.assert_array_equal(ops.upsample2d(_t(x), 2).data, x.repeat(2, 2).repeat(2, 3))


def test_concat_channels_shape_check(rng):
    with pytest.raises(ShapeError):
        ops.concat_channels(_t(np.ones((1, 2, 4, 4))), _t(np.ones((1, 2, 2, 2))))


def test_global_avg_pool(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    np.testing.assert_allclose(ops.global_avg_pool(_t(x)).data.reshape(2, 3), x.mean(axis=(2, 3)))


def test_dense_matches_matmul(rng):
    x, w, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3)), rng.standard_normal(3)
    np.testing.assert_allclose(ops.dense(_t(x), _t(w), _t(b)).data, x @ w + b)


class TestBatchNorm:
    def _stats(self, c):
        return Tensor(np.zeros(c)), Tensor(np.ones(c))

    def test_train_normalises_with_batch_stats(self, rng):
        x = rng.standard_normal((4, 3, 5, 5)) * 3 + 2
        rm, rv = self._stats(3)
        out = ops.batchnorm2d(_t(x), _t(np.ones(3)), _t(np.zeros(3)), rm, rv, True).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-10)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-4)

    def test_running_stats_update(self, rng):
        x = rng.standard_normal((4, 2, 3, 3)) + 5
        rm, rv = self._stats(2)
        ops.batchnorm2d(_t(x), _t(np.ones(2)), _t(np.zeros(2)), rm, rv, True)
        m = x.mean(axis=(0, 2, 3))
        v = x.var(axis=(0, 2, 3), ddof=1)
        np.testing.assert_allclose(rm.data, 0.1 * m)
        np.testing.assert_allclose(rv.data, 0.9 + 0.1 * v)

    def test_infer_uses_running_stats_and_does_not_mutate(self, rng):
        x = rng.standard_normal((2, 2, 3, 3))
        rm, rv = Tensor(np.array([1.0, -1.0])), Tensor(np.array([4.0, 0.25]))
        out = ops.batchnorm2d(_t(x), _t(np.ones(2)), _t(np.zeros(2)), rm, rv, False).data
        ref = (x - rm.data[None, :, None, None]) / np.sqrt(rv.data[None, :, None, None] + 1e-5)
        np.testing.assert_allclose(out, ref)
        np.testing.assert_array_equal(rm.data, [1.0, -1.0])

    def test_infer_without_stats_fails(self, rng):
        rm, rv = Tensor(np.array([np.nan])), Tensor(np.ones(1))
        with pytest.raises(StateError):
            ops.batchnorm2d(_t(np.ones((1, 1, 2, 2))), _t(np.ones(1)), _t(np.zeros(1)), rm, rv, False)


@given(
    n=st.integers(1, 2), c=st.integers(1, 3), h=st.integers(1, 7), w=st.integers(1, 7),
    o=st.integers(1, 3), k=st.sampled_from([1, 2, 3]), stride=st.sampled_from([1, 2]),
    seed=st.integers(0, 2**16),
)
def test_conv_oracle_property(n, c, h, w, o, k, stride, seed):
    r = np.random.default_rng(seed)
    x, wt, b = r.standard_normal((n, c, h, w)), r.standard_normal((o, c, k, k)), r.standard_normal(o)
    got = ops.conv2d(_t(x), _t(wt), _t(b), stride, "same").data
    assert np.array_equal(got, naive_conv2d(x, wt, b, stride, "same"))


@given(shape=st.tuples(st.integers(1, 3), st.integers(1, 4)), seed=st.integers(0, 2**16))
def test_broadcast_mul_gradient_shapes(shape, seed):
    r = np.random.default_rng(seed)
    a = _t(r.standard_normal(shape), grad=True)
    b = _t(r.standard_normal((1, shape[1])), grad=True)
    backward(ops.sum_all(ops.mul(a, b)))
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    np.testing.assert_allclose(b.grad[0], a.data.sum(axis=0))
