"""Reverse-mode tape: finite-difference checks, forward oracles, graph
behavior, and numeric-stability edges."""

import numpy as np
import pytest

import _gradcheck
from fovx import autodiff as ad
from fovx.autodiff import Tensor
from fovx.errors import GraphError, ShapeError


@pytest.mark.parametrize("name", sorted(_gradcheck.CASES))
def test_gradcheck(name):
    checked = _gradcheck.run_case(name, seed=sum(name.encode()), n_points=10)
    assert checked >= 1


# -- graph mechanics --------------------------------------------------------


def test_backward_requires_scalar():
    t = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(GraphError):
        ad.mul(t, t).backward()


def test_backward_rejects_nonfinite_loss():
    t = Tensor(np.array(np.inf), requires_grad=True)
    with pytest.raises(GraphError):
        ad.mul(t, t).backward()


def test_grad_buffers_zeroed_between_backwards():
    a = Tensor(np.array([3.0]), requires_grad=True)
    ad.tsum(ad.mul(a, a)).backward()
    first = a.grad.copy()
    ad.tsum(ad.mul(a, a)).backward()
    np.testing.assert_array_equal(a.grad, first)
    assert first[0] == 6.0


def test_diamond_graph_accumulates():
    # y = a*a + a  ->  dy/da = 2a + 1
    a = Tensor(np.array([3.0]), requires_grad=True)
    ad.tsum(ad.add(ad.mul(a, a), a)).backward()
    assert a.grad[0] == 7.0


def test_constant_leaf_gets_zero_grad_and_no_flow():
    a = Tensor(np.array([2.0]), requires_grad=True)
    c = Tensor(np.array([5.0]))
    ad.tsum(ad.mul(a, c)).backward()
    assert a.grad[0] == 5.0
    np.testing.assert_array_equal(c.grad, [0.0])


def test_constant_only_graph_builds_no_tape():
    out = ad.mul(Tensor(np.ones(3)), Tensor(np.ones(3)))
    assert not out.requires_grad
    assert out._parents == ()
    assert out._backward is None


def test_detach_blocks_gradient():
    a = Tensor(np.array([4.0]), requires_grad=True)
    d = a.detach()
    assert not d.requires_grad
    assert d.data is a.data
    loss = ad.tsum(ad.mul(d, d))
    assert not loss.requires_grad
    assert a.grad is None


def test_operator_sugar():
    a = Tensor(np.array([2.0, -3.0]), requires_grad=True)
    b = Tensor(np.array([0.5, 4.0]))
    np.testing.assert_allclose((a + 1.0).data, [3.0, -2.0])
    np.testing.assert_allclose((1.0 + a).data, [3.0, -2.0])
    np.testing.assert_allclose((a - b).data, [1.5, -7.0])
    np.testing.assert_allclose((2.0 - a).data, [0.0, 5.0])
    np.testing.assert_allclose((-a).data, [-2.0, 3.0])
    np.testing.assert_allclose((a * 3.0).data, [6.0, -9.0])
    np.testing.assert_allclose((a / b).data, [4.0, -0.75])
    assert Tensor(np.array(7.5)).item() == 7.5


def test_unbroadcast_sums_over_expanded_axes():
    a = Tensor(np.ones((3, 1)), requires_grad=True)
    b = Tensor(np.ones((1, 4)), requires_grad=True)
    ad.tsum(ad.add(a, b)).backward()
    np.testing.assert_array_equal(a.grad, np.full((3, 1), 4.0))
    np.testing.assert_array_equal(b.grad, np.full((1, 4), 3.0))


def test_dtype_preserved():
    x32 = Tensor(np.ones((1, 2, 4, 4), dtype=np.float32), requires_grad=True)
    w = Tensor(np.ones((3, 2, 3, 3), dtype=np.float32), requires_grad=True)
    b = Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)
    y = ad.conv2d(x32, w, b, stride=1, pad=1)
    assert y.dtype == np.float32
    assert ad.sigmoid(y).dtype == np.float32
    loss = ad.tmean(ad.mul(y, y))
    assert loss.dtype == np.float32
    loss.backward()
    assert x32.grad.dtype == np.float32
    assert ad.exp(Tensor(np.zeros(3))).dtype == np.float64


# -- forward-value oracles ---------------------------------------------------


def _conv_ref(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    out = np.empty((n, f, oh, ow))
    for bi in range(n):
        for fi in range(f):
            for oi in range(oh):
                for oj in range(ow):
                    patch = xp[bi, :, oi * stride : oi * stride + kh, oj * stride : oj * stride + kw]
                    out[bi, fi, oi, oj] = (patch * w[fi]).sum() + b[fi]
    return out


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_forward_matches_loops(stride, pad):
    rng = np.random.default_rng(10)
    x = rng.normal(size=(2, 3, 6, 7))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    got = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad).data
    np.testing.assert_allclose(got, _conv_ref(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError):
        ad.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 5, 3, 3))), Tensor(np.zeros(3)))


def test_matmul_rejects_non_2d():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.zeros((2, 3, 4))), Tensor(np.zeros((4, 5))))


def test_instance_norm_forward():
    rng = np.random.default_rng(11)
    x = rng.normal(2.0, 3.0, size=(2, 3, 5, 6))
    gamma = rng.uniform(0.5, 1.5, 3)
    beta = rng.normal(size=3)
    got = ad.instance_norm(Tensor(x), Tensor(gamma), Tensor(beta)).data
    mu = x.mean(axis=(2, 3), keepdims=True)
    var = x.var(axis=(2, 3), keepdims=True)
    ref = gamma.reshape(1, 3, 1, 1) * (x - mu) / np.sqrt(var + 1e-5) + beta.reshape(1, 3, 1, 1)
    np.testing.assert_allclose(got, ref, rtol=1e-10, atol=1e-12)


def test_upsample2x_forward():
    a = np.arange(8.0).reshape(1, 2, 2, 2)
    got = ad.upsample2x(Tensor(a)).data
    ref = np.kron(a, np.ones((1, 1, 2, 2)))
    np.testing.assert_array_equal(got, ref)


def test_global_avg_pool_forward():
    rng = np.random.default_rng(12)
    a = rng.normal(size=(3, 4, 5, 6))
    np.testing.assert_allclose(
        ad.global_avg_pool(Tensor(a)).data, a.mean(axis=(2, 3)), rtol=1e-12
    )


def test_broadcast_hw_forward_and_guard():
    z = np.array([[1.0, 2.0], [3.0, 4.0]])
    got = ad.broadcast_hw(Tensor(z), 2, 3).data
    assert got.shape == (2, 2, 2, 3)
    assert (got[0, 1] == 2.0).all() and (got[1, 0] == 3.0).all()
    with pytest.raises(ShapeError):
        ad.broadcast_hw(Tensor(np.zeros((2, 2, 2))), 2, 2)


def test_tsum_tmean_values():
    rng = np.random.default_rng(13)
    a = rng.normal(size=(2, 3, 4))
    np.testing.assert_allclose(ad.tsum(Tensor(a), axis=1, keepdims=True).data, a.sum(axis=1, keepdims=True))
    np.testing.assert_allclose(ad.tsum(Tensor(a)).data, a.sum())
    np.testing.assert_allclose(ad.tmean(Tensor(a), axis=2).data, a.mean(axis=2), rtol=1e-12)
    np.testing.assert_allclose(ad.tmean(Tensor(a)).data, a.mean(), rtol=1e-12)


def test_concat_forward():
    a, b = np.ones((1, 2, 2, 2)), np.zeros((1, 3, 2, 2))
    got = ad.concat([Tensor(a), Tensor(b)], axis=1).data
    np.testing.assert_array_equal(got, np.concatenate([a, b], axis=1))


# -- masked L1 ---------------------------------------------------------------


def test_masked_l1_value_and_grad():
    pred = Tensor(np.array([[1.0, 2.0], [3.0, -4.0]]), requires_grad=True)
    truth = np.zeros((2, 2))
    mask = np.array([[1.0, 0.0], [0.0, 1.0]])
    loss = ad.masked_l1(pred, truth, mask)
    assert loss.item() == 2.5
    loss.backward()
    np.testing.assert_array_equal(pred.grad, [[0.5, 0.0], [0.0, -0.5]])


def test_masked_l1_empty_mask_is_exact_zero():
    pred = Tensor(np.full((2, 2), 9.0), requires_grad=True)
    loss = ad.masked_l1(pred, np.zeros((2, 2)), np.zeros((2, 2)))
    assert loss.item() == 0.0
    loss.backward()
    np.testing.assert_array_equal(pred.grad, np.zeros((2, 2)))


def test_masked_l1_broadcasts_mask_over_channels():
    pred = Tensor(np.ones((1, 3, 2, 2)), requires_grad=True)
    truth = np.zeros((1, 3, 2, 2))
    mask = np.zeros((2, 2))
    mask[0, 0] = 1.0
    loss = ad.masked_l1(pred, truth, mask)
    assert loss.item() == 1.0  # 3 masked-in pixels, all |1|


# -- kink handling and numeric stability --------------------------------------


def test_clamp_gradient_zero_at_edges():
    a = Tensor(np.array([-0.5, 0.5, 0.0, -0.9, 0.9]), requires_grad=True)
    ad.tsum(ad.clamp(a, -0.5, 0.5)).backward()
    np.testing.assert_array_equal(a.grad, [0.0, 0.0, 1.0, 0.0, 0.0])


def test_sigmoid_softplus_extremes():
    big = Tensor(np.array([1000.0, -1000.0]))
    with np.errstate(over="raise"):
        s = ad.sigmoid(big).data
        sp = ad.softplus(big).data
    np.testing.assert_array_equal(s, [1.0, 0.0])
    np.testing.assert_array_equal(sp, [1000.0, 0.0])


def test_leaky_relu_slopes():
    a = Tensor(np.array([2.0, -2.0]), requires_grad=True)
    ad.tsum(ad.leaky_relu(a, 0.2)).backward()
    np.testing.assert_allclose(a.grad, [1.0, 0.2])
    np.testing.assert_allclose(ad.leaky_relu(Tensor(np.array([3.0, -3.0])), 0.1).data, [3.0, -0.3])
