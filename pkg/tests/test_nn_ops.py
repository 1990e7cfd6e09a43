import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from texstat.gradcheck import gradient_check
from texstat.nn_ops import ConfigurationError, conv2d, conv_output_extent, pool2d, resize_bilinear
from texstat.tensor import Tensor


def naive_conv(x, w, b, stride, pad, dil):
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - dil * (k - 1) - 1) // stride + 1
    wo = (wd + 2 * pad - dil * (k - 1) - 1) // stride + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                acc = b[oc]
                for ic in range(c):
                    for di in range(k):
                        for dj in range(k):
                            acc += w[oc, ic, di, dj] * xp[ic, i * stride + di * dil, j * stride + dj * dil]
                out[oc, i, j] = acc
    return out


def test_conv_scaling_example():
    out = conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.full((1, 1, 1, 1), 2.0)))
    assert np.array_equal(out.data, np.full((1, 3, 3), 2.0))


def test_conv_same_size_padding():
    out = conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1)
    assert out.shape == (1, 3, 3)
    assert out.data[0, 1, 1] == 9.0 and out.data[0, 0, 0] == 4.0


def test_conv_dilated_extent_and_gradient():
    rng = np.random.default_rng(0)
    x, w = rng.normal(size=(1, 7, 7)), rng.normal(size=(1, 1, 3, 3))
    assert conv2d(Tensor(x), Tensor(w), padding=2, dilation=2).shape == (1, 7, 7)
    r = gradient_check(lambda a, k: (conv2d(a, k, padding=2, dilation=2) ** 2).sum(), [x, w])
    assert r.passed, r.max_rel_error


def test_conv_is_cross_correlation():
    x = np.arange(9.0).reshape(1, 3, 3)
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 0, 0] = 1.0        # picks the top-left neighbour, no flip
    out = conv2d(Tensor(x), Tensor(w), padding=1)
    assert out.data[0, 1, 1] == x[0, 0, 0]


@given(st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 3]), st.integers(1, 2), st.integers(0, 2),
       st.integers(1, 2), st.integers(5, 8), st.integers(0, 10 ** 6))
@settings(max_examples=25, deadline=None)
def test_conv_matches_naive_loops(ci, co, k, stride, pad, dil, size, seed):
    rng = np.random.default_rng(seed)
    span = size + 2 * pad - dil * (k - 1) - 1
    x, w, b = rng.normal(size=(ci, size, size)), rng.normal(size=(co, ci, k, k)), rng.normal(size=co)
    if span < 0 or span % stride:
        with pytest.raises(ConfigurationError):
            conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad, dil)
        return
    got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad, dil).data
    assert np.allclose(got, naive_conv(x, w, b, stride, pad, dil), atol=1e-10)


def test_conv_identity_kernel():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 5, 5))
    w = np.eye(3).reshape(3, 3, 1, 1)
    assert np.array_equal(conv2d(Tensor(x), Tensor(w)).data, x)


def test_conv_non_integer_extent():
    with pytest.raises(ConfigurationError):
        conv_output_extent(6, 3, 2, 0, 1)


def test_conv_batched_matches_unbatched():
    rng = np.random.default_rng(2)
    x, w = rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(4, 3, 3, 3))
    batched = conv2d(Tensor(x), Tensor(w), padding=1).data
    for i in range(2):
        assert np.allclose(batched[i], conv2d(Tensor(x[i]), Tensor(w), padding=1).data)


def test_pool_examples():
    x = Tensor(np.array([[[1.0, 3.0], [5.0, 7.0]]]))
    assert pool2d("global-avg", x).data.item() == 4.0
    m = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    assert pool2d("max", m, 2, 2).data.tolist() == [[[4.0]]]


def test_avgpool_gradient_uniform():
    x = Tensor(np.random.default_rng(3).normal(size=(1, 4, 4)), requires_grad=True)
    pool2d("avg", x, 2, 2).sum().backward()
    assert np.allclose(x.grad, 0.25)
    r = gradient_check(lambda a: (pool2d("avg", a, 2, 2) ** 2).sum(), [x.data])
    assert r.passed


def test_maxpool_ties_go_to_first():
    x = Tensor(np.ones((1, 2, 2)), requires_grad=True)
    pool2d("max", x, 2, 2).sum().backward()
    assert x.grad.tolist() == [[[1.0, 0.0], [0.0, 0.0]]]


def test_pool_window_too_large():
    with pytest.raises(ConfigurationError):
        pool2d("avg", Tensor(np.ones((1, 2, 2))), 3, 3)


def test_pool_unknown_kind():
    with pytest.raises(ValueError):
        pool2d("median", Tensor(np.ones((1, 2, 2))), 2, 2)


def test_resize_constant_and_single_pixel():
    const = resize_bilinear(Tensor(np.full((2, 3, 3), 1.5)), factor=2)
    assert const.shape == (2, 6, 6) and np.allclose(const.data, 1.5)
    one = resize_bilinear(Tensor(np.array([[[4.0]]])), factor=2)
    assert np.array_equal(one.data, np.full((1, 2, 2), 4.0))


def test_resize_half_is_avgpool():
    x = Tensor(np.random.default_rng(4).normal(size=(2, 4, 4)))
    assert np.array_equal(resize_bilinear(x, factor=0.5).data, pool2d("avg", x, 2, 2).data)


def test_resize_half_pixel_convention():
    out = resize_bilinear(Tensor(np.array([[[0.0, 1.0]]])), size=(1, 4)).data[0, 0]
    # output centres at 0.25, 0.75, 1.25, 1.75 in input pixel units, minus the half-pixel offset
    assert np.allclose(out, [0.0, 0.25, 0.75, 1.0])


def test_resize_gradient():
    x = np.random.default_rng(5).normal(size=(1, 4, 4))
    w = np.random.default_rng(6).normal(size=(1, 8, 8))
    r = gradient_check(lambda a: (resize_bilinear(a, factor=2) * Tensor(w)).sum(), [x])
    assert r.passed, r.max_rel_error


def test_resize_rejects_empty_target():
    with pytest.raises(ConfigurationError):
        resize_bilinear(Tensor(np.ones((1, 2, 2))), size=(0, 2))
