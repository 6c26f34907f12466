import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mobonet import gradcheck
from mobonet import tensor as T
from mobonet.tensor import ShapeError, Tensor


def naive_conv(x, w, b, stride, pad, dilation):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - dilation * (k - 1) - 1) // stride + 1
    wo = (wd + 2 * pad - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    s = b[oc]
                    for ic in range(c):
                        for ki in range(k):
                            for kj in range(k):
                                s += w[oc, ic, ki, kj] * xp[bi, ic, i * stride + ki * dilation, j * stride + kj * dilation]
                    out[bi, oc, i, j] = s
    return out


def naive_deconv(x, w, b, stride):
    n, c, h, wd = x.shape
    _, o, k, _ = w.shape
    out = np.zeros((n, o, (h - 1) * stride + k, (wd - 1) * stride + k))
    for bi in range(n):
        for ic in range(c):
            for i in range(h):
                for j in range(wd):
                    out[bi, :, i * stride : i * stride + k, j * stride : j * stride + k] += x[bi, ic, i, j] * w[ic]
    return out + b.reshape(1, o, 1, 1)


def test_conv_ones_center_and_corner():
    y = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), 1, 1, 1)
    assert y.data[0, 0, 1, 1] == 9
    assert y.data[0, 0, 0, 0] == 4


def test_dilated_conv_preserves_size():
    x = Tensor(np.ones((1, 2, 10, 12)))
    y = T.conv2d(x, Tensor(np.ones((3, 2, 3, 3))), None, stride=1, pad=2, dilation=2)
    assert y.shape == (1, 3, 10, 12)
    assert T.conv_output_size(10, 3, 1, 2, 2) == 10


@pytest.mark.parametrize("stride,pad,dilation", [(1, 1, 1), (1, 0, 1), (2, 1, 1), (1, 2, 2), (1, 4, 4), (2, 2, 2)])
def test_conv_matches_naive_loop(stride, pad, dilation):
    rng = np.random.default_rng(stride * 10 + pad + dilation)
    x = rng.standard_normal((2, 3, 7, 9))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    y = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad, dilation)
    np.testing.assert_allclose(y.data, naive_conv(x, w, b, stride, pad, dilation), rtol=0, atol=1e-12)


def test_deconv_matches_scatter_oracle():
    rng = np.random.default_rng(3)
    x, w, b = rng.standard_normal((2, 3, 4, 5)), rng.standard_normal((3, 2, 2, 2)), rng.standard_normal(2)
    y = T.conv_transpose2d(Tensor(x), Tensor(w), Tensor(b), 2)
    np.testing.assert_allclose(y.data, naive_deconv(x, w, b, 2), atol=1e-12)


def test_deconv_single_pixel_scatter():
    y = T.conv_transpose2d(Tensor(np.full((1, 1, 1, 1), 2.5)), Tensor(np.ones((1, 1, 2, 2))), Tensor(np.zeros(1)), 2)
    assert y.shape == (1, 1, 2, 2)
    assert np.all(y.data == 2.5)


def test_deconv_doubles_table_resolution():
    x = Tensor(np.zeros((1, 256, 20, 28), dtype=np.float32))
    y = T.conv_transpose2d(x, Tensor(np.zeros((256, 256, 2, 2), dtype=np.float32)), None, 2)
    assert y.shape == (1, 256, 40, 56)


def test_maxpool_window_and_shape():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    assert T.maxpool2(x).data.item() == 4
    big = Tensor(np.zeros((1, 64, 320, 448), dtype=np.float32))
    assert T.maxpool2(big).shape == (1, 64, 160, 224)


def test_maxpool_tie_goes_to_first_row_major():
    x = Tensor(np.full((1, 1, 2, 2), 7.0), requires_grad=True)
    T.backward(T.sum(T.maxpool2(x)))
    np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_elementwise_examples():
    r = T.relu(Tensor(np.array([-2.0, 0.0, 3.0])))
    np.testing.assert_array_equal(r.data, [0.0, 0.0, 3.0])
    assert T.sigmoid(Tensor(np.zeros(3))).data[0] == 0.5
    a, b = Tensor(np.zeros((1, 256, 4, 4))), Tensor(np.zeros((1, 256, 4, 4)))
    assert T.concat_channels(a, b).shape == (1, 512, 4, 4)


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor(np.zeros((1, 1, 2, 2)), requires_grad=True)
    T.backward(T.sum(T.relu(x)))
    assert np.all(x.grad == 0)


def test_backward_examples():
    x = Tensor(np.array([0.5, 1.0, 2.0]), requires_grad=True)
    T.backward(T.sum(T.relu(x)))
    np.testing.assert_array_equal(x.grad, np.ones(3))

    y = Tensor(np.array([[1.0, -3.0]]), requires_grad=True)
    T.backward(T.sum(T.add(y, y)))
    np.testing.assert_array_equal(y.grad, [[2.0, 2.0]])


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        T.backward(T.relu(x))


def test_diamond_graph_visits_each_node_once():
    # a feeds two paths that rejoin; gradient must be summed once per path
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    a = T.relu(x)
    loss = T.sum(T.add(T.scale(a, 3.0), T.add(a, a)))
    T.backward(loss)
    np.testing.assert_array_equal(x.grad, [5.0, 5.0])


def test_shape_and_argument_errors():
    x = Tensor(np.ones((1, 2, 4, 4)))
    with pytest.raises(ShapeError):
        T.conv2d(x, Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ValueError):
        T.conv2d(x, Tensor(np.ones((1, 2, 3, 3))), stride=0)
    with pytest.raises(ValueError):
        T.conv2d(x, Tensor(np.ones((1, 2, 3, 3))), dilation=0)
    with pytest.raises(ShapeError):
        T.maxpool2(Tensor(np.ones((1, 1, 3, 4))))
    with pytest.raises(ShapeError):
        T.add(x, Tensor(np.ones((1, 2, 4, 5))))
    with pytest.raises(ShapeError):
        T.concat_channels(x, Tensor(np.ones((1, 2, 5, 4))))
    with pytest.raises(ShapeError):
        T.conv_transpose2d(x, Tensor(np.ones((3, 1, 2, 2))))


def test_forward_backward_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(11)
        x = Tensor(rng.standard_normal((2, 3, 8, 8)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
        y = T.sigmoid(T.conv2d(T.maxpool2(T.relu(x)), w, None, 1, 2, 2))
        loss = T.sum_squares(y)
        T.backward(loss)
        return loss.data.copy(), x.grad.copy(), w.grad.copy()

    for a, b in zip(run(), run()):
        assert a.tobytes() == b.tobytes()


def test_leaf_grad_shape_matches_values():
    w = Tensor(np.ones((2, 3, 3, 3)), requires_grad=True)
    assert w.grad.shape == w.data.shape
    assert Tensor(np.ones(2)).grad is None


@settings(max_examples=40, deadline=None)
@given(
    h=st.integers(4, 12),
    w=st.integers(4, 12),
    k=st.sampled_from([1, 3, 5]),
    stride=st.integers(1, 3),
    dilation=st.integers(1, 2),
    pad=st.integers(0, 3),
)
def test_conv_output_size_formula(h, w, k, stride, dilation, pad):
    if (k - 1) * dilation + 1 > min(h, w) + 2 * pad:
        return
    y = T.conv2d(Tensor(np.zeros((1, 1, h, w))), Tensor(np.zeros((2, 1, k, k))), None, stride, pad, dilation)
    assert y.shape[2] == (h + 2 * pad - dilation * (k - 1) - 1) // stride + 1
    assert y.shape[3] == (w + 2 * pad - dilation * (k - 1) - 1) // stride + 1


@pytest.mark.parametrize("check", gradcheck.default_op_checks(instances=5, seed=1), ids=lambda c: c.name)
def test_op_gradients(check):
    assert check.max_rel_error <= 1e-4


def test_replicate_pad_adjoint():
    # <pad(x), y> == <x, pad^T(y)> for the replicate padding used by the Prewitt layer
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((1, 2, 4, 5)), requires_grad=True)
    y = rng.standard_normal((1, 2, 6, 7))
    p = T.replicate_pad(x, 1)
    T.backward(T.sum(Tensor.from_op(p.data * y, (p,), lambda g: (g * y,), "scale")))
    assert np.isclose((p.data * y).sum(), (x.data * x.grad).sum(), atol=1e-12)
