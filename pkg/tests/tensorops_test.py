import numpy as np
import pytest

from med3d.med3d_tools import tensorops as to
from med3d.med3d_tools.gradcheck import check_gradient
from med3d.med3d_tools.med3derrors import NonFiniteTensor, NotScalar, ShapeMismatch, TargetOutOfRange
from med3d.med3d_tools.tensorops import Tensor

TOL = 1e-5


def _weighted(out, seed=0):

    # a random linear functional, so every output element matters to the gradient

    r = np.random.default_rng(seed).normal(size=out.shape)
    return to.tensor_sum(to.mul(out, Tensor(r)))


def _naive_conv(x, w, stride, padding, dilation):

    xp = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
    k = w.shape[2]
    out_sp = [(x.shape[2 + a] + 2 * padding - dilation * (k - 1) - 1) // stride + 1 for a in range(3)]
    out = np.zeros((x.shape[0], w.shape[0]) + tuple(out_sp))

    for n in range(x.shape[0]):
        for co in range(w.shape[0]):
            for i, j, l in np.ndindex(*out_sp):
                acc = 0.
                for ci in range(w.shape[1]):
                    for a, b, c in np.ndindex(k, k, k):
                        acc += xp[n, ci, i * stride + a * dilation, j * stride + b * dilation,
                                  l * stride + c * dilation] * w[co, ci, a, b, c]
                out[n, co, i, j, l] = acc

    return out


def _naive_conv_transpose(x, w, stride, padding, output_padding):

    k = w.shape[2]
    full_sp = [(x.shape[2 + a] - 1) * stride + k + output_padding for a in range(3)]
    full = np.zeros((x.shape[0], w.shape[1]) + tuple(full_sp))

    for n in range(x.shape[0]):
        for ci in range(w.shape[0]):
            for i, j, l in np.ndindex(*x.shape[2:]):
                for a, b, c in np.ndindex(k, k, k):
                    full[n, :, i * stride + a, j * stride + b, l * stride + c] += x[n, ci, i, j, l] * w[ci, :, a, b, c]

    out_sp = [s - 2 * padding for s in full_sp]
    return full[:, :, padding:padding + out_sp[0], padding:padding + out_sp[1], padding:padding + out_sp[2]]


@pytest.mark.parametrize('stride, padding, dilation', [(1, 0, 1), (2, 1, 1), (1, 2, 2), (2, 2, 2)])
def test_conv3d_matches_direct_sum(stride, padding, dilation):

    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 2, 7, 6, 7))
    w = rng.normal(size=(3, 2, 3, 3, 3))

    out = to.conv3d(Tensor(x), Tensor(w), stride, padding, dilation)

    np.testing.assert_allclose(out.data, _naive_conv(x, w, stride, padding, dilation), rtol=1e-10, atol=1e-10)


def _random_conv_config(rng):

    k = int(rng.choice([1, 2, 3]))
    stride, dilation = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    padding = int(rng.integers(0, 3))
    reach = dilation * (k - 1) + 1
    extents = [int(rng.integers(max(1, reach - 2 * padding), reach + 4)) for _ in range(3)]
    cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 3))

    x = rng.normal(size=(int(rng.integers(1, 3)), cin) + tuple(extents))
    w = rng.normal(size=(cout, cin, k, k, k))

    return x, w, stride, padding, dilation


def test_conv3d_matches_direct_sum_on_random_configurations():

    rng = np.random.default_rng(21)
    dilated = 0

    for _ in range(200):
        x, w, stride, padding, dilation = _random_conv_config(rng)
        dilated += dilation == 2 and w.shape[2] > 1

        out = to.conv3d(Tensor(x), Tensor(w), stride, padding, dilation)

        np.testing.assert_allclose(out.data, _naive_conv(x, w, stride, padding, dilation), rtol=1e-5, atol=1e-8)

    assert dilated > 0


def test_conv_transpose3d_matches_scatter_on_random_configurations():

    rng = np.random.default_rng(22)

    for _ in range(200):
        k = int(rng.choice([1, 2, 3]))
        stride = int(rng.integers(1, 3))
        padding = int(rng.integers(0, (k - 1) // 2 + 1))
        output_padding = int(rng.integers(0, stride))
        extents = tuple(int(v) for v in rng.integers(2, 5, size=3))
        x = rng.normal(size=(1, int(rng.integers(1, 3))) + extents)
        w = rng.normal(size=(x.shape[1], int(rng.integers(1, 3)), k, k, k))

        out = to.conv_transpose3d(Tensor(x), Tensor(w), stride, padding, output_padding)

        np.testing.assert_allclose(out.data, _naive_conv_transpose(x, w, stride, padding, output_padding),
                                   rtol=1e-5, atol=1e-8)


def test_conv3d_is_linear_in_its_input():

    rng = np.random.default_rng(23)

    for _ in range(20):
        x, w, stride, padding, dilation = _random_conv_config(rng)
        y = rng.normal(size=x.shape)
        a, b = rng.normal(size=2)

        def conv(v):
            return to.conv3d(Tensor(v), Tensor(w), stride, padding, dilation).data

        np.testing.assert_allclose(conv(a * x + b * y), a * conv(x) + b * conv(y), rtol=1e-5, atol=1e-8)


def test_conv3d_output_extent():

    x = Tensor(np.zeros((1, 1, 32, 32, 32), dtype=np.float32))
    w = Tensor(np.zeros((4, 1, 7, 7, 7), dtype=np.float32))

    assert to.conv3d(x, w, stride=2, padding=3).shape == (1, 4, 16, 16, 16)
    assert to.conv_output_extent(16, 3, 1, 2, 2) == 16


def test_conv3d_shape_errors():

    x = Tensor(np.zeros((1, 2, 4, 4, 4)))
    with pytest.raises(ShapeMismatch):
        to.conv3d(x, Tensor(np.zeros((3, 1, 3, 3, 3))))
    with pytest.raises(ShapeMismatch):
        to.conv3d(x, Tensor(np.zeros((3, 2, 5, 5, 5))))


@pytest.mark.parametrize('stride, padding, output_padding', [(1, 0, 0), (2, 1, 1), (2, 0, 0)])
def test_conv_transpose3d_matches_scatter(stride, padding, output_padding):

    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 3, 3, 4, 3))
    w = rng.normal(size=(3, 2, 3, 3, 3))

    out = to.conv_transpose3d(Tensor(x), Tensor(w), stride, padding, output_padding)

    np.testing.assert_allclose(out.data, _naive_conv_transpose(x, w, stride, padding, output_padding),
                               rtol=1e-10, atol=1e-10)


def test_conv_transpose_doubles_extent():

    x = Tensor(np.zeros((1, 4, 4, 4, 4), dtype=np.float32))
    w = Tensor(np.zeros((4, 2, 3, 3, 3), dtype=np.float32))

    assert to.conv_transpose3d(x, w, stride=2, padding=1, output_padding=1).shape == (1, 2, 8, 8, 8)


def test_conv_transpose_is_adjoint_of_conv():

    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 2, 6, 6, 6))
    w = rng.normal(size=(3, 2, 3, 3, 3))
    y = rng.normal(size=(1, 3, 3, 3, 3))

    lhs = np.sum(to.conv3d(Tensor(x), Tensor(w), 2, 1).data * y)
    rhs = np.sum(x * to.conv_transpose3d(Tensor(y), Tensor(w), 2, 1, 1).data)

    assert abs(lhs - rhs) < 1e-9 * max(1., abs(lhs))


@pytest.mark.parametrize('stride, padding, dilation', [(1, 1, 1), (2, 1, 1), (1, 2, 2)])
def test_conv3d_gradient(stride, padding, dilation):

    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 2, 5, 5, 5))
    w = rng.normal(size=(2, 2, 3, 3, 3))

    err = check_gradient(lambda a, b: _weighted(to.conv3d(a, b, stride, padding, dilation)), [x, w])
    assert err < TOL


def test_conv_transpose3d_gradient():

    rng = np.random.default_rng(6)
    x = rng.normal(size=(1, 2, 3, 3, 3))
    w = rng.normal(size=(2, 2, 3, 3, 3))

    err = check_gradient(lambda a, b: _weighted(to.conv_transpose3d(a, b, 2, 1, 1)), [x, w])
    assert err < TOL


def test_elementwise_gradients():

    rng = np.random.default_rng(7)
    a = rng.normal(size=(2, 3, 2, 2, 2))
    b = rng.normal(size=(2, 3, 2, 2, 2))
    bias = rng.normal(size=3)

    assert check_gradient(lambda p, q: _weighted(to.mul(to.add(p, q), q)), [a, b]) < TOL
    assert check_gradient(lambda p, c: _weighted(to.add_channel_bias(p, c)), [a, bias]) < TOL


def test_relu_gradient_away_from_kink():

    rng = np.random.default_rng(8)
    x = rng.uniform(0.1, 1., size=(1, 2, 3, 3, 3)) * rng.choice([-1., 1.], size=(1, 2, 3, 3, 3))

    assert check_gradient(lambda t: _weighted(to.relu(t)), [x]) < TOL


@pytest.mark.parametrize('training', [True, False])
def test_batchnorm_gradient(training):

    rng = np.random.default_rng(9)
    x = rng.normal(size=(2, 3, 3, 3, 3)) * 2 + 1
    gamma = rng.normal(size=3)
    beta = rng.normal(size=3)
    running_mean = rng.normal(size=3)
    running_var = rng.uniform(0.5, 2., size=3)

    def build(t, g, b):
        return _weighted(to.batchnorm3d(t, g, b, running_mean, running_var, training=training))

    assert check_gradient(build, [x, gamma, beta]) < TOL


def test_batchnorm_statistics():

    rng = np.random.default_rng(10)
    x = rng.normal(size=(2, 2, 3, 3, 3)) * 3 + 5
    ones, zeros = Tensor(np.ones(2)), Tensor(np.zeros(2))
    running_mean, running_var = np.zeros(2), np.ones(2)

    out = to.batchnorm3d(Tensor(x), ones, zeros, running_mean, running_var, training=True)

    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3, 4)), 0, atol=1e-10)
    np.testing.assert_allclose(out.data.var(axis=(0, 2, 3, 4)), 1, atol=1e-4)

    np.testing.assert_allclose(running_mean, 0.1 * x.mean(axis=(0, 2, 3, 4)))
    np.testing.assert_allclose(running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3, 4), ddof=1))

    before = running_mean.copy()
    to.batchnorm3d(Tensor(x), ones, zeros, running_mean, running_var, training=False)
    assert np.array_equal(running_mean, before)


def test_batchnorm_needs_two_values_per_channel():

    x = Tensor(np.arange(3.).reshape(1, 3, 1, 1, 1))
    ones, zeros = Tensor(np.ones(3)), Tensor(np.zeros(3))
    running_mean, running_var = np.zeros(3), np.ones(3)

    with pytest.raises(ShapeMismatch):
        to.batchnorm3d(x, ones, zeros, running_mean, running_var, training=True)
    assert np.array_equal(running_mean, np.zeros(3))

    out = to.batchnorm3d(x, ones, zeros, running_mean, running_var, training=False)
    assert out.shape == (1, 3, 1, 1, 1)


def test_pooling_and_linear_gradients():

    rng = np.random.default_rng(11)
    x = (rng.permutation(2 * 2 * 5 * 5 * 5).reshape(2, 2, 5, 5, 5) * 0.01).astype(np.float64)
    feats = rng.normal(size=(2, 4))
    w = rng.normal(size=(4, 3))
    b = rng.normal(size=3)

    assert check_gradient(lambda t: _weighted(to.maxpool3d(t, 3, 2, 1)), [x]) < TOL
    assert check_gradient(lambda t: _weighted(to.global_avgpool(t)), [x]) < TOL
    assert check_gradient(lambda f, p, q: _weighted(to.linear(f, p, q)), [feats, w, b]) < TOL


def test_maxpool_output():

    x = np.arange(64, dtype=np.float64).reshape(1, 1, 4, 4, 4)

    out = to.maxpool3d(Tensor(x), 3, 2, 1)

    assert out.shape == (1, 1, 2, 2, 2)
    assert out.data[0, 0, 0, 0, 0] == x[0, 0, 1, 1, 1]
    assert out.data[0, 0, 1, 1, 1] == x[0, 0, 3, 3, 3]


def test_trilinear_upsample_gradient_and_values():

    rng = np.random.default_rng(12)
    x = rng.normal(size=(1, 2, 2, 3, 2))

    assert check_gradient(lambda t: _weighted(to.trilinear_upsample(t, (4, 5, 6))), [x]) < TOL

    const = to.trilinear_upsample(Tensor(np.full((1, 1, 2, 2, 2), 3.)), 8)
    assert const.shape == (1, 1, 8, 8, 8)
    np.testing.assert_allclose(const.data, 3.)


def test_cross_entropy_value_and_gradient():

    rng = np.random.default_rng(13)
    logits = rng.normal(size=(2, 3, 2, 2, 2))
    targets = rng.integers(0, 3, size=(2, 2, 2, 2))
    targets[0, 0, 0, 0] = 255

    assert check_gradient(lambda t: to.softmax_cross_entropy(t, targets, ignore_label=255), [logits]) < TOL

    z = np.moveaxis(logits, 1, -1).reshape(-1, 3)
    t = targets.reshape(-1)
    keep = t != 255
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    expected = -np.mean(np.log(p[keep, t[keep]]))
    loss = to.softmax_cross_entropy(Tensor(logits), targets, ignore_label=255)
    assert abs(float(loss.data) - expected) < 1e-10

    uniform = to.softmax_cross_entropy(Tensor(np.zeros((1, 4, 2, 2, 2))), np.zeros((1, 2, 2, 2), dtype=int))
    assert abs(float(uniform.data) - np.log(4)) < 1e-12


def test_cross_entropy_target_errors():

    logits = Tensor(np.zeros((1, 2, 2, 2, 2)))
    with pytest.raises(TargetOutOfRange):
        to.softmax_cross_entropy(logits, np.full((1, 2, 2, 2), 2))
    with pytest.raises(ShapeMismatch):
        to.softmax_cross_entropy(logits, np.zeros((1, 2, 2)))

    ignored = Tensor(np.zeros((1, 2, 2, 2, 2)), requires_grad=True)
    loss = to.softmax_cross_entropy(ignored, np.full((1, 2, 2, 2), 255), ignore_label=255)
    to.backward(loss)
    assert float(loss.data) == 0.
    assert not np.any(ignored.grad)


def test_backward_contract():

    a = Tensor(np.array([1., 2.]), requires_grad=True)
    b = Tensor(np.array([3., 4.]), requires_grad=True)
    unused = Tensor(np.array([5.]), requires_grad=True)

    with pytest.raises(NotScalar):
        to.backward(to.mul(a, b))

    missing = to.backward(to.tensor_sum(to.mul(a, b)), [('a', a), ('b', b), ('unused', unused)])
    assert missing == ['unused']
    assert np.array_equal(a.grad, [3., 4.]) and np.array_equal(unused.grad, [0.])

    # leaf gradients accumulate until cleared
    to.backward(to.tensor_sum(to.mul(a, b)))
    assert np.array_equal(a.grad, [6., 8.])
    a.zero_grad()
    assert a.grad is None


def test_shared_subexpression_gradient():

    x = Tensor(np.array([2.]), requires_grad=True)
    y = to.mul(x, x)

    to.backward(to.tensor_sum(to.add(y, y)))

    assert np.array_equal(x.grad, [8.])


def test_non_finite_results_raise():

    big = Tensor(np.full((2,), 1e30, dtype=np.float32))
    with np.errstate(over='ignore'):
        with pytest.raises(NonFiniteTensor):
            to.mul(big, big)

    with pytest.raises(ShapeMismatch):
        to.add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))


def _conv_case(rng):
    stride, dilation = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    x = rng.normal(size=(1, 2, 5, 5, 5))
    w = rng.normal(size=(2, 2, 3, 3, 3))
    return lambda a, b: _weighted(to.conv3d(a, b, stride, dilation, dilation)), [x, w]


def _conv_transpose_case(rng):
    stride = int(rng.integers(1, 3))
    x = rng.normal(size=(1, 2, 3, 3, 3))
    w = rng.normal(size=(2, 2, 3, 3, 3))
    return lambda a, b: _weighted(to.conv_transpose3d(a, b, stride, 1, stride - 1)), [x, w]


def _batchnorm_case(rng):
    training = bool(rng.integers(2))
    running_mean, running_var = rng.normal(size=2), rng.uniform(0.5, 2., size=2)
    arrays = [rng.normal(size=(2, 2, 2, 3, 2)) * 2 + 1, rng.normal(size=2), rng.normal(size=2)]
    return lambda t, g, b: _weighted(to.batchnorm3d(t, g, b, running_mean, running_var, training=training)), arrays


def _relu_case(rng):
    x = rng.uniform(0.1, 1., size=(1, 2, 3, 3, 3)) * rng.choice([-1., 1.], size=(1, 2, 3, 3, 3))
    return lambda t: _weighted(to.relu(t)), [x]


def _maxpool_case(rng):
    # distinct values well apart, so no window has a tie within the difference step
    x = rng.permutation(2 * 4 * 4 * 4).reshape(1, 2, 4, 4, 4) * 0.01
    return lambda t: _weighted(to.maxpool3d(t, 3, 2, 1)), [x]


def _upsample_case(rng):
    x = rng.normal(size=(1, 2, 2, 3, 2))
    size = tuple(int(v) for v in rng.integers(2, 6, size=3))
    return lambda t: _weighted(to.trilinear_upsample(t, size)), [x]


def _cross_entropy_case(rng):
    logits = rng.normal(size=(2, 3, 2, 2, 2))
    targets = rng.integers(0, 3, size=(2, 2, 2, 2))
    return lambda t: to.softmax_cross_entropy(t, targets), [logits]


def _linear_case(rng):
    return lambda f, p, q: _weighted(to.linear(f, p, q)), [rng.normal(size=(2, 4)), rng.normal(size=(4, 3)),
                                                          rng.normal(size=3)]


GRADIENT_CASES = {'conv3d': _conv_case, 'conv_transpose3d': _conv_transpose_case, 'batchnorm3d': _batchnorm_case,
                  'relu': _relu_case, 'maxpool3d': _maxpool_case, 'trilinear_upsample': _upsample_case,
                  'softmax_cross_entropy': _cross_entropy_case, 'linear': _linear_case}


@pytest.mark.slow
@pytest.mark.parametrize('seed', range(50))
@pytest.mark.parametrize('op', sorted(GRADIENT_CASES))
def test_gradients_on_random_instances(op, seed):

    build, arrays = GRADIENT_CASES[op](np.random.default_rng([seed, 30]))

    assert check_gradient(build, arrays) < 1e-4


def test_softmax_is_a_distribution_and_loss_non_negative():

    rng = np.random.default_rng(24)

    for _ in range(20):
        logits = rng.normal(scale=5., size=(2, 4, 3, 3, 3))
        targets = rng.integers(0, 4, size=(2, 3, 3, 3))

        np.testing.assert_allclose(to.softmax(logits).sum(axis=1), 1., atol=1e-6)
        assert float(to.softmax_cross_entropy(Tensor(logits), targets).data) >= 0.
