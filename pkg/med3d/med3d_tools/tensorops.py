""" Reverse-mode differentiation over numpy arrays.

Every op returns a new Tensor that remembers its parents and a closure pushing the output
gradient back to them. backward() orders the graph topologically and runs the closures in
reverse. Feature maps use the N x C x D x H x W layout.
"""

import logging

import numpy as np

from . import interpolate
from .med3derrors import NonFiniteTensor, NotScalar, ShapeMismatch, TargetOutOfRange

logger = logging.getLogger(__name__)


class Tensor(object):

    def __init__(self, data, requires_grad=False, name=None):

        data = np.asarray(data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float32)

        self.data = data
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._prev = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self, params=None):
        return backward(self, params)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def sum(self):
        return tensor_sum(self)

    def __repr__(self):
        return 'Tensor(shape={}, dtype={}, requires_grad={})'.format(self.shape, self.dtype, self.requires_grad)


def as_tensor(value, dtype=None):

    if isinstance(value, Tensor):
        return value

    return Tensor(np.asarray(value, dtype=dtype if dtype is not None else np.float32))


def _make(data, parents, backward_fn):

    if not np.all(np.isfinite(data)):
        raise NonFiniteTensor('op produced NaN or Inf values')

    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))

    if out.requires_grad:
        out._prev = tuple(parents)
        out._backward = backward_fn

    return out


def _accum(t, g):

    if not t.requires_grad:
        return

    g = np.asarray(g, dtype=t.data.dtype)
    if g.shape != t.data.shape:
        raise ShapeMismatch('gradient shape {} does not match {}'.format(g.shape, t.data.shape))

    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _topo_order(root):

    # iterative DFS, deep residual graphs overflow the recursion limit

    order = []
    visited = set()
    stack = [(root, False)]

    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._prev:
            if id(parent) not in visited:
                stack.append((parent, False))

    return order


def backward(loss, params=None):

    """Accumulate d(loss)/d(leaf) into every reachable requires_grad leaf.

    params, when given, is an iterable of (name, Tensor); parameters the loss does not
    reach receive a zero gradient and their names are returned.
    """

    if loss.size != 1:
        raise NotScalar('backward needs a scalar loss, got shape {}'.format(loss.shape))

    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)

    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        node._backward(node.grad)
        # interior gradients are only needed while the pass is running
        node.grad = None

    disconnected = []
    if params is not None:
        for name, p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
                disconnected.append(name)
        if disconnected:
            logger.debug('%d parameters not reached by the loss', len(disconnected))

    return disconnected


# Elementwise

def add(a, b):

    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch('add needs equal shapes, got {} and {}'.format(a.shape, b.shape))

    def _backward(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), _backward)


def mul(a, b):

    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch('mul needs equal shapes, got {} and {}'.format(a.shape, b.shape))

    def _backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), _backward)


def tensor_sum(a):

    def _backward(g):
        _accum(a, np.broadcast_to(g, a.shape))

    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,), _backward)


def relu(x):

    mask = x.data > 0

    def _backward(g):
        _accum(x, g * mask)

    return _make(x.data * mask, (x,), _backward)


def add_channel_bias(x, bias):

    if bias.shape != (x.shape[1],):
        raise ShapeMismatch('bias of shape {} for {} channels'.format(bias.shape, x.shape[1]))

    view = (1, -1) + (1,) * (x.data.ndim - 2)
    axes = (0,) + tuple(range(2, x.data.ndim))

    def _backward(g):
        _accum(x, g)
        _accum(bias, g.sum(axis=axes))

    return _make(x.data + bias.data.reshape(view), (x, bias), _backward)


# Convolution

def _triple(v):

    if np.isscalar(v):
        return (int(v),) * 3

    return tuple(int(i) for i in v)


def conv_output_extent(n, k, stride, padding, dilation):

    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _offset_slices(offset, stride, dilation, out_sp):

    return tuple(slice(offset[a] * dilation[a], offset[a] * dilation[a] + stride[a] * (out_sp[a] - 1) + 1, stride[a])
                 for a in range(3))


def _conv_forward(xp, w, stride, dilation, out_sp):

    """Direct cross-correlation of a padded input, one kernel offset at a time."""

    n = xp.shape[0]
    out = np.zeros((n,) + tuple(out_sp) + (w.shape[0],), dtype=np.result_type(xp, w))

    for offset in np.ndindex(*w.shape[2:]):
        window = (slice(None), slice(None)) + _offset_slices(offset, stride, dilation, out_sp)
        out += np.tensordot(xp[window], w[(slice(None), slice(None)) + offset], axes=([1], [1]))

    return np.ascontiguousarray(np.moveaxis(out, -1, 1))


def _conv_input_adjoint(g, w, stride, dilation, padded_shape):

    gxp = np.zeros(padded_shape, dtype=np.result_type(g, w))
    out_sp = g.shape[2:]

    for offset in np.ndindex(*w.shape[2:]):
        window = (slice(None), slice(None)) + _offset_slices(offset, stride, dilation, out_sp)
        contrib = np.tensordot(g, w[(slice(None), slice(None)) + offset], axes=([1], [0]))
        gxp[window] += np.moveaxis(contrib, -1, 1)

    return gxp


def _conv_weight_grad(xp, g, w_shape, stride, dilation):

    gw = np.zeros(w_shape, dtype=np.result_type(xp, g))
    out_sp = g.shape[2:]

    for offset in np.ndindex(*w_shape[2:]):
        window = (slice(None), slice(None)) + _offset_slices(offset, stride, dilation, out_sp)
        gw[(slice(None), slice(None)) + offset] = np.tensordot(g, xp[window], axes=([0, 2, 3, 4], [0, 2, 3, 4]))

    return gw


def _pad_spatial(arr, padding):

    if not any(padding):
        return arr

    return np.pad(arr, ((0, 0), (0, 0)) + tuple((p, p) for p in padding))


def _crop_spatial(arr, padding, extents):

    return arr[(slice(None), slice(None)) + tuple(slice(padding[a], padding[a] + extents[a]) for a in range(3))]


def conv3d(x, w, stride=1, padding=0, dilation=1):

    """Bias-free 3D cross-correlation with zero padding. w is Cout x Cin x k x k x k."""

    stride, padding, dilation = _triple(stride), _triple(padding), _triple(dilation)

    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ShapeMismatch('conv3d needs 5D input and weight, got {} and {}'.format(x.shape, w.shape))
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatch('input has {} channels, weight expects {}'.format(x.shape[1], w.shape[1]))

    out_sp = tuple(conv_output_extent(x.shape[2 + a], w.shape[2 + a], stride[a], padding[a], dilation[a])
                   for a in range(3))
    if min(out_sp) < 1:
        raise ShapeMismatch('input {} admits no kernel placement for weight {}'.format(x.shape, w.shape))

    xp = _pad_spatial(x.data, padding)

    def _backward(g):
        if x.requires_grad:
            gxp = _conv_input_adjoint(g, w.data, stride, dilation, xp.shape)
            _accum(x, _crop_spatial(gxp, padding, x.shape[2:]))
        if w.requires_grad:
            _accum(w, _conv_weight_grad(xp, g, w.shape, stride, dilation))

    return _make(_conv_forward(xp, w.data, stride, dilation, out_sp), (x, w), _backward)


def conv_transpose_extent(n, k, stride, padding, output_padding, dilation):

    return (n - 1) * stride - 2 * padding + dilation * (k - 1) + output_padding + 1


def conv_transpose3d(x, w, stride=1, padding=0, output_padding=0, dilation=1):

    """Adjoint of conv3d with respect to its input. w is Cin x Cout x k x k x k."""

    stride, padding = _triple(stride), _triple(padding)
    output_padding, dilation = _triple(output_padding), _triple(dilation)

    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ShapeMismatch('conv_transpose3d needs 5D input and weight')
    if x.shape[1] != w.shape[0]:
        raise ShapeMismatch('input has {} channels, weight expects {}'.format(x.shape[1], w.shape[0]))
    if any(output_padding[a] >= max(stride[a], dilation[a]) for a in range(3)):
        raise ShapeMismatch('output_padding must be smaller than stride or dilation')

    out_sp = tuple(conv_transpose_extent(x.shape[2 + a], w.shape[2 + a], stride[a], padding[a],
                                         output_padding[a], dilation[a]) for a in range(3))
    if min(out_sp) < 1:
        raise ShapeMismatch('transposed convolution output would be empty')

    padded_shape = (x.shape[0], w.shape[1]) + tuple(out_sp[a] + 2 * padding[a] for a in range(3))
    full = _conv_input_adjoint(x.data, w.data, stride, dilation, padded_shape)

    def _backward(g):
        gp = _pad_spatial(g, padding)
        if x.requires_grad:
            _accum(x, _conv_forward(gp, w.data, stride, dilation, x.shape[2:]))
        if w.requires_grad:
            _accum(w, _conv_weight_grad(gp, x.data, w.shape, stride, dilation))

    return _make(np.ascontiguousarray(_crop_spatial(full, padding, out_sp)), (x, w), _backward)


# Normalisation and pooling

def batchnorm3d(x, gamma, beta, running_mean, running_var, training=True, momentum=0.1, eps=1e-5):

    """Per-channel batch normalisation.

    Training mode normalises by the batch statistics and updates running_mean / running_var
    in place (unbiased variance, as the running estimate); eval mode uses the running values.
    """

    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch('batchnorm parameters do not match {} channels'.format(c))

    axes = (0,) + tuple(range(2, x.data.ndim))
    view = (1, -1) + (1,) * (x.data.ndim - 2)
    count = x.data.size // c

    if training:
        if count < 2:
            raise ShapeMismatch('batch statistics need more than one value per channel, got {}'.format(x.shape))
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= (1 - momentum)
        running_mean += momentum * mean
        unbiased = var * count / max(count - 1, 1)
        running_var *= (1 - momentum)
        running_var += momentum * unbiased
    else:
        mean = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)

    inv_std = (1. / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(view)) * inv_std.reshape(view)
    out = gamma.data.reshape(view) * xhat + beta.data.reshape(view)

    def _backward(g):
        _accum(beta, g.sum(axis=axes))
        _accum(gamma, (g * xhat).sum(axis=axes))
        if not x.requires_grad:
            return
        dxhat = g * gamma.data.reshape(view)
        if training:
            s1 = dxhat.sum(axis=axes).reshape(view)
            s2 = (dxhat * xhat).sum(axis=axes).reshape(view)
            _accum(x, inv_std.reshape(view) / count * (count * dxhat - s1 - xhat * s2))
        else:
            _accum(x, dxhat * inv_std.reshape(view))

    return _make(out, (x, gamma, beta), _backward)


def maxpool3d(x, kernel=3, stride=2, padding=1):

    kernel, stride, padding = _triple(kernel), _triple(stride), _triple(padding)

    out_sp = tuple(conv_output_extent(x.shape[2 + a], kernel[a], stride[a], padding[a], 1) for a in range(3))
    if min(out_sp) < 1:
        raise ShapeMismatch('input {} too small for max pooling'.format(x.shape))

    xp = np.pad(x.data, ((0, 0), (0, 0)) + tuple((p, p) for p in padding), constant_values=-np.inf)
    ones = (1, 1, 1)

    best = None
    arg = np.zeros(x.shape[:2] + out_sp, dtype=np.int32)
    offsets = list(np.ndindex(*kernel))

    for i, offset in enumerate(offsets):
        window = xp[(slice(None), slice(None)) + _offset_slices(offset, stride, ones, out_sp)]
        if best is None:
            best = window.copy()
            continue
        better = window > best
        best[better] = window[better]
        arg[better] = i

    def _backward(g):
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for i, offset in enumerate(offsets):
            window = (slice(None), slice(None)) + _offset_slices(offset, stride, ones, out_sp)
            gxp[window] += g * (arg == i)
        _accum(x, _crop_spatial(gxp, padding, x.shape[2:]))

    return _make(best, (x,), _backward)


def global_avgpool(x):

    """Mean over D, H, W: N x C x D x H x W -> N x C."""

    axes = tuple(range(2, x.data.ndim))
    count = int(np.prod(x.shape[2:]))

    def _backward(g):
        _accum(x, np.broadcast_to(g.reshape(g.shape + (1,) * len(axes)) / count, x.shape))

    return _make(x.data.mean(axis=axes), (x,), _backward)


def linear(x, w, b):

    """N x F times F x K plus K."""

    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatch('linear shapes {} x {} + {} do not agree'.format(x.shape, w.shape, b.shape))

    def _backward(g):
        _accum(x, g.dot(w.data.T))
        _accum(w, x.data.T.dot(g))
        _accum(b, g.sum(axis=0))

    return _make(x.data.dot(w.data) + b.data, (x, w, b), _backward)


def trilinear_upsample(x, size):

    """Resample the spatial extents of x to size (align-corners = false, edge clamped)."""

    size = _triple(size)
    if min(size) < 1:
        raise ValueError('target extents must be >= 1')

    in_sp = x.shape[2:]
    weights = [None if in_sp[a] == size[a] else interpolate.linear_weights(in_sp[a], size[a]).astype(x.dtype)
               for a in range(3)]

    out = x.data
    for a in range(3):
        if weights[a] is not None:
            out = interpolate.apply_axis(out, weights[a], 2 + a)

    def _backward(g):
        for a in range(3):
            if weights[a] is not None:
                g = interpolate.apply_axis(g, weights[a].T, 2 + a)
        _accum(x, g)

    return _make(np.ascontiguousarray(out), (x,), _backward)


# Losses

def log_softmax(logits, axis=1):

    m = logits.max(axis=axis, keepdims=True)
    shifted = logits - m

    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(logits, axis=1):

    return np.exp(log_softmax(logits, axis))


def softmax_cross_entropy(logits, targets, ignore_label=None):

    """Mean -log softmax(logits)[target] over the positions not equal to ignore_label."""

    c = logits.shape[1]
    targets = np.asarray(targets)

    if targets.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeMismatch('targets {} do not match logits {}'.format(targets.shape, logits.shape))

    z = np.moveaxis(logits.data, 1, -1).reshape(-1, c)
    t = targets.reshape(-1).astype(np.int64)

    keep = np.ones(t.shape, dtype=bool) if ignore_label is None else t != ignore_label
    if np.any((t[keep] < 0) | (t[keep] >= c)):
        raise TargetOutOfRange('targets must lie in [0, {})'.format(c))

    count = int(keep.sum())
    logp = log_softmax(z, axis=1)
    rows = np.nonzero(keep)[0]

    loss = -logp[rows, t[rows]].sum() / count if count else 0.

    def _backward(g):
        if count == 0:
            _accum(logits, np.zeros_like(logits.data))
            return
        grad = np.exp(logp)
        grad[rows, t[rows]] -= 1
        grad[~keep] = 0
        grad *= g / count
        grad = np.moveaxis(grad.reshape(logits.shape[:1] + logits.shape[2:] + (c,)), -1, 1)
        _accum(logits, grad)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), _backward)
