import numpy as np

from .med3derrors import ShapeMismatch


class OptimizerState(object):

    """Per-parameter buffers keyed by parameter name, plus the hyperparameters.

    SGD keeps one momentum buffer per parameter; Adam keeps first and second moment
    estimates and a step counter.
    """

    def __init__(self, kind='sgd', lr=0.1, momentum=0.9, weight_decay=0.001, betas=(0.9, 0.999), eps=1e-8):

        if kind not in ('sgd', 'adam'):
            raise ValueError('optimizer kind must be sgd or adam')

        self.kind = kind
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.buffers = dict()
        self.first_moment = dict()
        self.second_moment = dict()


def sgd_state(lr=0.1, momentum=0.9, weight_decay=0.001):

    return OptimizerState('sgd', lr=lr, momentum=momentum, weight_decay=weight_decay)


def adam_state(lr=0.001, betas=(0.9, 0.999), eps=1e-8):

    return OptimizerState('adam', lr=lr, momentum=0., weight_decay=0., betas=betas, eps=eps)


def _checked_grad(name, p):

    if p.grad is None:
        return np.zeros_like(p.data)
    if p.grad.shape != p.data.shape:
        raise ShapeMismatch('gradient of {} has shape {}, parameter {}'.format(name, p.grad.shape, p.data.shape))

    return p.grad


def sgd_step(params, state):

    """g = grad + wd * p; buf = momentum * buf + g; p -= lr * buf.

    params is an iterable of (name, Tensor); only the listed parameters are touched.
    """

    state.step_count += 1

    for name, p in params:

        g = _checked_grad(name, p) + state.weight_decay * p.data

        buf = state.buffers.get(name)
        if buf is None:
            buf = g.astype(p.data.dtype, copy=True)
        else:
            if buf.shape != p.data.shape:
                raise ShapeMismatch('momentum buffer of {} does not match its parameter'.format(name))
            buf *= state.momentum
            buf += g
        state.buffers[name] = buf

        p.data -= state.lr * buf


def adam_step(params, state):

    """Bias-corrected Adam update, shared step counter across parameters."""

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.betas

    for name, p in params:

        g = _checked_grad(name, p)

        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        elif m.shape != p.data.shape:
            raise ShapeMismatch('moment estimates of {} do not match its parameter'.format(name))

        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v

        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)

        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)


def optimizer_step(params, state):

    if state.kind == 'sgd':
        sgd_step(params, state)
    else:
        adam_step(params, state)


def zero_grad(params):

    for _, p in params:
        p.grad = None
