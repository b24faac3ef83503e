"""
Central-difference checking of the analytic gradients produced by tensorops.backward.
"""

import logging

import numpy as np

from .tensorops import Tensor, backward

logger = logging.getLogger(__name__)


def finite_difference(func, arrays, eps=1e-5):

    """
    Centered-difference gradient of the scalar func(*arrays) with respect to every
    element of every array. The arrays are perturbed in place and restored.
    """

    grads = []
    for arr in arrays:
        grad = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for j in range(flat.shape[0]):
            x0 = flat[j]
            flat[j] = x0 + eps
            fplus = float(func(*arrays))
            flat[j] = x0 - eps
            fminus = float(func(*arrays))
            flat[j] = x0
            gflat[j] = (fplus - fminus) / (2 * eps)
        grads.append(grad)

    return grads


def analytic_gradient(build, arrays):

    tensors = [Tensor(arr.copy(), requires_grad=True) for arr in arrays]
    loss = build(*tensors)
    backward(loss)

    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def relative_error(analytic, numeric):

    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)

    return num / den


def check_gradient(build, arrays, eps=1e-5):

    """Largest relative error between backward() and central differences over all inputs.

    build maps Tensors to a scalar Tensor; arrays should be float64.
    """

    analytic = analytic_gradient(build, arrays)

    def func(*values):
        return build(*[Tensor(v) for v in values]).data

    numeric = finite_difference(func, [arr.copy() for arr in arrays], eps)
    errors = [relative_error(a, n) for a, n in zip(analytic, numeric)]

    logger.debug('gradient check errors: %s', errors)

    return max(errors)
