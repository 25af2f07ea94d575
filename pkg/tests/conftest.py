"""Shared fixtures and the central finite-difference oracle.

The oracle perturbs one scalar at a time with step h = 1e-4 in float64 and
never reuses any code path from the analytic gradients it checks.
"""

import numpy as np
import pytest

from fedka.nn import ModelParams, params_clone, trainable_keys

FD_H = 1e-4
GRAD_RTOL = 1e-4
GRAD_ATOL = 1e-7


def numeric_grad_array(fn, x, h=FD_H):
    """Central finite differences of scalar fn w.r.t. every entry of x."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn(x)
        flat[i] = orig - h
        down = fn(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def numeric_grad_params(fn, params: ModelParams, h=FD_H):
    """Central finite differences of scalar fn(params) w.r.t. every trainable
    parameter; fn receives a fresh clone so in-place statistics updates in
    train-mode forwards cannot leak between probes."""
    grads = {}
    for key in trainable_keys(params.spec):
        base = params.values[key]
        g = np.zeros_like(base)
        flat = base.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn(params_clone(params))
            flat[i] = orig - h
            down = fn(params_clone(params))
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads[key] = g
    return grads


def assert_grads_close(analytic, numeric, rtol=GRAD_RTOL, atol=GRAD_ATOL):
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
