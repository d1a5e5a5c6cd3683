import numpy as np
import pytest

from fespit import nn


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def fd_layer_grads(layer, x, r, step=1e-6):
    """Central-difference grads of <layer(x), r> w.r.t. x and all params (concatenated)."""
    dx = nn.finite_difference_grad(lambda v: float((layer(v) * r).sum()), x, step)
    params = layer.parameters()
    if not params:
        return dx, np.zeros(0)
    w = nn.flatten(params)

    def f(v):
        nn.load_flat(params, v)
        return float((layer(x) * r).sum())

    dw = nn.finite_difference_grad(f, w, step)
    nn.load_flat(params, w)
    return dx, dw


def analytic_layer_grads(layer, x, r):
    nn.zero_grads(layer.parameters())
    y, cache = layer.forward(x)
    dx = layer.backward(cache, r)
    return dx, nn.flatten_grads(layer.parameters())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split("-")[1])):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key}: {'PASS' if passed else 'FAIL'}  {detail}")
