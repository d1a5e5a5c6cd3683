"""Quick oracle self-tests behind ``fespit check``."""

from __future__ import annotations

import numpy as np

from . import nn
from .data import PartitionSpec, generate_synthetic, partition
from .federation import sample_clients
from .split import ClientModel, ModelDims, random_encoder, split_loss
from .probes import model_params, full_gradient
from .zo import ZOConfig, zo_estimate


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck_layer(layer, x, rng, step=1e-6):
    """Relative error of analytic vs central-difference grads.

    Returns ``(input_error, param_error)``; parameter gradients are compared as
    one concatenated vector (the key bias, for one, has an identically zero
    gradient, so per-tensor relative errors are meaningless there).
    """
    y, cache = layer.forward(x)
    r = rng.standard_normal(y.shape)
    for p in layer.parameters():
        p.zero_grad()
    dx = layer.backward(cache, r)
    input_err = rel_err(dx, nn.finite_difference_grad(lambda v: float((layer(v) * r).sum()), x, step))
    params = layer.parameters()
    if not params:
        return input_err, 0.0
    analytic = nn.flatten_grads(params)
    w = nn.flatten(params)

    def f(v):
        nn.load_flat(params, v)
        return float((layer(x) * r).sum())

    fd = nn.finite_difference_grad(f, w, step)
    nn.load_flat(params, w)
    return input_err, rel_err(analytic, fd)


def _layers(rng):
    x = rng.standard_normal((3, 4, 6))
    # shift away from the ReLU kink so the finite differences stay exact-ish
    x_relu = np.where(np.abs(x) < 1e-3, 0.5, x)
    return [
        ("linear", nn.Linear(6, 5, rng), x),
        ("relu", nn.ReLU(), x_relu),
        ("encoder-block", nn.EncoderBlock(4, 6, 5, 7, rng), x),
    ]


def check_layers():
    rng = np.random.default_rng(0)
    return max(max(gradcheck_layer(layer, x, rng)) for _, layer, x in _layers(rng)) <= 1e-5


def check_cross_entropy():
    rng = np.random.default_rng(1)
    logits = rng.standard_normal(5)
    _, g = nn.softmax_cross_entropy(logits, 2)
    fd = nn.finite_difference_grad(lambda v: nn.softmax_cross_entropy(v, 2)[0], logits)
    return rel_err(g, fd) <= 1e-6 and abs(g.sum()) <= 1e-12


def check_split_chain():
    dims = ModelDims(classes=3, attn_width=8, mlp_width=8, tail_hidden=8)
    client = ClientModel.create(dims, 0, 0)
    encoder = random_encoder(dims, 0)
    rng = np.random.default_rng(2)
    X, y = rng.standard_normal((3, 64)), rng.integers(0, 3, 3)
    params = model_params(client, encoder)
    w = nn.flatten(params)
    analytic = full_gradient(client, encoder, X, y)

    def f(v):
        nn.load_flat(params, v)
        return split_loss(client, encoder, X, y)

    fd = nn.finite_difference_grad(f, w)
    nn.load_flat(params, w)
    return rel_err(analytic, fd) <= 1e-5


def check_zo_quadratic():
    rng = np.random.default_rng(3)
    w = rng.standard_normal(16)
    g = zo_estimate(lambda v: 0.5 * float(v @ v), w, ZOConfig(1e-2), np.random.default_rng(4))
    z = np.random.default_rng(4).standard_normal(16)
    return np.allclose(g, (z @ w) * z, rtol=1e-10, atol=1e-10)


def check_partitions():
    ds = generate_synthetic(400, 4, 3.0, 0)
    for spec in (PartitionSpec("iid", 5, 0), PartitionSpec("dirichlet", 5, 0, alpha=0.5),
                 PartitionSpec("pathological", 5, 0, classes_per_client=2)):
        shards = partition(ds, spec)
        allidx = np.concatenate([np.concatenate([s.train, s.test]) for s in shards])
        if np.unique(allidx).size != allidx.size or allidx.size != len(ds):
            return False
        if spec.kind == "pathological" and any(
                np.unique(ds.y[s.train]).size != 2 for s in shards):
            return False
    return True


def check_sampling():
    a = sample_clients(100, 0.1, 3, 7)
    return a == sample_clients(100, 0.1, 3, 7) and len(set(a)) == 10


CHECKS = [
    ("layer gradients vs finite differences", check_layers),
    ("softmax cross-entropy gradient", check_cross_entropy),
    ("split chain gradient vs finite differences", check_split_chain),
    ("SPSA exact on quadratics", check_zo_quadratic),
    ("partition disjoint cover / class counts", check_partitions),
    ("client sampling deterministic", check_sampling),
]


def run_checks(echo=print):
    ok = True
    for name, fn in CHECKS:
        try:
            passed, detail = bool(fn()), ""
        except Exception as e:  # report, keep going
            passed, detail = False, f": {type(e).__name__}: {e}"
        echo(f"{'PASS' if passed else 'FAIL'}  {name}{detail}")
        ok = ok and passed
    return ok
