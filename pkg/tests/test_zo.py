import copy

import numpy as np
import pytest

from fespit import nn
from fespit.errors import ConfigError, EstimationError
from fespit.federation import Transcript
from fespit.split import (
    ClientModel,
    ModelDims,
    backward_chain,
    encoder_forward,
    head_forward,
    random_encoder,
    tail_forward_loss,
)
from fespit.zo import ZOConfig, perturbed, sample_direction, zo_estimate, zo_messages

DIMS = ModelDims()


def test_direction_is_seed_deterministic():
    a = sample_direction(64, np.random.default_rng(3))
    assert np.array_equal(a, sample_direction(64, np.random.default_rng(3)))
    assert not np.array_equal(a, sample_direction(64, np.random.default_rng(4)))


def test_direction_norm_concentrates():
    rng = np.random.default_rng(0)
    ratios = [np.sum(sample_direction(64, rng) ** 2) / 64 for _ in range(10_000)]
    assert abs(np.mean(ratios) - 1) <= 0.03


def test_direction_dimension_validated():
    with pytest.raises(ConfigError):
        sample_direction(0, np.random.default_rng(0))


@pytest.mark.parametrize("kwargs", [{"epsilon": 0}, {"epsilon": 1.0}, {"num_directions": 0}])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        ZOConfig(**kwargs)


def test_default_epsilon():
    assert ZOConfig().epsilon == 1e-4


@pytest.mark.parametrize("eps", [1e-4, 1e-2, 0.5])
def test_quadratic_example_exact(eps):
    w = np.array([3.0, -4.0])
    g = zo_estimate(lambda v: 0.5 * float(v @ v), w, ZOConfig(eps), np.random.default_rng(1))
    z = np.random.default_rng(1).standard_normal(2)
    np.testing.assert_allclose(g, (z @ w) * z, rtol=1e-10, atol=1e-10)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_single_direction_exact_on_general_quadratic(seed):
    rng = np.random.default_rng(seed)
    d = 12
    A = rng.standard_normal((d, d))
    H, c = A @ A.T, rng.standard_normal(d)
    w = rng.standard_normal(d)
    loss = lambda v: 0.5 * float(v @ H @ v) + float(c @ v)
    g = zo_estimate(loss, w, ZOConfig(1e-3), np.random.default_rng(seed + 10))
    z = np.random.default_rng(seed + 10).standard_normal(d)
    grad = H @ w + c
    np.testing.assert_allclose(g, (z @ grad) * z, rtol=1e-10, atol=1e-10 * np.abs(g).max())


def test_averaged_estimate_is_unbiased_on_quadratic():
    rng = np.random.default_rng(7)
    w = rng.standard_normal(16)
    g = zo_estimate(lambda v: 0.5 * float(v @ v), w, ZOConfig(1e-2, 50_000), rng)
    assert np.linalg.norm(g - w) / np.linalg.norm(w) <= 0.02


def test_bias_grows_with_epsilon_on_non_quadratic():
    rng = np.random.default_rng(5)
    w = rng.standard_normal(16)
    loss = lambda v: float(np.sum(np.exp(v)) + np.sum(np.sin(3 * v)))
    grad = np.exp(w) + 3 * np.cos(3 * w)
    n = 200
    # same directions for both scales; compare against the exact directional-derivative estimator
    Z = np.random.default_rng(9).standard_normal((n, 16))
    exact = (Z @ grad)[:, None] * Z
    errors = {}
    for eps in (1e-2, 1e-4):
        g = zo_estimate(loss, w, ZOConfig(eps, n), np.random.default_rng(9))
        errors[eps] = np.linalg.norm(g - exact.mean(axis=0))
    assert errors[1e-2] > errors[1e-4]


def test_evaluation_count_and_no_mutation():
    calls = []
    w = np.array([1.0, 2.0, 3.0])

    def loss(v):
        calls.append(v.copy())
        return float(v.sum())

    zo_estimate(loss, w, ZOConfig(1e-3, 4), np.random.default_rng(0))
    assert len(calls) == 8
    assert w.tolist() == [1.0, 2.0, 3.0]


def test_non_finite_loss_reports_direction():
    seen = []

    def loss(v):
        seen.append(None)
        return float("nan") if len(seen) > 4 else 0.0

    with pytest.raises(EstimationError) as info:
        zo_estimate(loss, np.zeros(3), ZOConfig(1e-3, 5), np.random.default_rng(0))
    assert info.value.direction_index == 2


def _setup(seed=0, batch=5):
    rng = np.random.default_rng(seed)
    client = ClientModel.create(DIMS, seed, 0)
    enc = random_encoder(DIMS, seed)
    x, y = rng.standard_normal((batch, 64)), rng.integers(0, 4, batch)
    return client, enc, head_forward(client, x), y


def test_perturbed_restores_bit_identical():
    enc = random_encoder(DIMS, 0)
    params = enc.parameters()
    before = [(p.value.copy(), p.version) for p in params]
    with perturbed(params):
        nn.load_flat(params, nn.flatten(params) + 1.0)
    assert all(np.array_equal(p.value, v) and p.version == ver
               for p, (v, ver) in zip(params, before))


def test_zo_messages_restores_encoder():
    client, enc, fb, y = _setup()
    w = nn.flatten(enc.parameters())
    zo_messages(enc, client, fb, y, ZOConfig(), np.random.default_rng(0))
    assert np.array_equal(nn.flatten(enc.parameters()), w)
    # caches taken before the call remain valid
    sb = encoder_forward(enc, fb)
    zo_messages(enc, client, fb, y, ZOConfig(), np.random.default_rng(0))
    enc.backward(sb.cache, np.ones_like(sb.b))


@pytest.mark.parametrize("eps", [1e-4, 1e-2])
def test_zo_messages_matches_zo_estimate_bitwise(eps):
    client, enc, fb, y = _setup(seed=3)
    shadow = copy.deepcopy(enc)
    params = shadow.parameters()

    def composed(v):
        nn.load_flat(params, v)
        return tail_forward_loss(client, encoder_forward(shadow, fb), y).loss

    w = nn.flatten(enc.parameters())
    expected = zo_estimate(composed, w, ZOConfig(eps), np.random.default_rng(42))
    lp, lm, g = zo_messages(enc, client, fb, y, ZOConfig(eps), np.random.default_rng(42))
    assert np.array_equal(g, expected)
    z = np.random.default_rng(42).standard_normal(w.size)
    assert lp == composed(w + eps * z) and lm == composed(w - eps * z)


def test_zo_messages_transcript():
    client, enc, fb, y = _setup(batch=3)
    tr = Transcript()
    zo_messages(enc, client, fb, y, ZOConfig(), np.random.default_rng(0), transcript=tr, round=4)
    kinds = [(e.kind, e.direction, e.elements) for e in tr.events]
    assert kinds == [("zo_b_plus", "down", 3 * 64), ("zo_loss", "up", 1),
                     ("zo_b_minus", "down", 3 * 64), ("zo_loss", "up", 1)]
    assert {e.round for e in tr.events} == {4}


def test_zo_estimate_close_to_true_encoder_gradient_on_average():
    client, enc, fb, y = _setup(seed=1, batch=4)
    sb = encoder_forward(enc, fb)
    out = tail_forward_loss(client, sb, y)
    true = backward_chain(client, enc, fb, sb, out).encoder
    _, _, g = zo_messages(enc, client, fb, y, ZOConfig(1e-4, 4000), np.random.default_rng(0))
    # Monte-Carlo error scales like sqrt(d / n); d ~ 3.2k here
    cos = g @ true / (np.linalg.norm(g) * np.linalg.norm(true))
    assert cos > 0.5
