"""Two-point SPSA estimate of the encoder weight gradient.

For a direction ``z ~ N(0, I_d)`` and scale ``eps``::

    g = (L(w + eps*z) - L(w - eps*z)) / (2*eps) * z

averaged over ``num_directions`` independent directions.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigError, EstimationError
from .split import encoder_forward, tail_forward_loss


@dataclass(frozen=True)
class ZOConfig:
    epsilon: float = 1e-4
    num_directions: int = 1

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ConfigError(f"zo epsilon must be in (0, 1), got {self.epsilon}")
        if self.num_directions < 1:
            raise ConfigError(f"zo num_directions must be >= 1, got {self.num_directions}")


def sample_direction(d, rng):
    if d < 1:
        raise ConfigError(f"direction dimension must be >= 1, got {d}")
    return rng.standard_normal(d)


def zo_estimate(loss_at, w, config, rng):
    """SPSA gradient of ``loss_at`` at the flat vector ``w``.

    ``loss_at`` is called exactly ``2 * num_directions`` times; ``w`` itself is
    never modified.
    """
    w = np.asarray(w, dtype=nn.DTYPE)
    eps = config.epsilon
    g = np.zeros_like(w)
    for j in range(config.num_directions):
        z = sample_direction(w.size, rng)
        lp = loss_at(w + eps * z)
        lm = loss_at(w - eps * z)
        if not (math.isfinite(lp) and math.isfinite(lm)):
            raise EstimationError(f"non-finite loss along direction {j}", direction_index=j)
        g += ((lp - lm) / (2 * eps)) * z
    if config.num_directions > 1:
        g /= config.num_directions
    return g


@contextmanager
def perturbed(params):
    """Snapshot ``params``; restore the exact values (and versions) on exit."""
    saved = [(p, p.value.copy(), p.version) for p in params]
    try:
        yield
    finally:
        for p, value, version in saved:
            p.value[...] = value
            p.version = version


def zo_messages(encoder, client, fb, labels, config, rng, transcript=None, round=0):
    """Server/client exchange that realises one SPSA estimate.

    For each evaluation the server runs the encoder at perturbed weights on the
    stored feature ``fb.h`` and ships the smashed feature down; the client
    answers with one scalar loss. Returns ``(loss_plus, loss_minus, g)`` for the
    last direction's two losses and the (averaged) estimate.
    """
    params = encoder.parameters()
    w = nn.flatten(params)
    losses = []

    def loss_at(vec):
        nn.load_flat(params, vec)
        sb = encoder_forward(encoder, fb)
        kind = "zo_b_plus" if len(losses) % 2 == 0 else "zo_b_minus"
        if transcript is not None:
            transcript.record(round, fb.client_id, kind, "down", sb.b.size)
        loss = tail_forward_loss(client, sb, labels).loss
        if transcript is not None:
            transcript.record(round, fb.client_id, "zo_loss", "up", 1)
        losses.append(loss)
        return loss

    with perturbed(params):
        g = zo_estimate(loss_at, w, config, rng)
    return losses[-2], losses[-1], g
