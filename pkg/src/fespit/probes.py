"""Empirical probes for smoothness, local variance and client heterogeneity.

All gradients are taken with respect to the concatenated parameter vector
``(head, encoder, tail)`` of a single shared model.
"""

from __future__ import annotations

import copy
import warnings
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import InputError, PartitionError
from .split import backward_chain, encoder_forward, head_forward, tail_forward_loss


def model_params(client, encoder):
    return client.head.parameters() + encoder.parameters() + client.tail.parameters()


def full_gradient(client, encoder, X, y):
    """Gradient of the mean cross-entropy over ``(X, y)``."""
    fb = head_forward(client, X)
    sb = encoder_forward(encoder, fb)
    out = tail_forward_loss(client, sb, y)
    g = backward_chain(client, encoder, fb, sb, out)
    return np.concatenate([g.head, g.encoder, g.tail])


@dataclass
class SigmaG:
    deviations: np.ndarray
    max: float
    mean: float


def estimate_sigma_g(client, encoder, dataset, shards):
    """Squared distance of each client's full-batch gradient from the average."""
    grads = []
    for s in shards:
        if s.train.size == 0:
            raise PartitionError(f"client {s.client_id} has an empty train shard")
        grads.append(full_gradient(client, encoder, dataset.X[s.train], dataset.y[s.train]))
    grads = np.stack(grads)
    mean = grads.mean(axis=0)
    dev = ((grads - mean) ** 2).sum(axis=1)
    return SigmaG(dev, float(dev.max()), float(dev.mean()))


def estimate_sigma_l(client, encoder, dataset, shard, batches, batch_size, rng):
    """Monte-Carlo mean of ||grad on a minibatch - full-batch grad||^2."""
    n = shard.train.size
    if batches < 1:
        raise InputError(f"need at least one batch, got {batches}")
    if batch_size > n or batch_size < 1:
        raise InputError(f"client {shard.client_id}: batch {batch_size} vs shard of {n}")
    X, y = dataset.X, dataset.y
    full = full_gradient(client, encoder, X[shard.train], y[shard.train])
    total = 0.0
    for _ in range(batches):
        # sorted so that batch == shard reproduces the full-batch arithmetic exactly
        idx = np.sort(rng.choice(shard.train, size=batch_size, replace=False))
        g = full_gradient(client, encoder, X[idx], y[idx])
        total += float(((g - full) ** 2).sum())
    return total / batches


def estimate_smoothness(grad_fn, pairs):
    """Largest observed ||grad(x) - grad(y)|| / ||x - y|| over the pairs.

    Returns ``(estimate, skipped)`` where ``skipped`` counts coincident pairs.
    """
    best, skipped = 0.0, 0
    for x, y in pairs:
        x, y = np.asarray(x, dtype=nn.DTYPE), np.asarray(y, dtype=nn.DTYPE)
        dist = np.linalg.norm(x - y)
        if dist == 0:
            skipped += 1
            continue
        best = max(best, float(np.linalg.norm(grad_fn(x) - grad_fn(y)) / dist))
    if skipped:
        warnings.warn(f"skipped {skipped} coincident point pair(s)", RuntimeWarning, stacklevel=2)
    return best, skipped


def model_grad_fn(client, encoder, X, y):
    """``w -> gradient`` over a private copy of the model."""
    client, encoder = copy.deepcopy(client), copy.deepcopy(encoder)
    params = model_params(client, encoder)

    def grad(w):
        nn.load_flat(params, w)
        return full_gradient(client, encoder, X, y)

    return grad


def perturbation_pairs(w, count, radius, rng):
    """Random pairs around ``w``, each point at most ``radius`` per coordinate away."""
    w = np.asarray(w, dtype=nn.DTYPE)
    return [(w + radius * rng.uniform(-1, 1, w.size), w + radius * rng.uniform(-1, 1, w.size))
            for _ in range(count)]
