"""Dense float64 layers with hand-written forward/backward passes.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Every layer
exposes ``forward(x) -> (y, cache)`` and ``backward(cache, dy) -> dx``; the
backward pass *adds* parameter gradients into ``Parameter.grad``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError, ProtocolError

DTYPE = np.float64


@dataclass(eq=False)
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = None
    state: dict = field(default_factory=dict)
    version: int = 0

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=DTYPE)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    @property
    def size(self):
        return self.value.size

    def zero_grad(self):
        self.grad[...] = 0.0

    def assign(self, value):
        value = np.asarray(value, dtype=DTYPE)
        if value.shape != self.value.shape:
            raise ConfigError(
                f"parameter {self.name}: cannot assign shape {value.shape} to {self.value.shape}"
            )
        self.value[...] = value
        self.version += 1


@dataclass(eq=False)
class Cache:
    layer: object
    out_shape: tuple
    versions: tuple
    values: dict


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    dims: tuple


class Layer:
    kind = "layer"

    def parameters(self) -> list[Parameter]:
        return []

    def spec(self) -> LayerSpec:
        raise NotImplementedError

    def _cache(self, out, **values):
        return Cache(self, out.shape, tuple(p.version for p in self.parameters()), values)

    def _check_cache(self, cache, dy):
        if cache is None or not isinstance(cache, Cache):
            raise ProtocolError(f"{self.kind}: backward called without a forward cache")
        if cache.layer is not self:
            raise ProtocolError(f"{self.kind}: cache was produced by a different layer")
        if cache.versions != tuple(p.version for p in self.parameters()):
            raise ProtocolError(f"{self.kind}: stale cache, parameters changed since forward")
        if dy.shape != cache.out_shape:
            raise ProtocolError(
                f"{self.kind}: upstream grad shape {dy.shape} != forward output {cache.out_shape}"
            )

    def __call__(self, x):
        return self.forward(x)[0]


def _init_weight(rng, fan_in, fan_out):
    return rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)


class Linear(Layer):
    """Affine map on the last axis: ``y = x @ W + b``."""

    kind = "linear"

    def __init__(self, n_in, n_out, rng=None, name="linear"):
        if n_in <= 0 or n_out <= 0:
            raise ConfigError(f"{name}: dimensions must be positive, got {n_in}->{n_out}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.n_out = n_in, n_out
        self.W = Parameter(f"{name}.W", _init_weight(rng, n_in, n_out))
        self.b = Parameter(f"{name}.b", np.zeros(n_out))

    def parameters(self):
        return [self.W, self.b]

    def spec(self):
        return LayerSpec("linear", (self.n_in, self.n_out))

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim == 0 or x.shape[-1] != self.n_in:
            raise ConfigError(
                f"{self.W.name[:-2]}: expected last dim {self.n_in}, got input shape {x.shape}"
            )
        y = x @ self.W.value + self.b.value
        return y, self._cache(y, x=x)

    def backward(self, cache, dy):
        self._check_cache(cache, dy)
        x = cache.values["x"]
        x2 = x.reshape(-1, self.n_in)
        dy2 = dy.reshape(-1, self.n_out)
        self.W.grad += x2.T @ dy2
        self.b.grad += dy2.sum(axis=0)
        return dy @ self.W.value.T


class ReLU(Layer):
    kind = "relu"

    def spec(self):
        return LayerSpec("relu", ())

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        mask = x > 0
        y = np.where(mask, x, 0.0)
        return y, self._cache(y, mask=mask)

    def backward(self, cache, dy):
        self._check_cache(cache, dy)
        # subgradient 0 at x == 0
        return np.where(cache.values["mask"], dy, 0.0)


class Reshape(Layer):
    """Reshape the non-batch dimensions (used for token layout and flattening)."""

    kind = "reshape"

    def __init__(self, in_shape, out_shape):
        if math.prod(in_shape) != math.prod(out_shape):
            raise ConfigError(f"reshape: {in_shape} and {out_shape} differ in size")
        self.in_shape, self.out_shape = tuple(in_shape), tuple(out_shape)

    def spec(self):
        return LayerSpec("reshape", (self.in_shape, self.out_shape))

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        if x.shape[1:] != self.in_shape:
            raise ConfigError(f"reshape: expected (*, {self.in_shape}), got {x.shape}")
        y = x.reshape((x.shape[0],) + self.out_shape)
        return y, self._cache(y)

    def backward(self, cache, dy):
        self._check_cache(cache, dy)
        return dy.reshape((dy.shape[0],) + self.in_shape)


def softmax(s, axis=-1):
    e = np.exp(s - s.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


class EncoderBlock(Layer):
    """Single-head self-attention + residual, then a ReLU MLP + residual.

    Input and output shape ``(batch, tokens, width)``. No layer norm.
    """

    kind = "encoder-block"

    def __init__(self, tokens, width, attn_width, mlp_width, rng=None, name="enc"):
        for label, v in [("tokens", tokens), ("width", width),
                         ("attn_width", attn_width), ("mlp_width", mlp_width)]:
            if v <= 0:
                raise ConfigError(f"{name}: {label} must be positive, got {v}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.tokens, self.width = tokens, width
        self.attn_width, self.mlp_width = attn_width, mlp_width
        D, A, F = width, attn_width, mlp_width
        self.Wq = Parameter(f"{name}.Wq", _init_weight(rng, D, A))
        self.bq = Parameter(f"{name}.bq", np.zeros(A))
        self.Wk = Parameter(f"{name}.Wk", _init_weight(rng, D, A))
        self.bk = Parameter(f"{name}.bk", np.zeros(A))
        self.Wv = Parameter(f"{name}.Wv", _init_weight(rng, D, A))
        self.bv = Parameter(f"{name}.bv", np.zeros(A))
        self.Wo = Parameter(f"{name}.Wo", _init_weight(rng, A, D))
        self.bo = Parameter(f"{name}.bo", np.zeros(D))
        self.W1 = Parameter(f"{name}.W1", _init_weight(rng, D, F))
        self.b1 = Parameter(f"{name}.b1", np.zeros(F))
        self.W2 = Parameter(f"{name}.W2", _init_weight(rng, F, D))
        self.b2 = Parameter(f"{name}.b2", np.zeros(D))

    def parameters(self):
        return [self.Wq, self.bq, self.Wk, self.bk, self.Wv, self.bv,
                self.Wo, self.bo, self.W1, self.b1, self.W2, self.b2]

    def spec(self):
        return LayerSpec("encoder-block",
                         (self.tokens, self.width, self.attn_width, self.mlp_width))

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim != 3 or x.shape[1:] != (self.tokens, self.width):
            raise ConfigError(
                f"encoder-block: expected (*, {self.tokens}, {self.width}), got {x.shape}"
            )
        scale = 1.0 / math.sqrt(self.attn_width)
        q = x @ self.Wq.value + self.bq.value
        k = x @ self.Wk.value + self.bk.value
        v = x @ self.Wv.value + self.bv.value
        p = softmax((q @ k.transpose(0, 2, 1)) * scale)
        o = p @ v
        x1 = x + (o @ self.Wo.value + self.bo.value)
        z = x1 @ self.W1.value + self.b1.value
        mask = z > 0
        r = np.where(mask, z, 0.0)
        y = x1 + (r @ self.W2.value + self.b2.value)
        return y, self._cache(y, x=x, q=q, k=k, v=v, p=p, o=o, x1=x1, mask=mask, r=r)

    def backward(self, cache, dy):
        self._check_cache(cache, dy)
        c = cache.values
        D, A, F = self.width, self.attn_width, self.mlp_width
        scale = 1.0 / math.sqrt(A)

        # MLP branch
        self.W2.grad += c["r"].reshape(-1, F).T @ dy.reshape(-1, D)
        self.b2.grad += dy.reshape(-1, D).sum(axis=0)
        dz = np.where(c["mask"], dy @ self.W2.value.T, 0.0)
        self.W1.grad += c["x1"].reshape(-1, D).T @ dz.reshape(-1, F)
        self.b1.grad += dz.reshape(-1, F).sum(axis=0)
        dx1 = dy + dz @ self.W1.value.T

        # attention branch
        self.Wo.grad += c["o"].reshape(-1, A).T @ dx1.reshape(-1, D)
        self.bo.grad += dx1.reshape(-1, D).sum(axis=0)
        do = dx1 @ self.Wo.value.T
        p, q, k, v = c["p"], c["q"], c["k"], c["v"]
        dp = do @ v.transpose(0, 2, 1)
        dv = p.transpose(0, 2, 1) @ do
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 2, 1) @ q

        x2 = c["x"].reshape(-1, D)
        dx = dx1.copy()
        for W, b, g in ((self.Wq, self.bq, dq), (self.Wk, self.bk, dk), (self.Wv, self.bv, dv)):
            g2 = g.reshape(-1, A)
            W.grad += x2.T @ g2
            b.grad += g2.sum(axis=0)
            dx += g @ W.value.T
        return dx


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, layers):
        self.layers = list(layers)

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def spec(self):
        return LayerSpec("sequential", tuple(layer.spec() for layer in self.layers))

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x, self._cache(x, caches=caches)

    def backward(self, cache, dy):
        self._check_cache(cache, dy)
        for layer, c in zip(reversed(self.layers), reversed(cache.values["caches"])):
            dy = layer.backward(c, dy)
        return dy


# -- loss ---------------------------------------------------------------------

def softmax_cross_entropy(logits, label):
    """Cross-entropy of one logit vector against an integer class label.

    Returns ``(loss, dloss/dlogits)``.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    C = logits.shape[-1]
    if logits.ndim != 1 or C < 2:
        raise InputError(f"softmax_cross_entropy: need a 1-d logit vector with C >= 2, got {logits.shape}")
    if not 0 <= int(label) < C:
        raise InputError(f"label {label} out of range [0, {C})")
    shifted = logits - logits.max()
    logz = math.log(np.exp(shifted).sum())
    loss = logz - shifted[int(label)]
    grad = np.exp(shifted - logz)
    grad[int(label)] -= 1.0
    return float(loss), grad


def cross_entropy_mean(logits, labels):
    """Mean softmax cross-entropy over a batch; returns ``(loss, dlogits)``."""
    logits = np.asarray(logits, dtype=DTYPE)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise InputError(f"expected (batch, C>=2) logits, got {logits.shape}")
    B, C = logits.shape
    if labels.shape != (B,):
        raise InputError(f"{labels.shape[0] if labels.ndim else 0} labels for a batch of {B}")
    if B == 0:
        raise InputError("empty batch")
    if labels.min() < 0 or labels.max() >= C:
        raise InputError(f"labels out of range [0, {C})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), grad / B


# -- optimizers ---------------------------------------------------------------

def optimizer_step(params, kind, lr, momentum=0.9, betas=(0.9, 0.999), eps=1e-8):
    """Apply one update to every parameter in place. Gradients are left as-is."""
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if kind == "sgd-momentum":
        for p in params:
            buf = p.state.get("buf")
            buf = p.grad.copy() if buf is None else momentum * buf + p.grad
            p.state["buf"] = buf
            p.value -= lr * buf
            p.version += 1
    elif kind == "adam":
        b1, b2 = betas
        for p in params:
            if "m" not in p.state:
                p.state.update(m=np.zeros_like(p.value), v=np.zeros_like(p.value), t=0)
            s = p.state
            s["t"] += 1
            s["m"] = b1 * s["m"] + (1 - b1) * p.grad
            s["v"] = b2 * s["v"] + (1 - b2) * p.grad * p.grad
            m_hat = s["m"] / (1 - b1 ** s["t"])
            v_hat = s["v"] / (1 - b2 ** s["t"])
            p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
            p.version += 1
    elif kind == "sgd":
        for p in params:
            p.value -= lr * p.grad
            p.version += 1
    else:
        raise ConfigError(f"unknown optimizer {kind!r}; expected sgd, sgd-momentum or adam")


# -- flat parameter vectors ---------------------------------------------------

def zero_grads(params):
    for p in params:
        p.zero_grad()


def flatten(params):
    if not params:
        return np.zeros(0)
    return np.concatenate([p.value.ravel() for p in params])


def flatten_grads(params):
    if not params:
        return np.zeros(0)
    return np.concatenate([p.grad.ravel() for p in params])


def num_params(params):
    return sum(p.size for p in params)


def load_flat(params, vec):
    vec = np.asarray(vec, dtype=DTYPE)
    if vec.size != num_params(params):
        raise ConfigError(f"vector of size {vec.size} for {num_params(params)} parameters")
    i = 0
    for p in params:
        p.assign(vec[i:i + p.size].reshape(p.value.shape))
        i += p.size


def finite_difference_grad(loss_fn, w, step=1e-6):
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if not step > 0:
        raise ConfigError(f"step must be positive, got {step}")
    w = np.array(w, dtype=DTYPE)
    g = np.zeros_like(w)
    flat, gflat = w.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = loss_fn(w)
        flat[i] = orig - step
        fm = loss_fn(w)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return g
