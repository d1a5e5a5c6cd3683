"""Head / encoder / tail decomposition of the desk-scale transformer model.

Clients own a head (token embedding) and a tail (classifier); the server owns
the encoder. The server-facing functions only ever see ``FeatureBundle`` /
``SmashedBundle`` objects and feature gradients, never raw inputs or labels.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .errors import ConfigError, InputError, ProtocolError
from .rng import derive_rng

CHECKPOINT_MAGIC = "fespit-checkpoint v1"
PRETRAIN_CLIENT_ID = 1_000_000


@dataclass(frozen=True)
class ModelDims:
    input_dim: int = 64
    tokens: int = 4
    width: int = 16
    attn_width: int = 32
    mlp_width: int = 32
    tail_hidden: int = 32
    classes: int = 4
    encoder_blocks: int = 1

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            if getattr(self, name) <= 0:
                raise ConfigError(f"model.{name} must be positive")
        if self.tokens * self.width != self.input_dim:
            raise ConfigError(
                f"input_dim {self.input_dim} != tokens*width {self.tokens}*{self.width}"
            )
        if self.classes < 2:
            raise ConfigError("need at least two classes")

    @property
    def feature_shape(self):
        return (self.tokens, self.width)


def build_head(dims, rng):
    return nn.Sequential([
        nn.Reshape((dims.input_dim,), dims.feature_shape),
        nn.Linear(dims.width, dims.width, rng, name="head.embed"),
        nn.ReLU(),
    ])


def build_encoder(dims, rng):
    return nn.Sequential([
        nn.EncoderBlock(dims.tokens, dims.width, dims.attn_width, dims.mlp_width, rng,
                        name=f"enc{i}")
        for i in range(dims.encoder_blocks)
    ])


def build_tail(dims, rng):
    return nn.Sequential([
        nn.Reshape(dims.feature_shape, (dims.input_dim,)),
        nn.Linear(dims.input_dim, dims.tail_hidden, rng, name="tail.hidden"),
        nn.ReLU(),
        nn.Linear(dims.tail_hidden, dims.classes, rng, name="tail.out"),
    ])


def random_encoder(dims, seed):
    return build_encoder(dims, derive_rng(seed, "encoder-init"))


@dataclass(eq=False)
class ClientModel:
    client_id: int
    head: nn.Sequential
    tail: nn.Sequential

    @classmethod
    def create(cls, dims, seed, client_id):
        rng = derive_rng(seed, "client-init", client_id)
        return cls(client_id, build_head(dims, rng), build_tail(dims, rng))

    def parameters(self):
        return self.head.parameters() + self.tail.parameters()


@dataclass(eq=False)
class FeatureBundle:
    client_id: int
    round: int
    step: int
    h: np.ndarray
    cache: nn.Cache = field(repr=False)


@dataclass(eq=False)
class SmashedBundle:
    client_id: int
    round: int
    step: int
    b: np.ndarray
    cache: nn.Cache = field(repr=False)


@dataclass(eq=False)
class TailOutput:
    loss: float
    logits: np.ndarray
    dlogits: np.ndarray
    cache: nn.Cache = field(repr=False)


@dataclass
class ChainGrads:
    tail: np.ndarray
    b: np.ndarray
    encoder: np.ndarray
    h: np.ndarray
    head: np.ndarray


def head_forward(client, x, round=0, step=0):
    x = np.asarray(x, dtype=nn.DTYPE)
    if x.ndim != 2 or x.shape[0] == 0:
        raise InputError(f"client {client.client_id}: empty or malformed minibatch {x.shape}")
    h, cache = client.head.forward(x)
    return FeatureBundle(client.client_id, round, step, h, cache)


def encoder_forward(encoder, fb):
    expected = encoder.layers[0].tokens, encoder.layers[0].width
    if fb.h.ndim != 3 or fb.h.shape[1:] != expected:
        raise ProtocolError(
            f"client {fb.client_id}, round {fb.round}: feature shape {fb.h.shape} "
            f"does not match encoder input (*, {expected[0]}, {expected[1]})"
        )
    b, cache = encoder.forward(fb.h)
    return SmashedBundle(fb.client_id, fb.round, fb.step, b, cache)


def tail_forward_loss(client, sb, y):
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != sb.b.shape[0]:
        raise InputError(
            f"client {client.client_id}: {y.shape} labels for a batch of {sb.b.shape[0]}"
        )
    logits, cache = client.tail.forward(sb.b)
    loss, dlogits = nn.cross_entropy_mean(logits, y)
    return TailOutput(loss, logits, dlogits, cache)


def tail_backward(client, out):
    """Client side: accumulate tail grads, return dL/db for the server."""
    return client.tail.backward(out.cache, out.dlogits)


def encoder_vjp(encoder, sb, db):
    """Server side: accumulate encoder grads, return dL/dh for the client."""
    return encoder.backward(sb.cache, db)


def head_backward(client, fb, dh):
    client.head.backward(fb.cache, dh)


def backward_chain(client, encoder, fb, sb, out):
    """Full reverse pass through tail, encoder and head.

    Zeroes all grads first, so the returned flat vectors are the gradients of
    this step's loss alone.
    """
    for p in client.parameters() + encoder.parameters():
        p.zero_grad()
    db = tail_backward(client, out)
    dh = encoder_vjp(encoder, sb, db)
    head_backward(client, fb, dh)
    return ChainGrads(
        tail=nn.flatten_grads(client.tail.parameters()),
        b=db,
        encoder=nn.flatten_grads(encoder.parameters()),
        h=dh,
        head=nn.flatten_grads(client.head.parameters()),
    )


def split_loss(client, encoder, x, y):
    fb = head_forward(client, x)
    sb = encoder_forward(encoder, fb)
    return tail_forward_loss(client, sb, y).loss


def assemble(client, encoder):
    """The same layer objects chained as one monolithic network."""
    return nn.Sequential([client.head, encoder, client.tail])


def predict(client, encoder, x):
    logits = client.tail(encoder(client.head(np.asarray(x, dtype=nn.DTYPE))))
    return logits.argmax(axis=1)


# -- pre-training ---------------------------------------------------------------

@dataclass
class PretrainResult:
    encoder: nn.Sequential
    model: ClientModel
    train_accuracy: float
    losses: list


def pretrain_encoder(dims, public, epochs=10, lr=1e-2, seed=0, batch_size=0):
    """Centralized training of a full model on public data; keep the encoder.

    With ``epochs == 0`` the encoder is exactly ``random_encoder(dims, seed)``.
    ``batch_size == 0`` means full batch (one Adam step per epoch).
    """
    if public is None or len(public) == 0:
        raise ConfigError("pre-training needs a non-empty public dataset")
    if epochs < 0:
        raise ConfigError(f"pretrain epochs must be >= 0, got {epochs}")
    encoder = random_encoder(dims, seed)
    # head/tail scaffolding for pre-training only; discarded afterwards
    model = ClientModel.create(dims, seed, client_id=PRETRAIN_CLIENT_ID)
    params = model.parameters() + encoder.parameters()
    rng = derive_rng(seed, "pretrain")
    n = len(public)
    bs = n if batch_size <= 0 else min(batch_size, n)
    losses = []
    for _ in range(epochs):
        order = np.arange(n) if bs == n else rng.permutation(n)
        for start in range(0, n - bs + 1, bs):
            idx = order[start:start + bs]
            fb = head_forward(model, public.X[idx])
            sb = encoder_forward(encoder, fb)
            out = tail_forward_loss(model, sb, public.y[idx])
            backward_chain(model, encoder, fb, sb, out)
            nn.optimizer_step(params, "adam", lr)
            losses.append(out.loss)
    acc = float((predict(model, encoder, public.X) == public.y).mean())
    return PretrainResult(encoder, model, acc, losses)


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(path, tensors, meta=None):
    """Write named tensors as text.

    Layout::

        fespit-checkpoint v1
        # key=value ...           (optional metadata line)
        tensor <name> <d0>x<d1>...
        <value> <value> ...      (row-major, 17 significant digits)
    """
    buf = io.StringIO()
    buf.write(CHECKPOINT_MAGIC + "\n")
    if meta:
        buf.write("# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=nn.DTYPE)
        shape = "x".join(str(d) for d in arr.shape) or "scalar"
        buf.write(f"tensor {name} {shape}\n")
        buf.write(" ".join(format(v, ".17g") for v in arr.ravel()) + "\n")
    Path(path).write_text(buf.getvalue())


def load_checkpoint(path):
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file")
    out = {}
    it = iter(line for line in lines[1:] if not line.startswith("#"))
    for header in it:
        kind, name, shape = header.split(" ")
        if kind != "tensor":
            raise ConfigError(f"{path}: unexpected line {header!r}")
        dims = () if shape == "scalar" else tuple(int(d) for d in shape.split("x"))
        values = next(it).split()
        out[name] = np.array([float(v) for v in values], dtype=nn.DTYPE).reshape(dims)
    return out


def named_tensors(prefix, params):
    return {f"{prefix}{p.name}": p.value for p in params}
