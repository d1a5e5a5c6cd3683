"""Round-based federated split training (first-order and SPSA server updates).

One round: sample ``m = qM`` clients; run ``K`` local steps on each (head ->
encoder -> tail forward, full backward, head/tail optimizer step); at the last
step each client leaves one encoder-gradient estimate on the server; the
server takes one averaged SGD step; every ``fedround`` rounds the participants'
heads and tails are averaged and broadcast to all clients.

Clients run sequentially in ascending id order, which fixes every floating
point reduction order and makes runs bit-reproducible.
"""

from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import partition
from .errors import ConfigError, ProtocolError
from .probes import (
    estimate_sigma_g,
    estimate_sigma_l,
    estimate_smoothness,
    model_grad_fn,
    model_params,
    perturbation_pairs,
)
from .rng import derive_rng
from .split import (
    ClientModel,
    ModelDims,
    backward_chain,
    encoder_forward,
    head_forward,
    predict,
    pretrain_encoder,
    random_encoder,
    tail_forward_loss,
)
from .zo import ZOConfig, zo_messages

OPTIONS = ("PIT", "PTZO")
BYTES_PER_ELEMENT = 8


@dataclass(frozen=True)
class RoundConfig:
    rounds: int = 500
    clients: int = 100
    sample_ratio: float = 0.1
    local_steps: int = 5
    client_lr: float = 2e-4
    server_lr: float = 1e-6
    server_lr_decay: float = 0.5
    server_lr_decay_every: int = 0
    fedround: int = 20
    option: str = "PIT"
    zo: ZOConfig = field(default_factory=ZOConfig)
    client_optimizer: str = "adam"
    momentum: float = 0.9
    batch_size: int = 128
    seed: int = 0
    probe_every: int = 0

    def __post_init__(self):
        if self.rounds < 0:
            raise ConfigError(f"rounds must be >= 0, got {self.rounds}")
        if self.clients < 1:
            raise ConfigError(f"clients must be >= 1, got {self.clients}")
        if not 0 < self.sample_ratio <= 1:
            raise ConfigError(f"sample_ratio must be in (0, 1], got {self.sample_ratio}")
        if self.sample_ratio * self.clients < 1 - 1e-12:
            raise ConfigError(
                f"sample_ratio {self.sample_ratio} x {self.clients} clients selects nobody"
            )
        if self.local_steps < 1:
            raise ConfigError(f"local_steps must be >= 1, got {self.local_steps}")
        if self.fedround < 1:
            raise ConfigError(f"fedround must be >= 1, got {self.fedround}")
        if self.option not in OPTIONS:
            raise ConfigError(f"option must be one of {OPTIONS}, got {self.option!r}")
        if self.client_optimizer not in ("adam", "sgd-momentum", "sgd"):
            raise ConfigError(f"unknown client optimizer {self.client_optimizer!r}")
        if self.client_lr < 0 or self.server_lr < 0:
            raise ConfigError("learning rates must be >= 0")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.server_lr_decay_every < 0 or self.probe_every < 0:
            raise ConfigError("cadences must be >= 0")

    @property
    def sampled(self):
        return max(1, int(math.floor(self.sample_ratio * self.clients + 0.5)))

    def server_lr_at(self, t):
        if self.server_lr_decay_every <= 0:
            return self.server_lr
        return self.server_lr * self.server_lr_decay ** (t // self.server_lr_decay_every)


# -- transcript ---------------------------------------------------------------

@dataclass(frozen=True)
class Event:
    round: int
    client: int
    kind: str
    direction: str
    elements: int

    @property
    def nbytes(self):
        return self.elements * BYTES_PER_ELEMENT


class Transcript:
    """Append-only log of every payload that crosses the client/server boundary."""

    def __init__(self):
        self.events: list[Event] = []

    def record(self, round, client, kind, direction, elements):
        self.events.append(Event(int(round), int(client), kind, direction, int(elements)))

    def bytes(self, round=None, direction=None, kind=None):
        return sum(e.nbytes for e in self.events
                   if (round is None or e.round == round)
                   and (direction is None or e.direction == direction)
                   and (kind is None or e.kind == kind))

    def kinds(self):
        return sorted({e.kind for e in self.events})

    def lines(self):
        yield "round,client,kind,direction,bytes"
        for e in self.events:
            yield f"{e.round},{e.client},{e.kind},{e.direction},{e.nbytes}"

    def summary(self):
        """``(round, kind, direction) -> (count, bytes)`` in first-seen order."""
        out = {}
        for e in self.events:
            key = (e.round, e.kind, e.direction)
            count, nbytes = out.get(key, (0, 0))
            out[key] = (count + 1, nbytes + e.nbytes)
        return out


# -- state --------------------------------------------------------------------

@dataclass(eq=False)
class ClientState:
    client_id: int
    model: ClientModel
    shard: object
    rng: np.random.Generator
    _perm: np.ndarray | None = None
    _cursor: int = 0

    def next_batch(self, dataset, batch_size):
        """Next minibatch; full shard (in index order) when the batch covers it."""
        idx = self.shard.train
        n = idx.size
        if batch_size >= n:
            sel = idx
        else:
            if self._perm is None or self._cursor + batch_size > n:
                self._perm = self.rng.permutation(idx)
                self._cursor = 0
            sel = self._perm[self._cursor:self._cursor + batch_size]
            self._cursor += batch_size
        return dataset.X[sel], dataset.y[sel]


@dataclass(eq=False)
class ServerState:
    encoder: nn.Sequential
    stored: dict = field(default_factory=dict)
    round: int = 0
    # (round, client, step) of every stored gradient, for auditing
    store_log: list = field(default_factory=list)

    def store_gradient(self, client_id, g, round, step):
        if client_id in self.stored:
            raise ProtocolError(f"round {round}: client {client_id} stored a second gradient")
        self.stored[client_id] = g
        self.store_log.append((round, client_id, step))


@dataclass
class MetricsRecord:
    round: int
    mean_train_loss: float
    max_train_loss: float
    mean_test_accuracy: float
    bytes_up: int
    bytes_down: int
    sigma_g2: float | None = None
    wall_clock: float = 0.0

    HEADER = ("round,mean_train_loss,max_train_loss,mean_test_accuracy,"
              "sigma_g2,bytes_up,bytes_down")

    def csv_row(self):
        sg = "" if self.sigma_g2 is None else repr(self.sigma_g2)
        return (f"{self.round},{self.mean_train_loss!r},{self.max_train_loss!r},"
                f"{self.mean_test_accuracy!r},{sg},{self.bytes_up},{self.bytes_down}")


@dataclass
class ProbeRecord:
    round: int
    sigma_g2_mean: float
    sigma_g2_max: float
    sigma_l2_mean: float
    smoothness_max: float

    HEADER = "round,sigma_g2_mean,sigma_g2_max,sigma_l2_mean,smoothness_max"

    def csv_row(self):
        return (f"{self.round},{self.sigma_g2_mean!r},{self.sigma_g2_max!r},"
                f"{self.sigma_l2_mean!r},{self.smoothness_max!r}")


@dataclass
class TrainingResult:
    clients: list
    server: ServerState
    metrics: list
    transcript: Transcript
    shards: list
    probes: list = field(default_factory=list)


# -- protocol steps -------------------------------------------------------------

def sample_clients(M, q, round, seed):
    """``m = round(qM)`` distinct client ids, sorted, reproducible per (seed, round)."""
    if q * M < 1 - 1e-12:
        raise ConfigError(f"sampling ratio {q} over {M} clients selects nobody")
    m = min(M, max(1, int(math.floor(q * M + 0.5))))
    perm = derive_rng(seed, "sample-clients", round).permutation(M)
    return sorted(int(i) for i in perm[:m])


def local_step(client, server, cfg, dataset, k, t, transcript=None):
    """One local iteration for one client. Returns ``(loss, stored_gradient_or_None)``."""
    K = cfg.local_steps
    if not 1 <= k <= K:
        raise ProtocolError(f"local step {k} outside 1..{K}")
    cid = client.client_id
    x, y = client.next_batch(dataset, cfg.batch_size)
    model, encoder = client.model, server.encoder

    fb = head_forward(model, x, round=t, step=k)
    sb = encoder_forward(encoder, fb)
    out = tail_forward_loss(model, sb, y)
    grads = backward_chain(model, encoder, fb, sb, out)
    if transcript is not None:
        transcript.record(t, cid, "h", "up", fb.h.size)
        transcript.record(t, cid, "b", "down", sb.b.size)
        transcript.record(t, cid, "grad_h", "down", grads.h.size)

    stored = None
    if k == K:
        # the stored loss is evaluated with the pre-update head and tail
        if cfg.option == "PIT":
            stored = grads.encoder
        else:
            zo_rng = derive_rng(cfg.seed, "zo", t, cid)
            _, _, stored = zo_messages(encoder, model, fb, y, cfg.zo, zo_rng,
                                       transcript=transcript, round=t)
        server.store_gradient(cid, stored, t, k)

    if cfg.client_lr > 0:
        nn.optimizer_step(model.parameters(), cfg.client_optimizer, cfg.client_lr,
                          momentum=cfg.momentum)
    return out.loss, stored


def server_update(server, participants, lr):
    """``w_E <- w_E - (lr/m) * sum_i g_i`` with the sum taken in ascending client id."""
    missing = [c for c in participants if c not in server.stored]
    if missing:
        raise ProtocolError(f"round {server.round}: no stored gradient for client(s) {missing}")
    extra = sorted(set(server.stored) - set(participants))
    if extra:
        raise ProtocolError(f"round {server.round}: unexpected gradient from client(s) {extra}")
    ids = sorted(participants)
    params = server.encoder.parameters()
    total = np.zeros(nn.num_params(params))
    for cid in ids:
        total += server.stored[cid]
    if lr > 0:
        nn.load_flat(params, nn.flatten(params) - (lr / len(ids)) * total)
    server.stored.clear()
    server.round += 1


def _mean_values(arrays):
    """Mean as ``a_0 + sum(a_i - a_0)/m``: exact when all inputs are equal."""
    base = arrays[0]
    acc = np.zeros_like(base)
    for a in arrays[1:]:
        acc += a - base
    return base + acc / len(arrays)


def average_models(models, targets):
    """Average parameters of ``models`` (in order) into every model in ``targets``."""
    per_model = [m.parameters() for m in models]
    for j, _ in enumerate(per_model[0]):
        avg = _mean_values([params[j].value for params in per_model])
        for t in targets:
            t.parameters()[j].assign(avg)


def aggregate_clients(participants, all_clients, t, fedround, transcript=None):
    """Average participants' head/tail and broadcast to every client when ``t % fedround == 0``.

    Returns True when an aggregation happened.
    """
    if t % fedround != 0:
        return False
    participants = sorted(participants, key=lambda c: c.client_id)
    size = nn.num_params(participants[0].model.parameters())
    if transcript is not None:
        for c in participants:
            transcript.record(t, c.client_id, "weights", "up", size)
        for c in sorted(all_clients, key=lambda c: c.client_id):
            transcript.record(t, c.client_id, "weights", "down", size)
    average_models([c.model for c in participants], [c.model for c in all_clients])
    return True


def evaluate(clients, encoder, dataset):
    """Per-client accuracy on its own test shard, and the unweighted mean."""
    accs = []
    for c in clients:
        idx = c.shard.test
        accs.append(float((predict(c.model, encoder, dataset.X[idx]) == dataset.y[idx]).mean()))
    accs = np.array(accs)
    return accs, float(accs.mean())


def run_probes(clients, encoder, dataset, shards, t, seed, batch_size):
    """Heterogeneity / variance / smoothness probes at the client-averaged model."""
    probe = copy.deepcopy(clients[0].model)
    average_models([c.model for c in clients], [probe])
    enc = copy.deepcopy(encoder)
    sg = estimate_sigma_g(probe, enc, dataset, shards)
    rng = derive_rng(seed, "probe", t)
    sl, smooth = [], 0.0
    w = nn.flatten(model_params(probe, enc))
    for s in shards:
        n = s.train.size
        if n >= 2:
            sl.append(estimate_sigma_l(probe, enc, dataset, s, 2, min(batch_size, n - 1), rng))
        grad_fn = model_grad_fn(probe, enc, dataset.X[s.train], dataset.y[s.train])
        est, _ = estimate_smoothness(grad_fn, perturbation_pairs(w, 1, 1e-2, rng))
        smooth = max(smooth, est)
    return ProbeRecord(t, sg.mean, sg.max, float(np.mean(sl)) if sl else 0.0, smooth)


# -- drivers ----------------------------------------------------------------------

def _init_encoder(dims, seed, public, pretrain, encoder):
    if encoder is not None:
        return copy.deepcopy(encoder)
    if pretrain is not None and pretrain.enabled:
        return pretrain_encoder(dims, public, pretrain.epochs, pretrain.lr, seed,
                                pretrain.batch_size).encoder
    return random_encoder(dims, seed)


@dataclass(frozen=True)
class PretrainConfig:
    enabled: bool = True
    epochs: int = 10
    lr: float = 1e-2
    batch_size: int = 0
    public_fraction: float = 0.2


def _setup(cfg, dataset, spec, shards, dims):
    if spec.clients != cfg.clients:
        raise ConfigError(f"partition has {spec.clients} clients, round config {cfg.clients}")
    if shards is None:
        shards = partition(dataset, spec)
    dims = dims or ModelDims(classes=dataset.classes)
    clients = [ClientState(s.client_id, ClientModel.create(dims, cfg.seed, s.client_id), s,
                           derive_rng(cfg.seed, "batches", s.client_id))
               for s in shards]
    return shards, dims, clients


def run_training(cfg, dataset, spec, *, public=None, pretrain=None, encoder=None,
                 shards=None, dims=None, log=None):
    """Run ``cfg.rounds`` rounds and return states, metrics and the transcript.

    The encoder comes from ``encoder`` if given, else from pre-training on
    ``public`` when ``pretrain.enabled``, else from the seeded random init.
    """
    shards, dims, clients = _setup(cfg, dataset, spec, shards, dims)
    server = ServerState(_init_encoder(dims, cfg.seed, public, pretrain, encoder))
    transcript = Transcript()
    metrics, probes = [], []
    K = cfg.local_steps
    for t in range(cfg.rounds):
        start = time.perf_counter()
        ids = sample_clients(cfg.clients, cfg.sample_ratio, t, cfg.seed)
        active = [clients[i] for i in ids]
        final_loss = {}
        for k in range(1, K + 1):
            for c in active:
                loss, _ = local_step(c, server, cfg, dataset, k, t, transcript)
                if k == K:
                    final_loss[c.client_id] = loss
        server_update(server, ids, cfg.server_lr_at(t))
        aggregate_clients(active, clients, t, cfg.fedround, transcript)
        _, acc = evaluate(clients, server.encoder, dataset)
        losses = np.array([final_loss[i] for i in ids])
        rec = MetricsRecord(t, float(losses.mean()), float(losses.max()), acc,
                            transcript.bytes(t, "up"), transcript.bytes(t, "down"))
        if cfg.probe_every and (t + 1) % cfg.probe_every == 0:
            pr = run_probes(clients, server.encoder, dataset, shards, t, cfg.seed, cfg.batch_size)
            probes.append(pr)
            rec.sigma_g2 = pr.sigma_g2_mean
        rec.wall_clock = time.perf_counter() - start
        metrics.append(rec)
        if log is not None:
            log(rec)
    return TrainingResult(clients, server, metrics, transcript, shards, probes)


def fedavg_baseline(cfg, dataset, spec, *, public=None, pretrain=None, encoder=None,
                    shards=None, dims=None, log=None):
    """FedAvg over the assembled model: local training of all parts, average every round."""
    shards, dims, clients = _setup(cfg, dataset, spec, shards, dims)
    enc0 = _init_encoder(dims, cfg.seed, public, pretrain, encoder)
    local_enc = {c.client_id: copy.deepcopy(enc0) for c in clients}
    glob_model = copy.deepcopy(clients[0].model)
    server = ServerState(enc0)
    transcript = Transcript()
    full = lambda model, enc: model.head.parameters() + enc.parameters() + model.tail.parameters()
    size = nn.num_params(full(glob_model, enc0))
    metrics = []
    for t in range(cfg.rounds):
        start = time.perf_counter()
        ids = sample_clients(cfg.clients, cfg.sample_ratio, t, cfg.seed)
        final_loss = []
        for i in ids:
            c = clients[i]
            params = full(c.model, local_enc[i])
            for p, g in zip(params, full(glob_model, server.encoder)):
                p.assign(g.value)
            transcript.record(t, i, "model", "down", size)
            for k in range(1, cfg.local_steps + 1):
                x, y = c.next_batch(dataset, cfg.batch_size)
                fb = head_forward(c.model, x, round=t, step=k)
                sb = encoder_forward(local_enc[i], fb)
                out = tail_forward_loss(c.model, sb, y)
                backward_chain(c.model, local_enc[i], fb, sb, out)
                if cfg.client_lr > 0:
                    nn.optimizer_step(params, cfg.client_optimizer, cfg.client_lr,
                                      momentum=cfg.momentum)
            final_loss.append(out.loss)
            transcript.record(t, i, "model", "up", size)
        local = [full(clients[i].model, local_enc[i]) for i in ids]
        for j, p in enumerate(full(glob_model, server.encoder)):
            p.assign(_mean_values([params[j].value for params in local]))
        view = [replace_model(c, glob_model) for c in clients]
        _, acc = evaluate(view, server.encoder, dataset)
        losses = np.array(final_loss)
        rec = MetricsRecord(t, float(losses.mean()), float(losses.max()), acc,
                            transcript.bytes(t, "up"), transcript.bytes(t, "down"))
        rec.wall_clock = time.perf_counter() - start
        metrics.append(rec)
        if log is not None:
            log(rec)
    return TrainingResult(clients, server, metrics, transcript, shards)


def replace_model(client, model):
    return ClientState(client.client_id, model, client.shard, client.rng)
