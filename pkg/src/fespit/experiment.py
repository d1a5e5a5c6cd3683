"""Config-driven runs: build data, partition, train, and write result files.

Run directory layout (every file starts with ``# config_hash=... seed=...``)::

    config.txt               resolved configuration
    partition.txt            client train/test index lists (write-once)
    metrics.csv              one row per round
    probes.csv               heterogeneity probes (when probe.every > 0)
    transcript.csv           every client/server payload
    transcript_summary.csv   per (round, kind, direction) counts and bytes
    checkpoint.txt           final encoder and per-client head/tail weights
    timing.csv               per-round wall-clock (not reproducible)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import nn
from .data import format_manifest, generate_synthetic, partition, split_public
from .errors import ConfigError, FespitError
from .federation import MetricsRecord, ProbeRecord, fedavg_baseline, run_training
from .probes import (
    estimate_sigma_g,
    estimate_sigma_l,
    estimate_smoothness,
    model_grad_fn,
    model_params,
    perturbation_pairs,
)
from .rng import derive_rng
from .split import ClientModel, named_tensors, pretrain_encoder, random_encoder, save_checkpoint

log = logging.getLogger("fespit")

SWEEP_AXES = {
    "K": "round.local_steps",
    "M": "round.clients",
    "q": "round.sample_ratio",
    "fedround": "round.fedround",
    "alpha": "partition.alpha",
    "c": "partition.classes_per_client",
    "option": "round.option",
}


@dataclass
class Prepared:
    public: object
    private: object
    shards: list


def prepare_data(cfg):
    ds = generate_synthetic(cfg.data.n, cfg.data.classes, cfg.data.separation, cfg.seed,
                            dim=cfg.model.input_dim)
    # the public split is removed even without pre-training so toggling it only changes the encoder
    public, private = split_public(ds, cfg.pretrain.public_fraction, cfg.seed)
    return Prepared(public, private, partition(private, cfg.partition))


def _write(path, header, lines):
    Path(path).write_text(header + "\n" + "".join(line + "\n" for line in lines))


def _write_once(path, text):
    path = Path(path)
    if path.exists():
        if path.read_text() != text:
            raise FespitError(f"{path} exists with different content; use a fresh output directory")
        return
    path.write_text(text)


def run_experiment(cfg, out=None, quiet=True):
    """Execute one configured run and write its files. Returns the training result."""
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    header = cfgmod.header_line(cfg)
    prep = prepare_data(cfg)
    (out / "config.txt").write_text(header + "\n" + cfgmod.dumps(cfg))
    _write_once(out / "partition.txt", format_manifest(cfg.partition, prep.shards, header))

    def progress(rec):
        if not quiet:
            log.info("round %d  loss %.4f  acc %.4f", rec.round, rec.mean_train_loss,
                     rec.mean_test_accuracy)

    fn = run_training if cfg.algorithm == "fes" else fedavg_baseline
    res = fn(cfg.round, prep.private, cfg.partition, public=prep.public, pretrain=cfg.pretrain,
             shards=prep.shards, dims=cfg.model, log=progress)

    _write(out / "metrics.csv", header,
           [MetricsRecord.HEADER] + [m.csv_row() for m in res.metrics])
    _write(out / "timing.csv", header,
           ["round,wall_clock_seconds"] + [f"{m.round},{m.wall_clock:.6f}" for m in res.metrics])
    if cfg.round.probe_every:
        _write(out / "probes.csv", header, [ProbeRecord.HEADER] + [p.csv_row() for p in res.probes])
    _write(out / "transcript.csv", header, list(res.transcript.lines()))
    summary = ["round,kind,direction,count,bytes"] + [
        f"{r},{k},{d},{c},{b}" for (r, k, d), (c, b) in res.transcript.summary().items()
    ]
    _write(out / "transcript_summary.csv", header, summary)
    tensors = named_tensors("server.", res.server.encoder.parameters())
    for c in res.clients:
        tensors.update(named_tensors(f"client{c.client_id}.", c.model.parameters()))
    save_checkpoint(out / "checkpoint.txt", tensors,
                    meta={"config_hash": cfgmod.config_hash(cfg), "seed": cfg.seed})
    return res


def sweep(cfg, axis, values, out=None, quiet=True):
    """One run per value of ``axis``; outputs go to ``<out>/<axis>=<value>/``."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    key = SWEEP_AXES[axis]
    base = Path(out or cfg.out)
    results = {}
    for value in values:
        overrides = {key: str(value)}
        if axis == "alpha":
            overrides["partition.kind"] = "dirichlet"
        elif axis == "c":
            overrides["partition.kind"] = "pathological"
        member = cfgmod.with_overrides(cfg, **overrides)
        results[value] = run_experiment(member, base / f"{axis}={value}", quiet=quiet)
    return results


def probe_only(cfg, out=None):
    """Partition and measure heterogeneity at the initial model; no training."""
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    header = cfgmod.header_line(cfg)
    prep = prepare_data(cfg)
    _write_once(out / "partition.txt", format_manifest(cfg.partition, prep.shards, header))
    if cfg.pretrain.enabled:
        encoder = pretrain_encoder(cfg.model, prep.public, cfg.pretrain.epochs, cfg.pretrain.lr,
                                   cfg.seed, cfg.pretrain.batch_size).encoder
    else:
        encoder = random_encoder(cfg.model, cfg.seed)
    model = ClientModel.create(cfg.model, cfg.seed, 0)
    ds = prep.private
    sg = estimate_sigma_g(model, encoder, ds, prep.shards)
    rng = derive_rng(cfg.seed, "probe", 0)
    w = nn.flatten(model_params(model, encoder))
    rows = ["client,n_train,n_test,sigma_g2,sigma_l2,smoothness"]
    for s, dev in zip(prep.shards, sg.deviations):
        n = s.train.size
        sl = (estimate_sigma_l(model, encoder, ds, s, 4, min(cfg.round.batch_size, n - 1), rng)
              if n >= 2 else 0.0)
        grad_fn = model_grad_fn(model, encoder, ds.X[s.train], ds.y[s.train])
        L, _ = estimate_smoothness(grad_fn, perturbation_pairs(w, 2, 1e-2, rng))
        rows.append(f"{s.client_id},{n},{s.test.size},{float(dev)!r},{float(sl)!r},{float(L)!r}")
    _write(out / "probe.csv", header, rows)
    return {"sigma_g2_mean": sg.mean, "sigma_g2_max": sg.max,
            "clients": len(prep.shards), "mean_train_size": float(np.mean([s.train.size for s in prep.shards]))}
