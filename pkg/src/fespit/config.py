"""Flat ``section.key = value`` experiment configuration.

Every key has a default; an empty file yields the full-scale settings
(500 rounds, 100 clients, 5 local steps, batch 128, fedround 20,
eps 1e-4, client lr 2e-4 with Adam, server lr 1e-6).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .data import PartitionSpec
from .errors import ConfigError
from .federation import PretrainConfig, RoundConfig
from .split import ModelDims
from .zo import ZOConfig

ALGORITHMS = ("fes", "fedavg")


@dataclass(frozen=True)
class DataConfig:
    n: int = 10000
    classes: int = 10
    separation: float = 4.0


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelDims = field(default_factory=lambda: ModelDims(classes=10))
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    round: RoundConfig = field(default_factory=RoundConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    algorithm: str = "fes"
    out: str = "runs/default"
    seed: int = 0


# key -> (section attribute, field name); "zo.*" lives inside round.zo
KEYS = {}
for _name in ("n", "classes", "separation"):
    KEYS[f"data.{_name}"] = ("data", _name)
for _name in ("tokens", "width", "attn_width", "mlp_width", "tail_hidden", "encoder_blocks"):
    KEYS[f"model.{_name}"] = ("model", _name)
for _name in ("kind", "alpha", "classes_per_client", "test_fraction", "max_retries"):
    KEYS[f"partition.{_name}"] = ("partition", _name)
for _name in ("rounds", "clients", "sample_ratio", "local_steps", "client_lr", "server_lr",
              "server_lr_decay", "server_lr_decay_every", "fedround", "option",
              "client_optimizer", "momentum", "batch_size"):
    KEYS[f"round.{_name}"] = ("round", _name)
for _name in ("epsilon", "num_directions"):
    KEYS[f"zo.{_name}"] = ("zo", _name)
for _name in ("enabled", "epochs", "lr", "batch_size", "public_fraction"):
    KEYS[f"pretrain.{_name}"] = ("pretrain", _name)
KEYS["probe.every"] = ("round", "probe_every")
KEYS["run.algorithm"] = ("run", "algorithm")
KEYS["run.out"] = ("run", "out")
KEYS["run.seed"] = ("run", "seed")


def _get(cfg, key):
    section, name = KEYS[key]
    if section == "run":
        return getattr(cfg, name)
    if section == "zo":
        return getattr(cfg.round.zo, name)
    return getattr(getattr(cfg, section), name)


def to_flat(cfg):
    return {key: _get(cfg, key) for key in KEYS}


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(key, text, like):
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(like).__name__}") from None


def from_flat(flat):
    """Build a validated config; errors name the offending section."""
    sections = {}
    for key, value in flat.items():
        section, name = KEYS[key]
        sections.setdefault(section, {})[name] = value
    run = sections["run"]
    if run["algorithm"] not in ALGORITHMS:
        raise ConfigError(f"run.algorithm: expected one of {ALGORITHMS}, got {run['algorithm']!r}")

    def build(section, cls, **extra):
        try:
            return cls(**sections[section], **extra)
        except ConfigError as e:
            raise ConfigError(f"{section}: {e}") from None

    data = build("data", DataConfig)
    if data.classes < 2 or data.n < 10 * data.classes or data.separation < 0:
        raise ConfigError(f"data: need classes >= 2, n >= 10*classes, separation >= 0; got {data}")
    model = build("model", ModelDims, classes=data.classes,
                  input_dim=sections["model"]["tokens"] * sections["model"]["width"])
    zo = build("zo", ZOConfig)
    rnd = build("round", RoundConfig, zo=zo, seed=run["seed"])
    part = build("partition", PartitionSpec, clients=rnd.clients, seed=run["seed"])
    pre = build("pretrain", PretrainConfig)
    if pre.epochs < 0 or not 0 <= pre.public_fraction < 1 or pre.lr <= 0:
        raise ConfigError(f"pretrain: invalid settings {pre}")
    if pre.enabled and pre.public_fraction == 0:
        raise ConfigError("pretrain: enabled but public_fraction is 0")
    return ExperimentConfig(data, model, part, rnd, pre, run["algorithm"], run["out"], run["seed"])


def defaults():
    return to_flat(ExperimentConfig())


def loads(text, source="<string>"):
    flat = defaults()
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(
                f"{source}:{lineno}: unknown key {key!r}; valid keys: {', '.join(sorted(KEYS))}"
            )
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        flat[key] = _parse(key, value, flat[key])
    return from_flat(flat)


def load_config(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return loads(path.read_text(), source=str(path))


def dumps(cfg):
    return "".join(f"{key} = {_format(value)}\n" for key, value in to_flat(cfg).items())


def with_overrides(cfg, **overrides):
    """Copy of ``cfg`` with some keys replaced, e.g. ``**{"round.rounds": 3}``."""
    flat = to_flat(cfg)
    for key, value in overrides.items():
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}")
        flat[key] = value if not isinstance(value, str) else _parse(key, value, flat[key])
    return from_flat(flat)


def config_hash(cfg):
    """Hash of every setting except the output directory."""
    text = "".join(line for line in dumps(cfg).splitlines(True) if not line.startswith("run.out "))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def header_line(cfg):
    return f"# config_hash={config_hash(cfg)} seed={cfg.seed}"
