"""Synthetic datasets and IID / Dirichlet / pathological client partitions."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, PartitionError
from .rng import derive_rng

MANIFEST_MAGIC = "fespit-partition v1"
PARTITION_KINDS = ("iid", "dirichlet", "pathological")


@dataclass(eq=False)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    classes: int

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise ConfigError(f"X {self.X.shape} and y {self.y.shape} disagree")

    def __len__(self):
        return self.y.shape[0]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], self.classes)

    def class_counts(self, idx=None):
        y = self.y if idx is None else self.y[np.asarray(idx, dtype=np.int64)]
        return np.bincount(y, minlength=self.classes)


def generate_synthetic(n, classes, separation, seed, dim=64):
    """Balanced Gaussian clusters with unit noise.

    Class means sit on ``classes`` random orthonormal directions, scaled so
    that every pair of means is exactly ``separation`` apart.
    """
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    if n < 10 * classes:
        raise ConfigError(f"n={n} is below 10 samples per class for C={classes}")
    if separation < 0:
        raise ConfigError(f"separation must be >= 0, got {separation}")
    if classes > dim:
        raise ConfigError(f"cannot place {classes} orthogonal means in {dim} dimensions")
    rng = derive_rng(seed, "data")
    basis, _ = np.linalg.qr(rng.standard_normal((dim, classes)))
    means = basis.T * (separation / np.sqrt(2.0))
    y = np.arange(n) % classes
    y = y[rng.permutation(n)]
    X = means[y] + rng.standard_normal((n, dim))
    return Dataset(X, y, classes)


def split_public(dataset, fraction, seed):
    """Stratified random split into (public, private) datasets."""
    if not 0 <= fraction < 1:
        raise ConfigError(f"public fraction must be in [0, 1), got {fraction}")
    rng = derive_rng(seed, "public")
    public = []
    for c in range(dataset.classes):
        idx = np.flatnonzero(dataset.y == c)
        public.extend(rng.permutation(idx)[: int(round(fraction * idx.size))])
    mask = np.zeros(len(dataset), dtype=bool)
    mask[np.asarray(public, dtype=np.int64)] = True
    return dataset.subset(np.flatnonzero(mask)), dataset.subset(np.flatnonzero(~mask))


@dataclass(frozen=True)
class PartitionSpec:
    kind: str = "dirichlet"
    clients: int = 100
    seed: int = 0
    alpha: float = 0.3
    classes_per_client: int = 2
    test_fraction: float = 0.2
    max_retries: int = 1000

    def __post_init__(self):
        if self.kind not in PARTITION_KINDS:
            raise ConfigError(f"partition kind must be one of {PARTITION_KINDS}, got {self.kind!r}")
        if self.clients < 1:
            raise ConfigError(f"need at least one client, got {self.clients}")
        if self.kind == "dirichlet" and not self.alpha > 0:
            raise ConfigError(f"dirichlet alpha must be > 0, got {self.alpha}")
        if self.kind == "pathological" and self.classes_per_client < 1:
            raise ConfigError(f"classes per client must be >= 1, got {self.classes_per_client}")
        if not 0 <= self.test_fraction < 1:
            raise ConfigError(f"test fraction must be in [0, 1), got {self.test_fraction}")

    def describe(self):
        extra = {"dirichlet": f" alpha={self.alpha!r}",
                 "pathological": f" c={self.classes_per_client}"}.get(self.kind, "")
        return (f"kind={self.kind}{extra} clients={self.clients} seed={self.seed} "
                f"test_fraction={self.test_fraction!r}")


@dataclass(eq=False)
class ClientShard:
    client_id: int
    train: np.ndarray
    test: np.ndarray
    # dirichlet only: this client's share of each class, length C
    proportions: np.ndarray | None = field(default=None, repr=False)


def _allocate_iid(dataset, M, rng):
    perm = rng.permutation(len(dataset))
    return np.array_split(perm, M), None


def _allocate_dirichlet(dataset, M, alpha, rng):
    C = dataset.classes
    parts = [[] for _ in range(M)]
    props = np.zeros((M, C))
    for c in range(C):
        idx = rng.permutation(np.flatnonzero(dataset.y == c))
        p = rng.dirichlet(np.full(M, alpha))
        props[:, c] = p
        cuts = (np.cumsum(p) * idx.size).astype(np.int64)[:-1]
        for i, chunk in enumerate(np.split(idx, cuts)):
            parts[i].append(chunk)
    return [np.concatenate(p) for p in parts], props


def _allocate_pathological(dataset, M, c, rng):
    C = dataset.classes
    k = min(c, C)
    if M * k < C:
        raise PartitionError(f"{M} clients x {k} classes cannot cover {C} classes")
    class_order = rng.permutation(C)
    client_order = rng.permutation(M)
    holders = [[] for _ in range(C)]
    for slot, client in enumerate(client_order):
        for r in range(k):
            holders[class_order[(slot * k + r) % C]].append(client)
    parts = [[] for _ in range(M)]
    for cls in range(C):
        idx = rng.permutation(np.flatnonzero(dataset.y == cls))
        owners = sorted(holders[cls])
        for client, chunk in zip(owners, np.array_split(idx, len(owners))):
            parts[client].append(chunk)
    return [np.concatenate(p) if p else np.zeros(0, np.int64) for p in parts], None


def _hold_out(dataset, idx, test_fraction):
    """Per-class test hold-out so test label proportions follow train."""
    train, test = [], []
    y = dataset.y[idx]
    for c in range(dataset.classes):
        members = idx[y == c]
        if members.size == 0:
            continue
        n_test = min(int(round(test_fraction * members.size)), members.size - 1)
        test.append(members[:n_test])
        train.append(members[n_test:])
    cat = lambda parts: np.sort(np.concatenate(parts)) if parts else np.zeros(0, np.int64)
    return cat(train), cat(test)


def partition(dataset, spec):
    """Split ``dataset`` across ``spec.clients`` clients.

    Every sample lands in exactly one client's train or test set. Draws that
    leave some client without train (or, when requested, test) samples are
    redrawn up to ``spec.max_retries`` times.
    """
    rng = derive_rng(spec.seed, "partition")
    M = spec.clients
    for _ in range(spec.max_retries + 1):
        if spec.kind == "iid":
            parts, props = _allocate_iid(dataset, M, rng)
        elif spec.kind == "dirichlet":
            parts, props = _allocate_dirichlet(dataset, M, spec.alpha, rng)
        else:
            parts, props = _allocate_pathological(dataset, M, spec.classes_per_client, rng)
        shards = []
        for i, part in enumerate(parts):
            train, test = _hold_out(dataset, part, spec.test_fraction)
            shards.append(ClientShard(i, train, test, None if props is None else props[i]))
        ok = all(s.train.size > 0 for s in shards)
        if spec.test_fraction > 0:
            ok = ok and all(s.test.size > 0 for s in shards)
        if ok:
            return shards
    raise PartitionError(
        f"{spec.kind} partition left a client empty after {spec.max_retries} redraws "
        f"({M} clients, {len(dataset)} samples)"
    )


def label_distribution(dataset, idx):
    counts = dataset.class_counts(idx).astype(np.float64)
    return counts / counts.sum()


# -- manifest -----------------------------------------------------------------

def format_manifest(spec, shards, header=None):
    buf = io.StringIO()
    buf.write(MANIFEST_MAGIC + "\n")
    if header:
        buf.write(header.rstrip("\n") + "\n")
    buf.write(f"spec {spec.describe()}\n")
    for s in shards:
        buf.write(f"client {s.client_id} train {','.join(map(str, s.train.tolist()))}\n")
        buf.write(f"client {s.client_id} test {','.join(map(str, s.test.tolist()))}\n")
    return buf.getvalue()


def write_manifest(path, spec, shards, header=None):
    """One line per (client, split): ``client <id> <train|test> <i,j,k...>``."""
    Path(path).write_text(format_manifest(spec, shards, header))


def read_manifest(path):
    """Returns ``(spec_fields, shards)``; spec fields are raw strings."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != MANIFEST_MAGIC:
        raise ConfigError(f"{path}: not a partition manifest")
    spec_fields, sets = {}, {}
    for line in lines[1:]:
        if line.startswith("#") or not line.strip():
            continue
        head, _, rest = line.partition(" ")
        if head == "spec":
            spec_fields = dict(kv.split("=", 1) for kv in rest.split())
        elif head == "client":
            cid, which, *values = rest.split(" ")
            values = values[0] if values else ""
            arr = np.array([int(v) for v in values.split(",") if v], dtype=np.int64)
            sets.setdefault(int(cid), {})[which] = arr
        else:
            raise ConfigError(f"{path}: unexpected line {line[:40]!r}")
    shards = [ClientShard(cid, d.get("train", np.zeros(0, np.int64)), d.get("test", np.zeros(0, np.int64)))
              for cid, d in sorted(sets.items())]
    return spec_fields, shards
