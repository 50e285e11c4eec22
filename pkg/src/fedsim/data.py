"""Datasets (IDX files and synthetic blobs) and client partitioning."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DataError, FormatError, PartitionError

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MODES = ("balanced_iid", "imbalanced_iid", "imbalanced_noniid")
SIZE_PROFILES = ("equal", "paper_ratio", "power_law")
RATIO_4211 = (4, 2, 1, 1)


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (N, d) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise DataError(f"features {self.features.shape} and labels {self.labels.shape} disagree")
        if len(self.labels) < 1:
            raise DataError("dataset must hold at least one row")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(self.features)):
            raise DataError("features must be finite")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, rows: np.ndarray) -> "Dataset":
        return Dataset(self.features[rows], self.labels[rows], self.num_classes)


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    features: np.ndarray
    labels: np.ndarray
    rows: np.ndarray  # row indices into the parent dataset

    @property
    def size(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class Chunk:
    features: np.ndarray
    labels: np.ndarray
    remainder: bool = False

    @property
    def size(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class PartitionSpec:
    mode: str
    n_clients: int
    labels_per_client: int = 1
    size_profile: str = "equal"
    alpha: float = 1.0  # power_law exponent
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown partition mode {self.mode!r}; expected one of {MODES}")
        if self.size_profile not in SIZE_PROFILES:
            raise ConfigurationError(f"unknown size profile {self.size_profile!r}")
        if self.n_clients < 1:
            raise ConfigurationError("n_clients must be >= 1")
        if self.labels_per_client < 1:
            raise ConfigurationError("labels_per_client must be >= 1")
        if self.mode == "balanced_iid" and self.size_profile != "equal":
            raise ConfigurationError("balanced_iid requires size_profile 'equal'")


# --- IDX ---------------------------------------------------------------------

def _read_header(buf: bytes, magic: int, ndim: int, what: str) -> tuple[int, ...]:
    need = 4 + 4 * ndim
    if len(buf) < 4:
        raise FormatError(f"{what}: empty or truncated buffer", 0 if not buf else len(buf))
    (got,) = struct.unpack_from(">I", buf, 0)
    if got != magic:
        raise FormatError(f"{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}", 0)
    if len(buf) < need:
        raise FormatError(f"{what}: truncated header", len(buf))
    return struct.unpack_from(f">{ndim}I", buf, 4)


def load_idx(images_bytes: bytes, labels_bytes: bytes, num_classes: int | None = None) -> Dataset:
    """Parse an IDX3 image buffer and IDX1 label buffer; pixels are scaled to [0, 1]."""
    count, rows, cols = _read_header(images_bytes, IDX_IMAGES_MAGIC, 3, "images")
    (n_labels,) = _read_header(labels_bytes, IDX_LABELS_MAGIC, 1, "labels")
    if count != n_labels:
        raise FormatError(f"image count {count} != label count {n_labels}", 4)
    pix_start, pix_len = 16, count * rows * cols
    if len(images_bytes) < pix_start + pix_len:
        raise FormatError("images: truncated pixel payload", len(images_bytes))
    if len(labels_bytes) < 8 + n_labels:
        raise FormatError("labels: truncated label payload", len(labels_bytes))
    pixels = np.frombuffer(images_bytes, dtype=np.uint8, count=pix_len, offset=pix_start)
    labels = np.frombuffer(labels_bytes, dtype=np.uint8, count=n_labels, offset=8).astype(np.int64)
    features = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if n_labels else 1
    return Dataset(features, labels, num_classes)


def load_idx_files(images_path: str | Path, labels_path: str | Path,
                   num_classes: int | None = None) -> Dataset:
    return load_idx(Path(images_path).read_bytes(), Path(labels_path).read_bytes(), num_classes)


def to_idx(ds: Dataset, image_shape: tuple[int, int] | None = None) -> tuple[bytes, bytes]:
    """Export to IDX buffers, quantising features to u8 pixels."""
    n, d = ds.features.shape
    rows, cols = image_shape or (1, d)
    if rows * cols != d:
        raise DataError(f"image shape {image_shape} does not cover {d} features")
    pixels = np.clip(np.rint(ds.features * 255.0), 0, 255).astype(np.uint8)
    images = struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols) + pixels.tobytes()
    labels = struct.pack(">2I", IDX_LABELS_MAGIC, n) + ds.labels.astype(np.uint8).tobytes()
    return images, labels


# --- synthetic data ----------------------------------------------------------

def _class_direction(c: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    v = np.zeros(dim)
    if c < dim:
        v[c] = 1.0
    elif c < 2 * dim:
        v[c - dim] = -1.0
    else:
        v = rng.normal(size=dim)
        v /= np.linalg.norm(v)
    return v


def synth_blobs(num_classes: int, per_class: int, dim: int, separation: float,
                noise_sigma: float, seed: int) -> Dataset:
    """Gaussian blobs centred at ``separation * e_c``, min-max scaled per feature to [0, 1].

    Rows are grouped by class; partitioners shuffle.
    """
    if dim < 1:
        raise ConfigurationError("dim must be >= 1")
    if num_classes < 1 or per_class < 1:
        raise ConfigurationError("num_classes and per_class must be >= 1")
    if separation <= 0:
        raise ConfigurationError("separation must be > 0")
    rng = np.random.default_rng(seed)
    centers = np.stack([separation * _class_direction(c, dim, rng) for c in range(num_classes)])
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    x = centers[labels] + noise_sigma * rng.normal(size=(len(labels), dim))
    lo, hi = x.min(axis=0), x.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return Dataset((x - lo) / span, labels, num_classes)


def train_test_split(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified split; every class keeps round(test_fraction * n_c) rows for testing."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigurationError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    train_rows, test_rows = [], []
    for c in range(ds.num_classes):
        rows = np.flatnonzero(ds.labels == c)
        rows = rows[rng.permutation(len(rows))]
        n_test = int(round(test_fraction * len(rows)))
        test_rows.append(rows[:n_test])
        train_rows.append(rows[n_test:])
    train = np.sort(np.concatenate(train_rows))
    test = np.sort(np.concatenate(test_rows))
    return ds.subset(train), ds.subset(test)


# --- partitioning ------------------------------------------------------------

def profile_weights(spec: PartitionSpec) -> np.ndarray:
    n = spec.n_clients
    if spec.size_profile == "equal":
        return np.ones(n)
    if spec.size_profile == "paper_ratio":
        return np.array([RATIO_4211[i % len(RATIO_4211)] for i in range(n)], dtype=np.float64)
    return (np.arange(1, n + 1, dtype=np.float64)) ** (-spec.alpha)


def _split_sizes(total: int, weights: np.ndarray) -> np.ndarray:
    return np.floor(total * weights / weights.sum() + 1e-9).astype(np.int64)


def _largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    exact = total * weights / weights.sum()
    sizes = np.floor(exact + 1e-9).astype(np.int64)
    short = total - int(sizes.sum())
    # stable: ties broken by position
    order = np.argsort(-(exact - sizes), kind="stable")
    sizes[order[:short]] += 1
    return sizes


def _make_shard(ds: Dataset, cid: int, rows: np.ndarray) -> ClientShard:
    rows = np.asarray(rows, dtype=np.int64)
    return ClientShard(cid, ds.features[rows], ds.labels[rows], rows)


def partition(ds: Dataset, spec: PartitionSpec) -> list[ClientShard]:
    n = spec.n_clients
    if len(ds) < n:
        raise PartitionError(f"dataset has {len(ds)} rows, fewer than n_clients={n}")
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(len(ds))

    if spec.mode == "balanced_iid":
        per = len(ds) // n
        return [_make_shard(ds, i, perm[i * per:(i + 1) * per]) for i in range(n)]

    weights = profile_weights(spec)
    if spec.mode == "imbalanced_iid":
        sizes = _split_sizes(len(ds), weights)
        if sizes.min() < 1:
            raise PartitionError(f"size profile {spec.size_profile!r} leaves a client with no rows "
                                 f"({len(ds)} rows over {n} clients)")
        bounds = np.concatenate([[0], np.cumsum(sizes)])
        return [_make_shard(ds, i, perm[bounds[i]:bounds[i + 1]]) for i in range(n)]

    return _partition_noniid(ds, spec, weights, perm, rng)


def _partition_noniid(ds: Dataset, spec: PartitionSpec, weights: np.ndarray,
                      perm: np.ndarray, rng: np.random.Generator) -> list[ClientShard]:
    n, lpc, c_total = spec.n_clients, spec.labels_per_client, ds.num_classes
    present = [c for c in range(c_total) if np.any(ds.labels == c)]
    n_labels = len(present)
    if lpc > n_labels:
        raise PartitionError(f"labels_per_client={lpc} exceeds the {n_labels} labels present")
    if n * lpc < n_labels:
        raise PartitionError(f"n_clients * labels_per_client = {n * lpc} cannot cover "
                             f"all {n_labels} labels")
    # client i holds labels (i*lpc + k) mod n_labels; consecutive so they are distinct
    holders: dict[int, list[int]] = {c: [] for c in present}
    for i in range(n):
        for k in range(lpc):
            holders[present[(i * lpc + k) % n_labels]].append(i)

    # label-sorted view of the shuffled data: every label's rows form one contiguous run
    order = perm[np.argsort(ds.labels[perm], kind="stable")]
    sorted_labels = ds.labels[order]
    client_rows: list[list[np.ndarray]] = [[] for _ in range(n)]
    for c in present:
        run = order[sorted_labels == c]
        hs = holders[c]
        if len(run) < len(hs):
            raise PartitionError(f"label {c} has {len(run)} rows but {len(hs)} clients need a slice of it")
        sizes = _largest_remainder(len(run), weights[hs])
        if sizes.min() < 1:
            raise PartitionError(f"label {c}: size profile leaves a holder with an empty slice")
        bounds = np.concatenate([[0], np.cumsum(sizes)])
        for j, cid in enumerate(hs):
            client_rows[cid].append(run[bounds[j]:bounds[j + 1]])

    shards = []
    for i in range(n):
        rows = np.concatenate(client_rows[i])
        rows = rows[rng.permutation(len(rows))]
        shards.append(_make_shard(ds, i, rows))
    return shards


def chunk_shard(shard: ClientShard, chunk_size: int) -> list[Chunk]:
    """Full chunks in shard order, then a flagged remainder chunk if ``size % chunk_size``."""
    if chunk_size < 1:
        raise ConfigurationError("chunk_size must be >= 1")
    full = shard.size // chunk_size
    chunks = [Chunk(shard.features[k * chunk_size:(k + 1) * chunk_size],
                    shard.labels[k * chunk_size:(k + 1) * chunk_size]) for k in range(full)]
    if shard.size % chunk_size:
        start = full * chunk_size
        chunks.append(Chunk(shard.features[start:], shard.labels[start:], remainder=True))
    return chunks


def label_histogram(labels: np.ndarray, num_classes: int) -> list[int]:
    return np.bincount(labels, minlength=num_classes).tolist()
