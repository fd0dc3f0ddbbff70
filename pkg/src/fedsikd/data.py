"""Dataset loading, Dirichlet label-skew partitioning, and client statistics."""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049
HAR_FEATURES = 561

MNIST_FILES = {
    "train_images": ("train-images-idx3-ubyte", "train-images.idx3-ubyte"),
    "train_labels": ("train-labels-idx1-ubyte", "train-labels.idx1-ubyte"),
    "test_images": ("t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"),
    "test_labels": ("t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"),
}


class DataLoadError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) == 0:
            raise ValueError(f"dataset {self.name!r} is empty")
        if len(self.features) != len(self.labels):
            raise ValueError(f"{len(self.features)} feature rows but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ValueError(f"labels of {self.name!r} fall outside [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx, name: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.features[idx], self.labels[idx], self.class_count, name or self.name)


@dataclass
class ClientDataset:
    client_id: int
    features: np.ndarray
    labels: np.ndarray
    indices: np.ndarray  # rows of the pooled training set held by this client

    @property
    def size(self) -> int:
        return len(self.labels)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class ClientStats:
    client_id: int
    stats_vector: np.ndarray
    mode: str


@dataclass(frozen=True)
class PartitionSpec:
    client_count: int = 40
    alpha: float = 0.5
    rng_seed: int = 0
    min_per_client: int = 1
    max_retries: int = 1000

    def __post_init__(self):
        if self.client_count < 2:
            raise ValueError(f"client_count must be >= 2, got {self.client_count}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.min_per_client < 0:
            raise ValueError("min_per_client must be non-negative")


# ---------------------------------------------------------------- MNIST


def _find(directory: Path, names) -> Path:
    for name in names:
        for cand in (directory / name, directory / (name + ".gz")):
            if cand.exists():
                return cand
    raise DataLoadError(f"none of {names} found in {directory}")


def _read_bytes(path: Path) -> bytes:
    if path.suffix == ".gz":
        import gzip

        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Parse a big-endian unsigned-byte IDX file."""
    path = Path(path)
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise DataLoadError(f"{path.name}: truncated header")
    magic = struct.unpack(">i", raw[:4])[0]
    if magic != expected_magic:
        raise DataLoadError(f"{path.name}: bad magic number {magic}, expected {expected_magic}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataLoadError(f"{path.name}: truncated header")
    dims = struct.unpack(">" + "i" * ndim, raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise DataLoadError(f"{path.name}: expected {count} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_mnist(directory) -> tuple[Dataset, Dataset]:
    """Load the four MNIST IDX files; pixels scaled to [0, 1], shape (n, 28, 28, 1)."""
    directory = resolve_data_dir(directory)
    out = []
    for split in ("train", "test"):
        images = read_idx(_find(directory, MNIST_FILES[f"{split}_images"]), IDX_IMAGE_MAGIC)
        labels = read_idx(_find(directory, MNIST_FILES[f"{split}_labels"]), IDX_LABEL_MAGIC)
        if len(images) != len(labels):
            raise DataLoadError(f"MNIST {split}: {len(images)} images but {len(labels)} labels")
        x = (images.astype(np.float32) / np.float32(255.0))[..., None]
        out.append(Dataset(x, labels.astype(np.int64), 10, f"mnist-{split}"))
    return out[0], out[1]


# ---------------------------------------------------------------- HAR


def _read_har_matrix(path: Path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for i, line in enumerate(fh):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != HAR_FEATURES:
                raise DataLoadError(f"{path.name}: row {i} has {len(fields)} fields, expected {HAR_FEATURES}")
            try:
                rows.append([float(v) for v in fields])
            except ValueError as exc:
                raise DataLoadError(f"{path.name}: row {i} is not numeric ({exc})") from None
    if not rows:
        raise DataLoadError(f"{path.name}: no rows")
    return np.asarray(rows, dtype=np.float64)


def _read_har_labels(path: Path) -> np.ndarray:
    vals = []
    with open(path) as fh:
        for i, line in enumerate(fh):
            s = line.strip()
            if not s:
                continue
            try:
                vals.append(int(s))
            except ValueError:
                raise DataLoadError(f"{path.name}: row {i} is not an integer label") from None
    labels = np.asarray(vals, dtype=np.int64)
    if labels.min() < 1 or labels.max() > 6:
        raise DataLoadError(f"{path.name}: activity labels must lie in 1..6")
    return labels - 1


def _har_file(directory: Path, split: str, stem: str) -> Path:
    for cand in (directory / split / f"{stem}_{split}.txt", directory / f"{stem}_{split}.txt"):
        if cand.exists():
            return cand
    raise DataLoadError(f"{stem}_{split}.txt not found under {directory}")


def load_har(directory) -> tuple[Dataset, Dataset]:
    """Load UCI HAR feature files, standardized with train-split statistics."""
    directory = resolve_data_dir(directory)
    parts = {}
    for split in ("train", "test"):
        x = _read_har_matrix(_har_file(directory, split, "X"))
        y = _read_har_labels(_har_file(directory, split, "y"))
        if len(x) != len(y):
            raise DataLoadError(f"HAR {split}: {len(x)} feature rows but {len(y)} labels")
        parts[split] = (x, y)
    mean = parts["train"][0].mean(axis=0)
    std = parts["train"][0].std(axis=0)
    std[std == 0] = 1.0
    out = []
    for split in ("train", "test"):
        x, y = parts[split]
        out.append(Dataset(((x - mean) / std).astype(np.float32), y, 6, f"har-{split}"))
    return out[0], out[1]


def resolve_data_dir(directory) -> Path:
    """Relative paths are resolved against ``$FEDSIKD_DATA_ROOT`` when it is set."""
    path = Path(directory)
    root = os.environ.get("FEDSIKD_DATA_ROOT")
    if not path.is_absolute() and root:
        path = Path(root) / path
    if not path.is_dir():
        raise DataLoadError(f"dataset directory {path} does not exist")
    return path


def load_dataset(name: str, directory) -> tuple[Dataset, Dataset]:
    if name == "mnist":
        return load_mnist(directory)
    if name == "har":
        return load_har(directory)
    raise ValueError(f"unknown dataset {name!r}")


# ---------------------------------------------------------------- partitioning


def dirichlet_partition(data: Dataset, spec: PartitionSpec) -> list[ClientDataset]:
    """Split every class across clients with proportions drawn from Dir(alpha * 1_N).

    Redraws the whole partition until each client holds at least
    ``max(min_per_client, 1)`` rows.
    """
    n_clients = spec.client_count
    need = max(spec.min_per_client, 1)
    if len(data) < n_clients * need:
        raise ValueError(f"{len(data)} rows cannot give {n_clients} clients {need} rows each")
    rng = np.random.default_rng(spec.rng_seed)
    by_class = [np.flatnonzero(data.labels == c) for c in range(data.class_count)]
    for attempt in range(spec.max_retries):
        buckets: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
        for idx in by_class:
            if len(idx) == 0:
                continue
            props = rng.dirichlet(np.full(n_clients, spec.alpha))
            shuffled = rng.permutation(idx)
            cuts = (np.cumsum(props)[:-1] * len(idx)).astype(np.int64)
            for cid, part in enumerate(np.split(shuffled, cuts)):
                buckets[cid].append(part)
        sizes = [sum(len(p) for p in b) for b in buckets]
        if min(sizes) >= need:
            if attempt:
                log.debug("dirichlet partition accepted after %d redraws", attempt)
            clients = []
            for cid, parts in enumerate(buckets):
                idx = np.sort(np.concatenate(parts))
                clients.append(ClientDataset(cid, data.features[idx], data.labels[idx], idx))
            return clients
    raise RuntimeError(
        f"no Dirichlet draw gave every client >= {need} rows after {spec.max_retries} tries; "
        "use a larger alpha or a smaller min_per_client"
    )


def label_histogram(labels, class_count: int) -> np.ndarray:
    return np.bincount(np.asarray(labels), minlength=class_count).astype(np.float64)


def label_entropy(labels, class_count: int) -> float:
    """Shannon entropy (nats) of a label sample."""
    h = label_histogram(labels, class_count)
    p = h[h > 0] / h.sum()
    return float(-(p * np.log(p)).sum())


# ---------------------------------------------------------------- statistics


def moment_stats(values: np.ndarray, axis=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Population mean, standard deviation and moment skewness m3 / m2**1.5.

    Zero-variance columns get skewness 0.
    """
    x = np.asarray(values, dtype=np.float64)
    mu = x.mean(axis=axis)
    dev = x - (mu if axis is None else np.expand_dims(mu, axis))
    m2 = (dev**2).mean(axis=axis)
    m3 = (dev**3).mean(axis=axis)
    sigma = np.sqrt(m2)
    with np.errstate(divide="ignore", invalid="ignore"):
        gamma = np.where(m2 > 0, m3 / np.where(m2 > 0, m2, 1.0) ** 1.5, 0.0)
    # round-off can leave tiny m2 on constant data
    degenerate = x.max(axis=axis) == x.min(axis=axis)
    gamma = np.where(degenerate, 0.0, gamma)
    sigma = np.where(degenerate, 0.0, sigma)
    return np.asarray(mu), np.asarray(sigma), np.asarray(gamma)


def compute_client_stats(client: ClientDataset, mode: str = "per_feature") -> ClientStats:
    """(mean, std, skewness) of one client's features.

    ``scalar`` pools every feature value into one triple; ``per_feature``
    computes the triple per column and concatenates all means, then all
    standard deviations, then all skewnesses.
    """
    x = np.asarray(client.features).reshape(len(client.features), -1)
    if mode == "scalar":
        mu, sigma, gamma = moment_stats(x.ravel())
        vec = np.array([mu, sigma, gamma], dtype=np.float64)
    elif mode == "per_feature":
        mu, sigma, gamma = moment_stats(x, axis=0)
        vec = np.concatenate([mu, sigma, gamma])
    else:
        raise ValueError(f"unknown stats mode {mode!r}")
    return ClientStats(client.client_id, vec, mode)
