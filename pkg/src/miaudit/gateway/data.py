"""Dataset containers, IDX (MNIST) ingestion and a synthetic blobs generator."""
from __future__ import annotations

import gzip
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.datasets import make_blobs

MEMBER = "member"
NONMEMBER = "nonmember"

_IDX_DTYPES = {
    0x08: np.uint8,
    0x09: np.int8,
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


@dataclass
class LabeledDataset:
    """A batch of inputs in [0, 1] with integer labels and stable sample ids."""

    inputs: np.ndarray
    labels: np.ndarray
    split_tag: str = MEMBER
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"inputs ({self.inputs.shape[0]}) and labels ({self.labels.shape[0]}) differ in length"
            )
        if self.split_tag not in (MEMBER, NONMEMBER):
            raise ValueError(f"split_tag must be {MEMBER!r} or {NONMEMBER!r}, got {self.split_tag!r}")
        if self.ids is None:
            self.ids = np.array([f"{self.split_tag}-{i}" for i in range(len(self.labels))])
        else:
            self.ids = np.asarray(self.ids).astype(str)
        if len(self.ids) != len(self.labels):
            raise ValueError("ids and labels differ in length")

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def subset(self, index) -> "LabeledDataset":
        return LabeledDataset(self.inputs[index], self.labels[index], self.split_tag, self.ids[index])

    def tagged(self, split_tag: str) -> "LabeledDataset":
        return LabeledDataset(self.inputs, self.labels, split_tag, self.ids)

    def check_classes(self, n_classes: int) -> None:
        if len(self) and (self.labels.min() < 0 or self.labels.max() >= n_classes):
            raise ValueError(f"labels outside [0, {n_classes})")


def read_idx(path) -> np.ndarray:
    """Read an IDX file (optionally gzip-compressed) into an array."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise ValueError(f"{path}: not an IDX file")
    dtype = _IDX_DTYPES.get(raw[2])
    if dtype is None:
        raise ValueError(f"{path}: unsupported IDX type code 0x{raw[2]:02x}")
    ndim = raw[3]
    dims = tuple(int.from_bytes(raw[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim))
    data = np.frombuffer(raw, dtype=dtype, offset=4 + 4 * ndim)
    if data.size != int(np.prod(dims)):
        raise ValueError(f"{path}: payload size {data.size} does not match header dims {dims}")
    return data.reshape(dims)


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"{stem} not found in {directory}")


def default_mnist_dir() -> Path:
    return Path(os.environ.get("MIAUDIT_MNIST_DIR", Path.home() / "data" / "mnist"))


def load_mnist(directory=None) -> tuple[LabeledDataset, LabeledDataset]:
    """Load the MNIST train/test IDX files as (members, nonmembers) pools.

    Images are scaled to [0, 1] and shaped (N, 1, 28, 28).
    """
    directory = Path(directory) if directory is not None else default_mnist_dir()
    out = []
    for prefix, tag in (("train", MEMBER), ("t10k", NONMEMBER)):
        images = read_idx(_find(directory, f"{prefix}-images-idx3-ubyte"))
        labels = read_idx(_find(directory, f"{prefix}-labels-idx1-ubyte"))
        x = (images.astype(np.float32) / 255.0)[:, None, :, :]
        ids = np.array([f"mnist-{prefix}-{i}" for i in range(len(labels))])
        out.append(LabeledDataset(x, labels.astype(np.int64), tag, ids))
    return out[0], out[1]


def gaussian_blobs(n_samples: int, n_classes: int, dim: int, cluster_std: float = 1.0,
                   seed: int = 0, center_box=(-4.0, 4.0)) -> LabeledDataset:
    """Isotropic Gaussian clusters rescaled to [0, 1] per feature."""
    x, y = make_blobs(n_samples=n_samples, n_features=dim, centers=n_classes,
                      cluster_std=cluster_std, center_box=center_box, random_state=seed)
    lo, hi = x.min(axis=0), x.max(axis=0)
    x = (x - lo) / np.where(hi > lo, hi - lo, 1.0)
    ids = np.array([f"blobs{seed}-{i}" for i in range(n_samples)])
    return LabeledDataset(x.astype(np.float32), y, MEMBER, ids)


def split_pool(pool: LabeledDataset, n_members: int, n_nonmembers: int, seed: int = 0):
    """Draw disjoint member and nonmember sets from one pool."""
    if n_members + n_nonmembers > len(pool):
        raise ValueError(f"pool of {len(pool)} cannot supply {n_members}+{n_nonmembers} samples")
    order = np.random.default_rng(seed).permutation(len(pool))
    members = pool.subset(np.sort(order[:n_members])).tagged(MEMBER)
    nonmembers = pool.subset(np.sort(order[n_members:n_members + n_nonmembers])).tagged(NONMEMBER)
    return members, nonmembers


def sample(ds: LabeledDataset, n: int | None, seed: int = 0) -> LabeledDataset:
    if n is None or n >= len(ds):
        return ds
    idx = np.sort(np.random.default_rng(seed).choice(len(ds), size=n, replace=False))
    return ds.subset(idx)


def with_label_noise(ds: LabeledDataset, rate: float, n_classes: int, seed: int = 0) -> LabeledDataset:
    """Reassign a ``rate`` fraction of labels uniformly to a different class."""
    rng = np.random.default_rng(seed)
    labels = ds.labels.copy()
    flip = rng.random(len(labels)) < rate
    shift = rng.integers(1, n_classes, size=int(flip.sum()))
    labels[flip] = (labels[flip] + shift) % n_classes
    return LabeledDataset(ds.inputs, labels, ds.split_tag, ds.ids)
