"""
Dataset loaders (IDX and CIFAR-10 binary batches) and the repeated
two-fold cross-validation plan.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .rng import BatchRNG, derive_seed

DATA_ENV = "ADVTRAIN_DATA"

IDX_DTYPES = {
    0x08: np.dtype(np.uint8),
    0x09: np.dtype(np.int8),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {np.dtype(v).newbyteorder(">") if v.itemsize > 1 else v: k for k, v in IDX_DTYPES.items()}

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_PER_BATCH = 10000


class DataFormatError(ValueError):
    """Base class for malformed data files."""


class BadMagicError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    name: str = ""
    split: str = ""
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatchError(f"{len(self.images)} images but {len(self.labels)} labels")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self):
        return len(self.labels)

    def subset(self, rows, split=None) -> "Dataset":
        return Dataset(self.images[rows], self.labels[rows], self.name, split or self.split, self.num_classes)

    def validate(self):
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataFormatError("pixel values outside [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError(f"labels outside [0, {self.num_classes})")
        return self


def _open(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Parse an IDX file (optionally gzipped) into an array of its native shape."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: file too short for an IDX header")
    zero, code, ndim = raw[0:2], raw[2], raw[3]
    if zero != b"\x00\x00" or code not in IDX_DTYPES or ndim == 0:
        raise BadMagicError(f"{path}: bad IDX magic 0x{int.from_bytes(raw[:4], 'big'):08x}")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise TruncatedFileError(f"{path}: header needs {head} bytes, file has {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    dtype = IDX_DTYPES[code]
    need = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - head < need:
        raise TruncatedFileError(f"{path}: payload needs {need} bytes, file has {len(raw) - head}")
    if len(raw) - head > need:
        raise DataFormatError(f"{path}: {len(raw) - head - need} trailing bytes after payload")
    return np.frombuffer(raw, dtype=dtype, count=int(np.prod(dims)), offset=head).reshape(dims)


def write_idx(path, array, compress: bool | None = None):
    """Write ``array`` in IDX format; ``.gz`` paths are gzipped unless ``compress`` says otherwise."""
    arr = np.asarray(array)
    dt = arr.dtype if arr.dtype.itemsize == 1 else arr.dtype.newbyteorder(">")
    if dt not in _IDX_CODES:
        raise DataFormatError(f"dtype {arr.dtype} has no IDX code")
    payload = struct.pack(">HBB", 0, _IDX_CODES[dt], arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    payload += np.ascontiguousarray(arr, dtype=dt).tobytes()
    if compress is None:
        compress = str(path).endswith(".gz")
    opener = gzip.open if compress else open
    with opener(path, "wb") as fh:
        fh.write(payload)


def load_idx(images_path, labels_path, name="idx", split="", num_classes=10) -> Dataset:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.dtype != np.uint8 or labels.dtype != np.uint8:
        raise DataFormatError("expected uint8 IDX images and labels")
    if images.ndim != 3 or labels.ndim != 1:
        raise DataFormatError(f"expected (N,H,W) images and (N,) labels, got {images.shape} and {labels.shape}")
    if len(images) != len(labels):
        raise CountMismatchError(f"{images_path} has {len(images)} images but {labels_path} has {len(labels)} labels")
    x = (images.astype(np.float32) / np.float32(255.0))[:, None, :, :]
    return Dataset(x, labels.astype(np.int64), name, split, num_classes).validate()


def save_idx_dataset(ds: Dataset, images_path, labels_path):
    """Inverse of :func:`load_idx` for single-channel data."""
    if ds.images.shape[1] != 1:
        raise DataFormatError("IDX datasets are single-channel")
    pix = np.rint(ds.images[:, 0] * 255.0).astype(np.uint8)
    write_idx(images_path, pix)
    write_idx(labels_path, ds.labels.astype(np.uint8))


def _find(root, names):
    for n in names:
        for cand in (n, n + ".gz"):
            p = os.path.join(root, cand)
            if os.path.exists(p):
                return p
    raise FileNotFoundError(f"data file not found: none of {names} under {root} "
                            f"(pass --data-root or set {DATA_ENV})")


def data_root(root=None) -> str:
    return root or os.environ.get(DATA_ENV) or os.path.join(os.getcwd(), "data")


def load_mnist(root=None, split="train", name="mnist") -> Dataset:
    """MNIST or Fashion-MNIST from a directory of IDX files (plain or gzipped)."""
    root = data_root(root)
    sub = os.path.join(root, name)
    if os.path.isdir(sub):
        root = sub
    prefix = "train" if split == "train" else "t10k"
    imgs = _find(root, [f"{prefix}-images-idx3-ubyte", f"{prefix}-images.idx3-ubyte"])
    labs = _find(root, [f"{prefix}-labels-idx1-ubyte", f"{prefix}-labels.idx1-ubyte"])
    return load_idx(imgs, labs, name, split)


def read_cifar_batch(path, expected=None):
    raw = _open(path).read()
    if len(raw) % CIFAR_RECORD:
        raise TruncatedFileError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}-byte records")
    n = len(raw) // CIFAR_RECORD
    if expected is not None and n != expected:
        raise CountMismatchError(f"{path}: expected {expected} records, found {n}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    return rec[:, 1:].reshape(n, 3, 32, 32), rec[:, 0].astype(np.int64)


def load_cifar10(batch_paths, name="cifar10", split="", expected_per_batch=CIFAR_PER_BATCH) -> Dataset:
    """Concatenate CIFAR-10 binary batches (label byte then R, G, B planes)."""
    if isinstance(batch_paths, (str, os.PathLike)):
        batch_paths = [batch_paths]
    xs, ys = [], []
    for p in batch_paths:
        x, y = read_cifar_batch(p, expected_per_batch)
        xs.append(x)
        ys.append(y)
    x = np.concatenate(xs).astype(np.float32) / np.float32(255.0)
    y = np.concatenate(ys)
    if y.size and y.max() >= 10:
        raise DataFormatError("CIFAR-10 label byte out of range")
    return Dataset(x, y, name, split, 10).validate()


def load_cifar10_dir(root=None, split="train") -> Dataset:
    root = data_root(root)
    for sub in ("cifar-10-batches-bin", "cifar10", ""):
        d = os.path.join(root, sub)
        if os.path.exists(os.path.join(d, "test_batch.bin")):
            break
    else:
        raise FileNotFoundError(f"CIFAR-10 binary batches not found under {root}")
    if split == "train":
        paths = [os.path.join(d, f"data_batch_{i}.bin") for i in range(1, 6)]
    else:
        paths = [os.path.join(d, "test_batch.bin")]
    return load_cifar10(paths, split=split)


def load_dataset(name: str, split: str, root=None) -> Dataset:
    if name in ("mnist", "fashion_mnist", "fashion-mnist"):
        return load_mnist(root, split, name.replace("-", "_"))
    if name == "cifar10":
        return load_cifar10_dir(root, split)
    raise ValueError(f"unknown dataset {name!r}")


def subsample(ds: Dataset, n: int | None) -> Dataset:
    """First ``n`` samples (desk-scale runs); ``None`` keeps everything."""
    if n is None or n >= len(ds):
        return ds
    return ds.subset(slice(0, n))


def split_holdout(ds: Dataset, n_val: int | None):
    """Split off the last ``n_val`` samples as a validation set.

    ``None`` holds out a tenth of the data. Returns ``(train, val)``.
    """
    n = len(ds)
    k = n // 10 if n_val is None else int(n_val)
    if not 0 <= k < n:
        raise ValueError(f"cannot hold out {k} of {n} samples for validation")
    return ds.subset(slice(0, n - k), "train"), ds.subset(slice(n - k, n), "val")


@dataclass
class CvRun:
    repeat: int
    fold: int
    train_idx: np.ndarray
    test_idx: np.ndarray


@dataclass
class CvPlan:
    n_train: int
    n_test: int
    seed: int
    repeats: int = 5
    folds: int = 2
    runs: list = field(default_factory=list)

    def __iter__(self):
        return iter(self.runs)

    def __len__(self):
        return len(self.runs)


def _halves(perm, k):
    return np.array_split(perm, k)


def make_cv_plan(n_train, n_test=None, repeats: int = 5, seed: int = 0, folds: int = 2) -> CvPlan:
    """Repeated k-fold plan over the predefined training set.

    Every repeat draws a fresh permutation of the training indices (split into
    ``folds`` disjoint training folds) and a fresh permutation of the test
    indices (split into ``folds`` halves, one paired with each fold).
    ``n_train`` and ``n_test`` may also be Datasets.
    """
    if hasattr(n_train, "labels"):
        n_train = len(n_train)
    if hasattr(n_test, "labels"):
        n_test = len(n_test)
    if n_test is None:
        raise ValueError("the predefined test split is required")
    plan = CvPlan(int(n_train), int(n_test), seed, repeats, folds)
    for r in range(repeats):
        rng = BatchRNG(derive_seed(seed, "cv", r))
        tr = _halves(rng.permutation(n_train), folds)
        te = _halves(rng.permutation(n_test), folds)
        for f in range(folds):
            plan.runs.append(CvRun(r, f, np.sort(tr[f]), np.sort(te[f])))
    return plan
