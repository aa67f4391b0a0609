"""Dataset containers, IDX/CSV readers, synthetic sets, splits and holdouts."""

from __future__ import annotations

import csv
import gzip
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import AllClassesHeldOut, BadMagic, DataError, DimMismatch, EmptyHoldout, TruncatedFile

IDX_LABELS = 0x00000801
IDX_IMAGES = 0x00000803


@dataclass
class DatasetBundle:
    name: str
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    n_classes: int
    held_out: tuple = ()
    class_map: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.X_train.shape[1] != self.X_test.shape[1]:
            raise DimMismatch("train and test feature widths differ")
        for y in (self.y_train, self.y_test):
            if len(y) and (y.min() < 0 or y.max() >= self.n_classes):
                raise DataError("label outside class range")

    @property
    def dim(self) -> int:
        return self.X_train.shape[1]


# -- IDX ----------------------------------------------------------------------


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Raw IDX array (unsigned bytes) with its declared shape."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise TruncatedFile(f"{path}: missing header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (IDX_LABELS, IDX_IMAGES):
        raise BadMagic(f"{path}: magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFile(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise TruncatedFile(f"{path}: expected {count} data bytes, found {len(raw) - header}")
    if len(raw) > header + count:
        raise DimMismatch(f"{path}: {len(raw) - header - count} trailing bytes")
    return np.frombuffer(raw, dtype=np.uint8, offset=header, count=count).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    magic = {1: IDX_LABELS, 3: IDX_IMAGES}.get(array.ndim)
    if magic is None:
        raise DimMismatch("IDX writer supports label vectors and 3-D image stacks")
    payload = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(payload)


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Images flattened row-major to ``H*W`` features in [0, 1], plus labels."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3 or labels.ndim != 1:
        raise BadMagic("expected an image tensor and a label vector")
    if images.shape[0] != labels.shape[0]:
        raise DimMismatch(f"{images.shape[0]} images but {labels.shape[0]} labels")
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return X, labels.astype(np.int64)


IDX_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(directory: Path, stem: str) -> Path | None:
    for name in (stem, stem + ".gz"):
        if (directory / name).exists():
            return directory / name
    return None


def load_idx_dir(directory, name: str = "idx") -> DatasetBundle:
    """Standard four-file MNIST-style directory (plain or gzipped)."""
    directory = Path(directory)
    parts = {}
    for split, (img, lab) in IDX_NAMES.items():
        ip, lp = _find(directory, img), _find(directory, lab)
        if ip is None or lp is None:
            raise DataError(f"{directory}: missing {img} / {lab}")
        parts[split] = load_idx(ip, lp)
    (Xtr, ytr), (Xte, yte) = parts["train"], parts["test"]
    return DatasetBundle(name, Xtr, ytr, Xte, yte, int(max(ytr.max(), yte.max())) + 1)


# -- CSV container (MNIST-1D and friends) -------------------------------------


def load_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Rows of ``label, f1, ..., fD`` with a header line."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0].strip().lower() != "label":
        raise DataError(f"{path}: header must start with 'label'")
    width = len(rows[0])
    body = rows[1:]
    if any(len(r) != width for r in body):
        raise DimMismatch(f"{path}: ragged rows")
    try:
        arr = np.array(body, dtype=np.float64).reshape(len(body), width)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    return arr[:, 1:], arr[:, 0].astype(np.int64)


def load_csv_bundle(train_path, test_path, name: str = "csv") -> DatasetBundle:
    Xtr, ytr = load_csv(train_path)
    Xte, yte = load_csv(test_path)
    return DatasetBundle(name, Xtr, ytr, Xte, yte, int(max(ytr.max(), yte.max())) + 1)


# -- built-in sets ------------------------------------------------------------


def synth_blobs(n_per_class: int = 100, classes: int = 4, D: int = 16, spread: float = 1.0,
                seed: int = 0, test_fraction: float = 0.25) -> DatasetBundle:
    """Gaussian clusters around seeded random centers (scaled into [0, 1])."""
    if classes < 2:
        raise DataError("need at least two classes")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.2, 0.8, size=(classes, D))
    y = np.repeat(np.arange(classes), n_per_class)
    X = centers[y] + rng.normal(0.0, 0.05 * spread, size=(len(y), D))
    return split(f"blobs-{classes}x{D}", X, y, classes, test_fraction, seed)


def split(name: str, X, y, n_classes: int, test_fraction: float, seed: int) -> DatasetBundle:
    order = np.random.default_rng([seed, 7]).permutation(len(y))
    n_test = int(round(test_fraction * len(y)))
    te, tr = order[:n_test], order[n_test:]
    return DatasetBundle(name, X[tr], y[tr], X[te], y[te], n_classes)


def mnist_sample(n_train: int = 4000, n_test: int = 1000, seed: int = 0) -> DatasetBundle:
    """The 5,000-image MNIST sample that ships with mlxtend, split stratified-at-random."""
    from mlxtend.data import mnist_data

    X, y = mnist_data()
    X = X.astype(np.float64) / 255.0
    y = y.astype(np.int64)
    if n_train + n_test > len(y):
        raise DataError(f"mnist sample has only {len(y)} images")
    order = np.random.default_rng([seed, 11]).permutation(len(y))
    tr, te = order[:n_train], order[n_train:n_train + n_test]
    return DatasetBundle("mnist-5k", X[tr], y[tr], X[te], y[te], 10)


def subset(bundle: DatasetBundle, n_train: int, n_test: int, seed: int = 0) -> DatasetBundle:
    rng = np.random.default_rng([seed, 13])
    tr = np.sort(rng.choice(len(bundle.y_train), min(n_train, len(bundle.y_train)), replace=False))
    te = np.sort(rng.choice(len(bundle.y_test), min(n_test, len(bundle.y_test)), replace=False))
    return replace(bundle, X_train=bundle.X_train[tr], y_train=bundle.y_train[tr],
                   X_test=bundle.X_test[te], y_test=bundle.y_test[te])


def benchmark_dataset(role: str, n_train: int = 8000, n_test: int = 2000, seed: int = 0) -> DatasetBundle:
    """Dataset for a named benchmark role (``"mnist"`` or ``"fashion"``).

    Real IDX files are used when ``$PIB_DATA_DIR/<role>`` holds them; otherwise
    the bundled 5,000-image MNIST sample stands in, split 4,000/1,000.
    """
    root = os.environ.get("PIB_DATA_DIR")
    if root and (Path(root) / role).is_dir():
        full = load_idx_dir(Path(root) / role, role)
        return subset(full, n_train, n_test, seed)
    bundle = mnist_sample(min(n_train, 4000), min(n_test, 1000), seed)
    if role != "mnist":
        bundle = replace(bundle, name=f"{role}-standin:mnist-5k")
    return bundle


def make_ood_split(bundle: DatasetBundle, held_out_classes) -> tuple[DatasetBundle, np.ndarray]:
    """Drop ``held_out_classes`` from training, re-index the rest densely.

    Returns the in-distribution bundle and the OOD test inputs (held-out
    classes only, from the test split).
    """
    held = sorted({int(c) for c in held_out_classes})
    if not held:
        raise EmptyHoldout("no classes held out")
    if any(c < 0 or c >= bundle.n_classes for c in held):
        raise DataError(f"held-out classes {held} outside 0..{bundle.n_classes - 1}")
    kept = [c for c in range(bundle.n_classes) if c not in held]
    if not kept:
        raise AllClassesHeldOut("every class was held out")
    remap = np.full(bundle.n_classes, -1, dtype=np.int64)
    remap[kept] = np.arange(len(kept))
    tr = remap[bundle.y_train] >= 0
    te = remap[bundle.y_test] >= 0
    in_dist = DatasetBundle(bundle.name + "-id", bundle.X_train[tr], remap[bundle.y_train[tr]],
                            bundle.X_test[te], remap[bundle.y_test[te]], len(kept), tuple(held),
                            {int(k): int(v) for k, v in zip(kept, range(len(kept)))})
    return in_dist, bundle.X_test[~te]
