"""Dataset loading, synthetic data, standardization and frozen mini-batch plans."""

from __future__ import annotations

import csv
import gzip
import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigurationError, DataError, FormatError, ParseError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    features: np.ndarray  # [num_samples, d]
    labels: np.ndarray  # int64 [num_samples]
    num_classes: int
    split_tag: str = "train"
    # original label value for each class index, when labels were remapped
    class_map: Optional[Tuple] = None

    def __post_init__(self):
        self.features = np.asarray(self.features)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {self.features.shape}")
        if self.features.shape[0] != self.labels.shape[0]:
            raise DataError(f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels")
        if self.num_classes < 1:
            raise DataError("num_classes must be positive")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]


def _parse_number(text, line, column):
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"column {column}: cannot parse {text!r} as a number", line) from None


def load_csv(
    path: Union[str, Path],
    label_column: Union[int, str] = 0,
    header: bool = False,
    split_tag: str = "train",
) -> Dataset:
    """Read a comma-separated file with one integer label column.

    ``label_column`` is a 0-based index, or a column name when ``header`` is
    true. Every other column is a numeric feature. Original label values are
    remapped to ``0..C-1`` in sorted order and kept in ``class_map``.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [(i + 1, row) for i, row in enumerate(csv.reader(fh))]
    rows = [(n, r) for n, r in rows if r and any(cell.strip() for cell in r)]
    if header:
        if not rows:
            raise ParseError(f"{path}: no header row")
        _, names = rows.pop(0)
        names = [c.strip() for c in names]
        if isinstance(label_column, str):
            if label_column not in names:
                raise ParseError(f"{path}: no column named {label_column!r}")
            label_column = names.index(label_column)
    elif isinstance(label_column, str):
        if not label_column.lstrip("-").isdigit():
            raise ConfigurationError("a named label column needs header=True")
        label_column = int(label_column)
    if not rows:
        raise ParseError(f"{path}: no data rows")

    width = len(rows[0][1])
    if width < 2:
        raise ParseError("need a label column and at least one feature column", rows[0][0])
    if not -width <= label_column < width:
        raise ConfigurationError(f"label column {label_column} out of range for {width} columns")
    label_column %= width

    raw_labels, feats = [], []
    for line, row in rows:
        if len(row) != width:
            raise ParseError(f"expected {width} columns, found {len(row)}", line)
        values = [_parse_number(cell, line, j) for j, cell in enumerate(row)]
        label = values.pop(label_column)
        if not math.isfinite(label) or label != int(label):
            raise DataError(f"line {line}: label {row[label_column]!r} is not an integer")
        raw_labels.append(int(label))
        feats.append(values)

    classes = tuple(sorted(set(raw_labels)))
    index = {c: i for i, c in enumerate(classes)}
    labels = np.array([index[v] for v in raw_labels], dtype=np.int64)
    return Dataset(np.array(feats, dtype=np.float64), labels, len(classes), split_tag, classes)


def write_csv(dataset: Dataset, path: Union[str, Path], header: bool = False) -> None:
    """Write ``label,f0,f1,...`` rows; labels are written in their original values."""
    original = dataset.class_map or tuple(range(dataset.num_classes))
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if header:
            writer.writerow(["label"] + [f"f{j}" for j in range(dataset.num_features)])
        for y, row in zip(dataset.labels, dataset.features):
            writer.writerow([original[y]] + [repr(float(v)) for v in row])


def _read_maybe_gzip(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise FormatError(f"{path}: corrupt gzip stream ({exc})") from None
    return raw


def _idx_payload(raw: bytes, path: Path, magic: int, ndim: int) -> Tuple[Tuple[int, ...], bytes]:
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise FormatError(f"{path}: truncated header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(">" + "I" * ndim, raw[4:head])
    expected = int(np.prod(dims))
    body = raw[head:]
    if len(body) != expected:
        raise FormatError(f"{path}: expected {expected} payload bytes, found {len(body)}")
    return dims, body


def load_idx(images_path: Union[str, Path], labels_path: Union[str, Path], split_tag: str = "train") -> Dataset:
    """Load an MNIST-style IDX image/label pair (optionally gzipped).

    Pixels are flattened row-major and scaled to [0, 1].
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    (count, rows, cols), pixels = _idx_payload(_read_maybe_gzip(images_path), images_path, IDX_IMAGES_MAGIC, 3)
    (n_labels,), label_bytes = _idx_payload(_read_maybe_gzip(labels_path), labels_path, IDX_LABELS_MAGIC, 1)
    if count != n_labels:
        raise DataError(f"{count} images but {n_labels} labels")
    features = np.frombuffer(pixels, dtype=np.uint8).reshape(count, rows * cols).astype(np.float64) / 255.0
    labels = np.frombuffer(label_bytes, dtype=np.uint8).astype(np.int64)
    num_classes = int(labels.max()) + 1 if count else 1
    return Dataset(features, labels, num_classes, split_tag)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def synth_imbalanced_blobs(
    n_samples: int,
    class_fractions: Sequence[float],
    d: int,
    class_separation: float,
    noise: float,
    seed: int,
) -> Tuple[Dataset, Dataset]:
    """Isotropic Gaussian clusters with a chosen class imbalance.

    Class centers sit on a randomly rotated orthogonal frame so that every
    pair of centers is exactly ``class_separation`` apart (when ``C <= d``;
    otherwise centers are random directions at the same radius). Class ``k``
    gets ``round(fraction_k * n_samples)`` points, and each class is split
    80/20 into train/test.
    """
    fractions = np.asarray(class_fractions, dtype=np.float64)
    c = fractions.size
    if c < 2:
        raise ConfigurationError("need at least two classes")
    if np.any(fractions <= 0) or abs(fractions.sum() - 1.0) > 1e-9:
        raise ConfigurationError(f"class fractions must be positive and sum to 1, got {list(class_fractions)}")
    if n_samples < 10 * c:
        raise ConfigurationError(f"n_samples must be at least 10 per class ({10 * c})")
    if d < 1 or class_separation < 0 or noise < 0:
        raise ConfigurationError("d must be positive; separation and noise non-negative")

    rng = np.random.default_rng(seed)
    radius = class_separation / math.sqrt(2.0)
    if c <= d:
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        centers = radius * q[:, :c].T
    else:
        dirs = rng.standard_normal((c, d))
        centers = radius * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)

    counts = [_round_half_up(f * n_samples) for f in fractions]
    if min(counts) < 2:
        raise ConfigurationError("every class needs at least two samples to split")
    train_x, train_y, test_x, test_y = [], [], [], []
    for k, count in enumerate(counts):
        pts = centers[k] + noise * rng.standard_normal((count, d))
        n_train = min(max(_round_half_up(0.8 * count), 1), count - 1)
        train_x.append(pts[:n_train])
        test_x.append(pts[n_train:])
        train_y.append(np.full(n_train, k))
        test_y.append(np.full(count - n_train, k))

    def assemble(xs, ys, tag):
        x, y = np.concatenate(xs), np.concatenate(ys)
        order = rng.permutation(len(y))
        return Dataset(x[order], y[order], c, tag)

    return assemble(train_x, train_y, "train"), assemble(test_x, test_y, "test")


def standardize(train: Dataset, test: Dataset) -> Tuple[Dataset, Dataset]:
    """Zero-mean/unit-variance features using train statistics only.

    Constant columns are centered but not scaled.
    """
    mean = train.features.mean(axis=0)
    std = train.features.std(axis=0)
    std[std == 0] = 1.0

    def apply(ds):
        return Dataset((ds.features - mean) / std, ds.labels, ds.num_classes, ds.split_tag, ds.class_map)

    return apply(train), apply(test)


@dataclass(frozen=True)
class MiniBatch:
    id: int
    x: np.ndarray
    y: np.ndarray
    # positions of the members in the source dataset
    indices: np.ndarray = field(repr=False)

    def __len__(self):
        return self.y.shape[0]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in (self.indices, self.x, self.y):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class BatchPlan:
    train_batches: Tuple[MiniBatch, ...]
    test_batches: Tuple[MiniBatch, ...]
    batch_size: int
    shuffle_seed: int
    num_features: int
    num_classes: int

    @property
    def num_train_batches(self) -> int:
        return len(self.train_batches)

    @property
    def num_test_batches(self) -> int:
        return len(self.test_batches)

    def checksums(self) -> List[str]:
        return [b.checksum() for b in self.train_batches]


def _partition(ds: Dataset, order: np.ndarray, batch_size: int, dtype) -> Tuple[MiniBatch, ...]:
    batches = []
    for i, start in enumerate(range(0, len(order), batch_size)):
        idx = order[start : start + batch_size].copy()
        x = ds.features[idx].astype(dtype)
        y = ds.labels[idx].copy()
        for arr in (idx, x, y):
            arr.setflags(write=False)
        batches.append(MiniBatch(i, x, y, idx))
    return tuple(batches)


def make_batches(train: Dataset, test: Dataset, B: int, shuffle_seed: int, dtype=np.float32) -> BatchPlan:
    """Shuffle the training set once and cut both splits into fixed batches.

    Train gets ``ceil(len(train) / B)`` batches after a seeded permutation;
    test is cut in its stored order. The last batch of each split keeps its
    natural (smaller) size. Batch arrays are read-only.
    """
    if B < 1:
        raise ConfigurationError(f"batch size must be at least 1, got {B}")
    if B > len(train):
        raise ConfigurationError(f"batch size {B} exceeds the {len(train)} training samples")
    if train.num_features != test.num_features:
        raise DataError(f"train has {train.num_features} features, test has {test.num_features}")
    order = np.random.default_rng(shuffle_seed).permutation(len(train))
    return BatchPlan(
        train_batches=_partition(train, order, B, dtype),
        test_batches=_partition(test, np.arange(len(test)), B, dtype),
        batch_size=B,
        shuffle_seed=shuffle_seed,
        num_features=train.num_features,
        num_classes=max(train.num_classes, test.num_classes),
    )
