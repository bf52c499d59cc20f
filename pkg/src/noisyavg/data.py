"""Dataset ingestion (CSV, IDX), normalization, and synthetic generators."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (n, d)
    targets: np.ndarray   # (n, c)
    encoding: str         # "pm_one" (c=1, targets in {-1,+1}) or "one_hot"

    def __post_init__(self):
        if self.features.shape[0] != self.targets.shape[0]:
            raise ValueError("feature and target row counts disagree")
        if self.encoding not in ("pm_one", "one_hot"):
            raise ValueError(f"unknown encoding {self.encoding!r}")
        if self.encoding == "pm_one":
            if self.targets.shape[1] != 1:
                raise ValueError("pm_one targets must be a single column")
            if not np.all(np.isin(self.targets, (-1.0, 1.0))):
                raise ValueError("pm_one targets must be -1 or +1")

    def __len__(self) -> int:
        return self.features.shape[0]

    def take(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.targets[idx], self.encoding)


def load_csv(path, label_column: int, label_mode: str = "pm_one",
             skip_header: bool = False) -> Dataset:
    """Parse a comma-separated numeric file into a Dataset.

    The label column is removed from the features.  pm_one maps labels
    {0, 1} to {-1, +1}; one_hot expects integer class labels 0..k-1.
    """
    if label_mode not in ("pm_one", "one_hot"):
        raise ValueError(f"unknown label_mode {label_mode!r}")
    rows = []
    labels = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if skip_header and lineno == 1:
                continue
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            try:
                values = [float(p) for p in parts]
            except ValueError:
                raise ValueError(f"{path}: malformed row at line {lineno}")
            if not 0 <= label_column < len(values):
                raise ValueError(f"{path}: label column {label_column} out of range "
                                 f"at line {lineno}")
            labels.append(values.pop(label_column))
            rows.append(values)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    features = np.asarray(rows, dtype=np.float64)
    raw = np.asarray(labels, dtype=np.float64)
    if label_mode == "pm_one":
        if not np.all(np.isin(raw, (0.0, 1.0))):
            raise ValueError(f"{path}: pm_one labels must be 0 or 1")
        targets = np.where(raw == 0.0, -1.0, 1.0).reshape(-1, 1)
        return Dataset(features, targets, "pm_one")
    if not np.all(raw == np.floor(raw)) or raw.min() < 0:
        raise ValueError(f"{path}: one_hot labels must be non-negative integers")
    classes = int(raw.max()) + 1
    targets = np.zeros((len(raw), classes))
    targets[np.arange(len(raw)), raw.astype(int)] = 1.0
    return Dataset(features, targets, "one_hot")


def _read_be32(f, path):
    data = f.read(4)
    if len(data) != 4:
        raise ValueError(f"{path}: truncated IDX header")
    return struct.unpack(">i", data)[0]


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label pair (big-endian, magics 2051/2049).

    Images are flattened to rows and scaled to [0, 1] by dividing by 255;
    labels become one-hot vectors of width 10.
    """
    with open(images_path, "rb") as f:
        magic = _read_be32(f, images_path)
        if magic != IDX_IMAGE_MAGIC:
            raise ValueError(f"{images_path}: bad image magic {magic}")
        count = _read_be32(f, images_path)
        n_rows = _read_be32(f, images_path)
        n_cols = _read_be32(f, images_path)
        if count < 0 or n_rows < 1 or n_cols < 1:
            raise ValueError(f"{images_path}: invalid IDX dimensions")
        raw = f.read(count * n_rows * n_cols)
        if len(raw) != count * n_rows * n_cols:
            raise ValueError(f"{images_path}: truncated pixel data")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, n_rows * n_cols)

    with open(labels_path, "rb") as f:
        magic = _read_be32(f, labels_path)
        if magic != IDX_LABEL_MAGIC:
            raise ValueError(f"{labels_path}: bad label magic {magic}")
        label_count = _read_be32(f, labels_path)
        raw = f.read(label_count)
        if len(raw) != label_count:
            raise ValueError(f"{labels_path}: truncated label data")
    labels = np.frombuffer(raw, dtype=np.uint8)

    if label_count != count:
        raise ValueError(f"image/label count mismatch: {count} vs {label_count}")
    targets = np.zeros((count, 10))
    if np.any(labels > 9):
        raise ValueError(f"{labels_path}: labels must be 0..9")
    targets[np.arange(count), labels] = 1.0
    return Dataset(images.astype(np.float64) / 255.0, targets, "one_hot")


def normalize(dataset: Dataset, stats=None):
    """Per-feature standardization; returns (dataset, (mean, scale)).

    With stats supplied (e.g. training statistics for a test set) they are
    applied as-is.  Features with std below 1e-12 are centered only.
    """
    if stats is None:
        if len(dataset) < 2:
            raise ValueError("need at least 2 rows to compute statistics")
        mean = dataset.features.mean(axis=0)
        std = dataset.features.std(axis=0)
        scale = np.where(std < 1e-12, 1.0, std)
        stats = (mean, scale)
    mean, scale = stats
    features = (dataset.features - mean) / scale
    return Dataset(features, dataset.targets, dataset.encoding), stats


def synth_linear(n: int, d: int, true_weights, label_noise_rate: float,
                 seed_rng: np.random.Generator) -> Dataset:
    """Linearly separable +/-1 task: x ~ N(0, I), y = sign(<w*, x>).

    Labels are flipped independently with probability label_noise_rate.
    A tie <w*, x> = 0 counts as +1, matching the accuracy convention.
    """
    true_weights = np.asarray(true_weights, dtype=np.float64)
    if true_weights.shape != (d,):
        raise ValueError("true_weights must have length d")
    x = seed_rng.normal(0.0, 1.0, (n, d))
    y = np.where(x @ true_weights >= 0.0, 1.0, -1.0)
    if label_noise_rate > 0:
        flips = seed_rng.random(n) < label_noise_rate
        y = np.where(flips, -y, y)
    return Dataset(x, y.reshape(-1, 1), "pm_one")


def synth_logistic(n: int, d: int, true_weights, sharpness: float,
                   rng: np.random.Generator) -> Dataset:
    """Linear task with boundary-concentrated label ambiguity.

    x ~ N(0, I); P(y = +1 | x) = sigmoid(sharpness * <w*, x>).  Unlike
    independent label flips, the ambiguity sits near the decision boundary,
    so accuracy responds quadratically (not linearly) to small model
    perturbations around the optimum; that is the regime of real detector
    data.  sharpness 2.0 gives a Bayes accuracy near 0.77.
    """
    true_weights = np.asarray(true_weights, dtype=np.float64)
    if true_weights.shape != (d,):
        raise ValueError("true_weights must have length d")
    if sharpness <= 0:
        raise ValueError("sharpness must be positive")
    x = rng.normal(0.0, 1.0, (n, d))
    p_plus = 1.0 / (1.0 + np.exp(-sharpness * (x @ true_weights)))
    y = np.where(rng.random(n) < p_plus, 1.0, -1.0)
    return Dataset(x, y.reshape(-1, 1), "pm_one")


def synth_blobs(n: int, d: int, classes: int, rng: np.random.Generator,
                spread: float = 0.15, density: float = 0.25) -> Dataset:
    """Image-like multi-class task: noisy class prototypes with [0, 1] pixels.

    Each class gets a sparse prototype in [0, 1]^d; examples are the
    prototype plus Gaussian pixel noise, clipped back to [0, 1].  Stands in
    for digit data when the real files are absent.
    """
    prototypes = rng.uniform(0.4, 1.0, (classes, d)) * (rng.random((classes, d)) < density)
    labels = rng.integers(0, classes, n)
    x = np.clip(prototypes[labels] + rng.normal(0.0, spread, (n, d)), 0.0, 1.0)
    targets = np.zeros((n, classes))
    targets[np.arange(n), labels] = 1.0
    return Dataset(x, targets, "one_hot")


def to_one_hot(dataset: Dataset) -> Dataset:
    """Re-encode pm_one targets as 2-class one-hot (-1 -> class 0)."""
    if dataset.encoding != "pm_one":
        raise ValueError("to_one_hot expects pm_one targets")
    targets = np.zeros((len(dataset), 2))
    targets[:, 0] = dataset.targets[:, 0] < 0
    targets[:, 1] = dataset.targets[:, 0] > 0
    return Dataset(dataset.features, targets, "one_hot")


def shuffle(dataset: Dataset, rng: np.random.Generator) -> Dataset:
    return dataset.take(rng.permutation(len(dataset)))
