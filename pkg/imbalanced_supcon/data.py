"""
Synthetic binary imbalanced datasets, augmented views and batch samplers.
"""
import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from imbalanced_supcon.errors import InvalidConfig
from imbalanced_supcon.sphere import RngStream

logger = logging.getLogger(__name__)

SAMPLER_MODES = ("uniform", "oversample", "undersample", "guarantee-minority")


def round_half_up(x: float) -> int:
    """floor(x + 0.5); used for every count derived from a fraction"""
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class LabeledDataset:
    """
    Immutable binary labeled dataset.

    Attributes:
        inputs: [N, m] raw feature vectors
        labels: [N] class ids in {0, 1}
        minority_label: id of the minority class
        imbalance: minority count / N
    """
    inputs: np.ndarray
    labels: np.ndarray
    minority_label: int = 1
    imbalance: float = 0.5

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise InvalidConfig("inputs and labels disagree on sample count")
        if len(self) < 2:
            raise InvalidConfig("a dataset needs at least 2 samples")
        if not np.isin(self.labels, (0, 1)).all():
            raise InvalidConfig("labels must be 0 or 1")
        if self.minority_label not in (0, 1):
            raise InvalidConfig("minority_label must be 0 or 1")
        counts = self.class_counts()
        if min(counts) == 0:
            raise InvalidConfig(f"both classes must be nonempty, got counts {counts}")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def majority_label(self) -> int:
        return 1 - self.minority_label

    def class_counts(self) -> Tuple[int, int]:
        ones = int(np.sum(self.labels == 1))
        return (len(self) - ones, ones)

    def class_indices(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)

    def subset(self, indices: np.ndarray) -> "LabeledDataset":
        """New dataset over the given rows; imbalance is recomputed from the rows"""
        indices = np.asarray(indices, dtype=np.int64)
        labels = self.labels[indices]
        minority = int(np.sum(labels == self.minority_label))
        return LabeledDataset(
            inputs=self.inputs[indices],
            labels=labels,
            minority_label=self.minority_label,
            imbalance=minority / len(indices) if len(indices) else 0.0,
        )


@dataclass(frozen=True)
class ViewBatch:
    """
    Multi-viewed batch: every drawn sample contributes two consecutive views.

    View 2k and 2k+1 come from the k-th draw, so partner[i] == i ^ 1.

    Attributes:
        sample_ids: [2B] dataset index per view
        labels: [2B] class per view
        view_index: [2B] 0 or 1, which of the sample's two views
        partner: [2B] index of each view's positive partner
        views: [2B, m] augmented inputs, None for layout-only batches
    """
    sample_ids: np.ndarray
    labels: np.ndarray
    view_index: np.ndarray
    partner: np.ndarray
    views: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def n_samples(self) -> int:
        return len(self) // 2

    @property
    def table_rows(self) -> np.ndarray:
        """Free-table row of each view"""
        return 2 * self.sample_ids + self.view_index

    @classmethod
    def layout(cls, sample_labels, sample_ids=None,
               views: Optional[np.ndarray] = None) -> "ViewBatch":
        """
        Build the interleaved two-view layout for a list of drawn samples.

        Args:
            sample_labels: Label of each drawn sample
            sample_ids: Dataset index of each drawn sample (default 0..B-1)
            views: Optional [2B, m] view inputs

        Returns:
            ViewBatch with 2B views
        """
        sample_labels = np.asarray(sample_labels, dtype=np.int64)
        b = sample_labels.shape[0]
        if sample_ids is None:
            sample_ids = np.arange(b, dtype=np.int64)
        sample_ids = np.asarray(sample_ids, dtype=np.int64)
        n_views = 2 * b
        return cls(
            sample_ids=np.repeat(sample_ids, 2),
            labels=np.repeat(sample_labels, 2),
            view_index=np.tile(np.array([0, 1], dtype=np.int64), b),
            partner=np.arange(n_views, dtype=np.int64) ^ 1,
            views=views,
        )

    def class_view_counts(self) -> Tuple[int, int]:
        ones = int(np.sum(self.labels == 1))
        return (len(self) - ones, ones)


def generate_blobs(n: int, imbalance: float, input_dim: int, separation: float,
                   spread: float, rng: RngStream, minority_label: int = 1) -> LabeledDataset:
    """
    Two isotropic Gaussian clusters with an imposed class imbalance.

    A balanced pool is drawn first, then the minority class is subsampled down
    to floor(imbalance * n + 0.5) samples. Class means sit at +/- separation/2
    along a random unit direction.

    Args:
        n: Total sample count
        imbalance: Minority fraction in (0, 0.5]
        input_dim: Feature dimension m
        separation: Distance between the two class means
        spread: Per-coordinate standard deviation
        rng: Random stream for all draws
        minority_label: Class id of the minority class

    Returns:
        LabeledDataset with rows in random order
    """
    if n < 4:
        raise InvalidConfig(f"n must be at least 4, got {n}")
    if not 0.0 < imbalance <= 0.5:
        raise InvalidConfig(f"imbalance must be in (0, 0.5], got {imbalance}")
    if separation < 0:
        raise InvalidConfig(f"separation must be non-negative, got {separation}")
    if spread < 0:
        raise InvalidConfig(f"spread must be non-negative, got {spread}")
    if input_dim < 1:
        raise InvalidConfig(f"input_dim must be positive, got {input_dim}")

    n_min = round_half_up(imbalance * n)
    n_maj = n - n_min
    if n_min < 1:
        raise InvalidConfig(f"imbalance {imbalance} leaves no minority samples at n={n}")

    direction = rng.standard_normal(input_dim)
    direction /= np.linalg.norm(direction)
    offset = 0.5 * separation * direction

    majority = -offset + spread * rng.standard_normal((n_maj, input_dim))
    minority_pool = offset + spread * rng.standard_normal((n_maj, input_dim))
    keep = rng.choice(n_maj, size=n_min, replace=False)
    minority = minority_pool[np.sort(keep)]

    inputs = np.vstack([majority, minority])
    labels = np.concatenate([
        np.full(n_maj, 1 - minority_label, dtype=np.int64),
        np.full(n_min, minority_label, dtype=np.int64),
    ])
    order = rng.permutation(n)
    logger.debug("generated %d samples (%d minority) in R^%d", n, n_min, input_dim)
    return LabeledDataset(inputs=inputs[order], labels=labels[order],
                          minority_label=minority_label, imbalance=n_min / n)


def augment(x: np.ndarray, sigma: float, rng: RngStream) -> np.ndarray:
    """Additive Gaussian noise view of x (any shape); sigma=0 returns a copy"""
    if sigma < 0:
        raise InvalidConfig(f"augmentation sigma must be non-negative, got {sigma}")
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0:
        return x.copy()
    return x + sigma * rng.standard_normal(x.shape)


def _draw_sample_ids(ds: LabeledDataset, batch_size: int, mode: str, rng: RngStream,
                     max_attempts: int) -> np.ndarray:
    n = len(ds)
    minority = ds.class_indices(ds.minority_label)
    majority = ds.class_indices(ds.majority_label)

    if mode == "uniform":
        if batch_size > n:
            raise InvalidConfig(f"uniform batches need B <= N, got B={batch_size}, N={n}")
        return rng.choice(n, size=batch_size, replace=False)

    if mode == "oversample":
        n_min = batch_size // 2
        n_maj = batch_size - n_min
        ids = np.concatenate([
            rng.choice(minority, size=n_min, replace=True),
            rng.choice(majority, size=n_maj, replace=n_maj > majority.size),
        ])
        return ids[rng.permutation(ids.size)]

    if mode == "undersample":
        per_class = min(batch_size // 2, minority.size)
        ids = np.concatenate([
            rng.choice(minority, size=per_class, replace=False),
            rng.choice(majority, size=per_class, replace=False),
        ])
        return ids[rng.permutation(ids.size)]

    if mode == "guarantee-minority":
        if batch_size > n:
            raise InvalidConfig(f"uniform batches need B <= N, got B={batch_size}, N={n}")
        for _ in range(max_attempts):
            ids = rng.choice(n, size=batch_size, replace=False)
            if np.any(ds.labels[ids] == ds.minority_label):
                return ids
        raise InvalidConfig(
            f"no minority sample after {max_attempts} redraws at B={batch_size}"
        )

    raise InvalidConfig(f"unknown sampler mode '{mode}', expected one of {SAMPLER_MODES}")


def sample_batch(ds: LabeledDataset, batch_size: int, mode: str, rng: RngStream,
                 aug_sigma: float = 0.0, augment_rng: Optional[RngStream] = None,
                 max_attempts: int = 10000) -> ViewBatch:
    """
    Draw B samples and expand each into two augmented views.

    Args:
        ds: Dataset to draw from
        batch_size: Number of samples B
        mode: uniform | oversample | undersample | guarantee-minority
        rng: Stream for the sample draw
        aug_sigma: Augmentation noise level
        augment_rng: Stream for augmentation noise (defaults to rng)
        max_attempts: Redraw cap for guarantee-minority

    Returns:
        ViewBatch with 2B views (undersample: 2 * min(B//2, n_min) * 2 views)
    """
    if batch_size < 2:
        raise InvalidConfig(f"batch size must be at least 2, got {batch_size}")
    ids = _draw_sample_ids(ds, batch_size, mode, rng, max_attempts)
    views = augment(np.repeat(ds.inputs[ids], 2, axis=0), aug_sigma,
                    augment_rng if augment_rng is not None else rng)
    return ViewBatch.layout(ds.labels[ids], sample_ids=ids, views=views)


def stratified_split_indices(labels: np.ndarray, train_fraction: float,
                             rng: RngStream) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-class split keeping at least one sample of each class on both sides.

    Returns:
        (train_indices, test_indices), each sorted ascending
    """
    if not 0.0 < train_fraction < 1.0:
        raise InvalidConfig(f"split fraction must be in (0, 1), got {train_fraction}")
    train, test = [], []
    for label in (0, 1):
        members = np.flatnonzero(labels == label)
        if members.size < 2:
            raise InvalidConfig(f"class {label} has {members.size} samples; cannot split")
        n_train = min(max(round_half_up(train_fraction * members.size), 1), members.size - 1)
        shuffled = members[rng.permutation(members.size)]
        train.append(shuffled[:n_train])
        test.append(shuffled[n_train:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def train_test_split(ds: LabeledDataset, train_fraction: float,
                     rng: RngStream) -> Tuple[LabeledDataset, LabeledDataset]:
    train_idx, test_idx = stratified_split_indices(ds.labels, train_fraction, rng)
    return ds.subset(train_idx), ds.subset(test_idx)


def save_dataset_csv(ds: LabeledDataset, file_path: Union[str, Path]) -> Path:
    """Write `id,label,x0..x{m-1}` rows, UTF-8 with LF endings"""
    file_path = Path(file_path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    header = ["id", "label"] + [f"x{j}" for j in range(ds.input_dim)]
    with open(file_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for i in range(len(ds)):
            writer.writerow([i, int(ds.labels[i])] + [repr(float(v)) for v in ds.inputs[i]])
    return file_path


def load_dataset_csv(file_path: Union[str, Path], minority_label: Optional[int] = None) -> LabeledDataset:
    """
    Read a dataset written by save_dataset_csv.

    The minority label defaults to the rarer class in the file.
    """
    with open(file_path, "r", newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[:2] != ["id", "label"]:
            raise InvalidConfig(f"{file_path}: expected header starting with id,label")
        rows = [row for row in reader if row]
    rows.sort(key=lambda row: int(row[0]))
    labels = np.array([int(row[1]) for row in rows], dtype=np.int64)
    inputs = np.array([[float(v) for v in row[2:]] for row in rows], dtype=np.float64)
    if minority_label is None:
        minority_label = 1 if np.sum(labels == 1) <= np.sum(labels == 0) else 0
    return LabeledDataset(inputs=inputs, labels=labels, minority_label=minority_label,
                          imbalance=float(np.mean(labels == minority_label)))
