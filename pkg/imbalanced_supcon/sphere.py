"""
Unit-hypersphere geometry and seeded random streams.

All arithmetic is float64. Embedding sets are handled as row matrices; the
single-vector Embedding type exists for the scalar operations and for
iterating over an EmbeddingBatch.
"""
from dataclasses import dataclass
from typing import Iterator, Optional, Union

import numpy as np
from scipy.spatial.distance import cdist

from imbalanced_supcon.errors import DegenerateVector

MIN_NORM = 1e-12

# Stream ids keep samplers, initializers and augmenters on disjoint draws
STREAM_DATA = 1
STREAM_SPLIT = 2
STREAM_INIT = 3
STREAM_BATCH = 4
STREAM_AUGMENT = 5
STREAM_LOSS = 6
STREAM_PROBE = 7
STREAM_EVAL = 8


@dataclass(frozen=True)
class Embedding:
    """One view's pre-normalization vector w and its projection z = w/||w||"""
    w: np.ndarray
    z: np.ndarray

    @property
    def w_norm(self) -> float:
        return float(np.linalg.norm(self.w))


@dataclass(frozen=True)
class EmbeddingBatch:
    """
    Row-stacked embeddings for a set of views.

    Attributes:
        w: [n_views, d] pre-normalization vectors
        z: [n_views, d] unit vectors, z[i] = w[i] / ||w[i]||
    """
    w: np.ndarray
    z: np.ndarray

    def __len__(self) -> int:
        return self.z.shape[0]

    def __getitem__(self, index: int) -> Embedding:
        return Embedding(w=self.w[index], z=self.z[index])

    def __iter__(self) -> Iterator[Embedding]:
        for i in range(len(self)):
            yield self[i]

    @property
    def dim(self) -> int:
        return self.z.shape[1]

    @property
    def w_norms(self) -> np.ndarray:
        return np.linalg.norm(self.w, axis=1)

    @classmethod
    def from_unit(cls, z: np.ndarray) -> "EmbeddingBatch":
        """Wrap unit vectors whose pre-normalization vectors are unknown (w = z)"""
        z = np.asarray(z, dtype=np.float64)
        return normalize_rows(z)


def normalize(w: Union[np.ndarray, list]) -> Embedding:
    """
    Project a vector onto the unit sphere.

    Args:
        w: Pre-normalization vector

    Returns:
        Embedding holding w and z = w/||w||

    Raises:
        DegenerateVector: if ||w|| <= 1e-12
    """
    w = np.asarray(w, dtype=np.float64)
    norm = np.linalg.norm(w)
    if not norm > MIN_NORM:
        raise DegenerateVector(f"cannot normalize vector with norm {norm:.3e}")
    return Embedding(w=w, z=w / norm)


def normalize_rows(w: np.ndarray) -> EmbeddingBatch:
    """Row-wise normalize; raises DegenerateVector naming the first bad row."""
    w = np.asarray(w, dtype=np.float64)
    norms = np.linalg.norm(w, axis=1)
    bad = np.flatnonzero(~(norms > MIN_NORM))
    if bad.size:
        raise DegenerateVector(
            f"row {int(bad[0])} has norm {norms[bad[0]]:.3e}; cannot normalize"
        )
    return EmbeddingBatch(w=w, z=w / norms[:, None])


def pairwise_sq_dist(a: np.ndarray, b: Optional[np.ndarray] = None,
                     block_size: int = 2048) -> np.ndarray:
    """
    Squared Euclidean distances between rows of two unit-vector sets.

    Uses the subtraction kernel, so coincident vectors give exact zeros and
    the A=B case is exactly symmetric. Rows of A are processed in blocks.

    Args:
        a: [n, d] unit vectors
        b: [m, d] unit vectors, defaults to a
        block_size: Rows of A per cdist call

    Returns:
        [n, m] matrix with entries ||a_i - b_j||^2 = 2 - 2 a_i.b_j
    """
    a = np.asarray(a, dtype=np.float64)
    b = a if b is None else np.asarray(b, dtype=np.float64)
    if a.shape[0] <= block_size:
        return cdist(a, b, metric="sqeuclidean")
    out = np.empty((a.shape[0], b.shape[0]), dtype=np.float64)
    for start in range(0, a.shape[0], block_size):
        stop = start + block_size
        out[start:stop] = cdist(a[start:stop], b, metric="sqeuclidean")
    return out


def tangent_project(z: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Remove the component of g along unit vector z: g - (g.z) z"""
    z = np.asarray(z, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    return g - np.dot(g, z) * z


def tangent_project_rows(z: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Row-wise tangent_project for [n, d] matrices"""
    return g - np.sum(g * z, axis=1, keepdims=True) * z


def mean_cosine(z: np.ndarray) -> float:
    """Mean cosine similarity over distinct pairs of unit vectors."""
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    if n < 2:
        return 1.0
    total = z.sum(axis=0)
    return float((np.dot(total, total) - np.sum(z * z)) / (n * (n - 1)))


class RngStream:
    """
    Counter-based generator addressed by (seed, stream_id).

    Draws go through numpy's Philox bit generator, so identical
    (seed, stream_id) pairs replay bit-identical sequences across platforms.
    Each instance has a single owner; share across threads only with
    distinct stream ids.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        sequence = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        self.generator = np.random.Generator(np.random.Philox(sequence))

    def __getattr__(self, name):
        # Delegate draws (normal, choice, permutation, ...) to the Generator
        if name == "generator":
            raise AttributeError(name)
        return getattr(self.generator, name)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"
