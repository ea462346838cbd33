"""
Prototype placement on the sphere.

The majority prototype minimizes the mean Euclidean distance to a set of
unaugmented encodings; the minority prototype is its antipode.
"""
import logging
from typing import Optional

import numpy as np

from imbalanced_supcon.data import LabeledDataset
from imbalanced_supcon.encoder import EncoderParams, embed_samples
from imbalanced_supcon.errors import InvalidConfig, NoMajorityClass
from imbalanced_supcon.losses import PrototypePair
from imbalanced_supcon.sphere import RngStream, tangent_project

logger = logging.getLogger(__name__)

PROTOTYPE_SOURCES = ("majority", "all")
GRAD_TOLERANCE = 1e-6
MAX_HALVINGS = 60


def mean_distance(p: np.ndarray, points: np.ndarray) -> float:
    return float(np.mean(np.linalg.norm(points - p[None, :], axis=1)))


def _mean_distance_grad(p: np.ndarray, points: np.ndarray) -> np.ndarray:
    diffs = p[None, :] - points
    dists = np.linalg.norm(diffs, axis=1)
    # coincident points contribute a zero subgradient
    safe = dists > 0
    grad = np.zeros_like(p)
    if np.any(safe):
        grad = np.sum(diffs[safe] / dists[safe, None], axis=0)
    return grad / points.shape[0]


def minimize_mean_distance(points: np.ndarray, step_size: float, iters: int,
                           rng: RngStream) -> np.ndarray:
    """
    Projected gradient descent on the sphere for the mean distance to points.

    Each step moves along the negative tangent gradient and renormalizes; a
    step that does not decrease the objective is retried at half the size.
    Starts at the normalized mean of the points (a random direction when the
    mean vanishes) and stops once the tangent gradient norm falls below 1e-6.

    Args:
        points: [n, d] unit encodings
        step_size: Initial step
        iters: Maximum accepted steps
        rng: Stream for the fallback start

    Returns:
        Unit vector p
    """
    points = np.asarray(points, dtype=np.float64)
    mean = points.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm > 1e-12:
        p = mean / norm
    else:
        p = rng.standard_normal(points.shape[1])
        p /= np.linalg.norm(p)

    value = mean_distance(p, points)
    step = step_size
    for iteration in range(iters):
        grad = tangent_project(p, _mean_distance_grad(p, points))
        if np.linalg.norm(grad) < GRAD_TOLERANCE:
            logger.debug("prototype converged after %d steps", iteration)
            break
        for _ in range(MAX_HALVINGS):
            candidate = p - step * grad
            candidate /= np.linalg.norm(candidate)
            candidate_value = mean_distance(candidate, points)
            if candidate_value < value:
                break
            step *= 0.5
        else:
            logger.debug("prototype step underflow after %d steps", iteration)
            break
        p, value = candidate, candidate_value
    return p


def place_prototypes(params: EncoderParams, ds: LabeledDataset, step_size: float = 0.5,
                     iters: int = 500, rng: Optional[RngStream] = None,
                     source: str = "majority") -> PrototypePair:
    """
    Place the antipodal prototype pair from unaugmented training encodings.

    Args:
        params: Current encoder
        ds: Training samples
        step_size: Initial descent step
        iters: Maximum descent steps
        rng: Stream for the fallback start
        source: "majority" uses majority-class encodings, "all" every sample

    Returns:
        PrototypePair with p_min = -p_maj

    Raises:
        NoMajorityClass: if the majority class has no samples
    """
    if source not in PROTOTYPE_SOURCES:
        raise InvalidConfig(f"unknown prototype source '{source}'")
    if source == "majority":
        ids = ds.class_indices(ds.majority_label)
        if ids.size == 0:
            raise NoMajorityClass("no majority-class samples to place the prototype on")
    else:
        ids = np.arange(len(ds))
    encodings = embed_samples(params, ds, ids).z
    rng = rng if rng is not None else RngStream(0, 0)
    return PrototypePair(p_maj=minimize_mean_distance(encodings, step_size, iters, rng))


def place_prototypes_from_points(points: np.ndarray, step_size: float = 0.5, iters: int = 500,
                                 rng: Optional[RngStream] = None) -> PrototypePair:
    """Prototype pair from a raw point set; NoMajorityClass when it is empty"""
    points = np.asarray(points, dtype=np.float64)
    if points.size == 0:
        raise NoMajorityClass("no encodings to place the prototype on")
    rng = rng if rng is not None else RngStream(0, 0)
    return PrototypePair(p_maj=minimize_mean_distance(points, step_size, iters, rng))
