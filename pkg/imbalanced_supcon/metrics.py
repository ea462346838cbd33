"""
Representation-space metrics for a labeled, two-view embedding set.

    sad   mean distance between a sample's two views
    saa   fraction of views whose partner is strictly nearer than every other view
    cad   within-class mean pairwise distance, averaged over classes
    cac   mean same-label fraction among each view's r nearest other views
    gpu   log of the mean Gaussian potential exp(-||z_i - z_j||^2)

Pairwise sums run over unordered distinct pairs; self-pairs are excluded.
Distances come from one shared squared-distance matrix.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy.special import logsumexp

from imbalanced_supcon.errors import InvalidConfig
from imbalanced_supcon.sphere import RngStream, mean_cosine, pairwise_sq_dist

logger = logging.getLogger(__name__)

DEFAULT_R_FRACTION = 0.05
TIE_BREAKS = ("index", "random")


@dataclass
class MetricReport:
    sad: float
    saa: float
    cad: float
    cac: float
    gpu: float
    r_fraction: float
    r_count: int
    n_views: int
    class_counts: List[int] = field(default_factory=list)
    mean_cosine: float = 0.0

    def to_dict(self) -> Dict:
        return {
            "sad": self.sad,
            "saa": self.saa,
            "cad": self.cad,
            "cac": self.cac,
            "gpu": self.gpu,
            "r_fraction": self.r_fraction,
            "r_count": self.r_count,
            "n_views": self.n_views,
            "class_counts": list(self.class_counts),
            "mean_cosine": self.mean_cosine,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "MetricReport":
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})

    def label_mix_baseline(self) -> float:
        """sum of squared class fractions, the CAC of a fully mixed set"""
        total = float(sum(self.class_counts))
        return float(sum((c / total) ** 2 for c in self.class_counts)) if total else 0.0


def r_count_for(r_fraction: float, n_views: int) -> int:
    """max(1, floor(r * n + 0.5)); must leave at least one view outside the neighborhood"""
    if not 0.0 < r_fraction < 1.0:
        raise InvalidConfig(f"r fraction must be in (0, 1), got {r_fraction}")
    r_count = max(1, int(np.floor(r_fraction * n_views + 0.5)))
    if r_count >= n_views:
        raise InvalidConfig(f"neighborhood of {r_count} views needs more than {n_views} views")
    return r_count


def _sq_dists(z: np.ndarray, sq_dists: Optional[np.ndarray]) -> np.ndarray:
    return pairwise_sq_dist(z) if sq_dists is None else sq_dists


def sad(z: np.ndarray, partner: np.ndarray, sq_dists: Optional[np.ndarray] = None) -> float:
    """Mean partner distance, one term per sample"""
    partner = np.asarray(partner)
    d2 = _sq_dists(z, sq_dists)
    first = np.flatnonzero(np.arange(partner.size) < partner)
    return float(np.mean(np.sqrt(d2[first, partner[first]])))


def saa(z: np.ndarray, partner: np.ndarray, sq_dists: Optional[np.ndarray] = None) -> float:
    """Fraction of views (every view anchors) whose partner beats all other views strictly"""
    partner = np.asarray(partner)
    n = partner.size
    if n < 4:
        raise InvalidConfig("sample alignment accuracy needs at least 2 samples")
    d2 = _sq_dists(z, sq_dists).copy()
    rows = np.arange(n)
    to_partner = d2[rows, partner]
    d2[rows, rows] = np.inf
    d2[rows, partner] = np.inf
    return float(np.mean(to_partner < d2.min(axis=1)))


def cad(z: np.ndarray, labels: np.ndarray, sq_dists: Optional[np.ndarray] = None) -> float:
    """Per-class mean distance over distinct view pairs; classes with < 2 views are skipped"""
    labels = np.asarray(labels)
    d2 = _sq_dists(z, sq_dists)
    per_class = []
    for label in np.unique(labels):
        members = np.flatnonzero(labels == label)
        if members.size < 2:
            continue
        block = d2[np.ix_(members, members)]
        upper = np.triu_indices(members.size, k=1)
        per_class.append(float(np.mean(np.sqrt(block[upper]))))
    return float(np.mean(per_class)) if per_class else 0.0


def _neighborhood_purity(d2: np.ndarray, labels: np.ndarray, r_count: int,
                         column_labels: Optional[np.ndarray] = None,
                         block_size: int = 1024) -> np.ndarray:
    """Same-label fraction among the r nearest columns of each row; ties go to lower columns"""
    column_labels = labels if column_labels is None else column_labels
    n = d2.shape[0]
    purity = np.empty(n)
    for start in range(0, n, block_size):
        block = d2[start:start + block_size]
        kth = np.partition(block, r_count - 1, axis=1)[:, r_count - 1]
        below = block < kth[:, None]
        at = block == kth[:, None]
        room = r_count - below.sum(axis=1)
        taken_at = at & (np.cumsum(at, axis=1) <= room[:, None])
        chosen = below | taken_at
        same = column_labels[None, :] == labels[start:start + block_size, None]
        purity[start:start + block_size] = np.sum(chosen & same, axis=1) / r_count
    return purity


def cac(z: np.ndarray, labels: np.ndarray, r_fraction: float = DEFAULT_R_FRACTION,
        sq_dists: Optional[np.ndarray] = None, tie_break: str = "index",
        rng: Optional[RngStream] = None) -> float:
    """
    Class alignment consistency.

    Neighborhoods exclude the anchor itself and include its partner. Exact
    distance ties go to the lower view index, or to a seeded random order
    with tie_break="random".
    """
    labels = np.asarray(labels)
    n = labels.size
    r_count = r_count_for(r_fraction, n)
    d2 = _sq_dists(z, sq_dists).copy()
    np.fill_diagonal(d2, np.inf)
    if tie_break == "random":
        if rng is None:
            raise InvalidConfig("random tie-breaking needs a random stream")
        # permuted columns make "lower column" mean "earlier in a random order"
        order = rng.permutation(n)
        return float(np.mean(_neighborhood_purity(d2[:, order], labels, r_count, labels[order])))
    if tie_break != "index":
        raise InvalidConfig(f"unknown tie-break '{tie_break}', expected one of {TIE_BREAKS}")
    return float(np.mean(_neighborhood_purity(d2, labels, r_count)))


def gpu(z: np.ndarray, sq_dists: Optional[np.ndarray] = None) -> float:
    """log mean exp(-||z_i - z_j||^2) over distinct pairs, in [-4, 0] for unit vectors"""
    d2 = _sq_dists(z, sq_dists)
    n = d2.shape[0]
    if n < 2:
        raise InvalidConfig("uniformity needs at least 2 views")
    upper = np.triu_indices(n, k=1)
    return float(logsumexp(-d2[upper]) - np.log(upper[0].size))


def full_report(z: np.ndarray, labels: np.ndarray, partner: np.ndarray,
                r_fraction: float = DEFAULT_R_FRACTION, tie_break: str = "index",
                rng: Optional[RngStream] = None) -> MetricReport:
    """All five metrics over one shared distance matrix"""
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels)
    d2 = pairwise_sq_dist(z)
    n = labels.size
    report = MetricReport(
        sad=sad(z, partner, d2),
        saa=saa(z, partner, d2),
        cad=cad(z, labels, d2),
        cac=cac(z, labels, r_fraction, d2, tie_break, rng),
        gpu=gpu(z, d2),
        r_fraction=r_fraction,
        r_count=r_count_for(r_fraction, n),
        n_views=n,
        class_counts=[int(np.sum(labels == 0)), int(np.sum(labels == 1))],
        mean_cosine=mean_cosine(z),
    )
    logger.debug("metrics over %d views: %s", n, report.to_dict())
    return report
