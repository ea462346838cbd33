"""
Contrastive losses on the unit sphere with analytic gradients w.r.t. w.

Every loss in this module is one instance of a shared per-anchor form. For
anchor i with positive weights C[i, j], log-sum-exp mass m[i] and an optional
prototype term of weight pi[i] toward a fixed unit vector q[i]:

    l_i = (m_i + pi_i) * LSE_i - sum_j C_ij S_ij - pi_i * z_i.q_i / tau

where S = Z Z^T / tau and LSE_i = log sum_{j != i} exp(S_ij). The denominator
always runs over every other view of the batch. Losses differ only in how
they fill C, m and pi.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from imbalanced_supcon.data import ViewBatch
from imbalanced_supcon.errors import EmptyPositives, InvalidBatch, InvalidConfig
from imbalanced_supcon.sphere import EmbeddingBatch, RngStream, tangent_project_rows

logger = logging.getLogger(__name__)

LOSS_KINDS = ("nt-xent", "supcon", "sup-minority", "sup-prototypes",
              "partial-supervision", "kcl", "tsc-lite")
ANCHOR_MODES = ("all-views", "per-sample")


@dataclass(frozen=True)
class PrototypePair:
    """Antipodal class prototypes; p_min is exactly -p_maj"""
    p_maj: np.ndarray

    @property
    def p_min(self) -> np.ndarray:
        return -self.p_maj

    def for_label(self, label: int, minority_label: int) -> np.ndarray:
        return self.p_min if label == minority_label else self.p_maj

    def to_dict(self):
        return {"p_maj": self.p_maj.tolist(), "p_min": self.p_min.tolist()}


@dataclass
class LossOutput:
    """
    Loss value with gradients.

    Attributes:
        value: Total loss over all anchors
        grad_w: [V, d] dL/dw for every view
        anchor_values: [V] each anchor's own term (0 for non-anchors)
        anchor_grad_w: [V, d] gradient of anchor i's own term w.r.t. w_i
        is_anchor: [V] views that anchor a term
        supervised: [V] anchors whose positive set is label-based
        n_positives: [V] |P(i)| per anchor (0 for non-anchors)
        n_all: |A(i)|, the number of other views in the batch
        empty_classes: classes whose anchor set is empty in this batch
        prototype_active: [V] anchors carrying a prototype term
    """
    value: float
    grad_w: np.ndarray
    anchor_values: np.ndarray
    anchor_grad_w: np.ndarray
    is_anchor: np.ndarray
    supervised: np.ndarray
    n_positives: np.ndarray
    n_all: int
    empty_classes: Tuple[int, ...] = ()
    prototype_active: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def validate_batch(batch: ViewBatch, embeddings: EmbeddingBatch):
    """Raise InvalidBatch unless views pair up into a symmetric perfect matching"""
    n_views = len(batch)
    if len(embeddings) != n_views:
        raise InvalidBatch(f"{len(embeddings)} embeddings for {n_views} views")
    if n_views < 4 or n_views % 2:
        raise InvalidBatch(f"need an even number of at least 4 views, got {n_views}")
    partner = batch.partner
    idx = np.arange(n_views)
    if partner.shape != (n_views,) or partner.min() < 0 or partner.max() >= n_views:
        raise InvalidBatch("partner map out of range")
    if np.any(partner == idx) or np.any(partner[partner] != idx):
        raise InvalidBatch("partner map is not a symmetric perfect matching")
    if np.any(batch.labels[partner] != batch.labels):
        raise InvalidBatch("partner views carry different labels")


def anchor_mask(batch: ViewBatch, anchor_mode: str) -> np.ndarray:
    if anchor_mode == "all-views":
        return np.ones(len(batch), dtype=bool)
    if anchor_mode == "per-sample":
        return batch.view_index == 0
    raise InvalidConfig(f"unknown anchor mode '{anchor_mode}', expected one of {ANCHOR_MODES}")


def _check_tau(tau: float):
    if not tau > 0:
        raise InvalidConfig(f"temperature must be positive, got {tau}")


def _partner_weights(batch: ViewBatch, rows: np.ndarray) -> np.ndarray:
    weights = np.zeros((len(batch), len(batch)))
    weights[rows, batch.partner[rows]] = 1.0
    return weights


def _same_class_weights(batch: ViewBatch, rows: np.ndarray) -> np.ndarray:
    same = (batch.labels[:, None] == batch.labels[None, :]).astype(np.float64)
    np.fill_diagonal(same, 0.0)
    weights = np.zeros_like(same)
    counts = same[rows].sum(axis=1)
    weights[rows] = same[rows] / counts[:, None]
    return weights


def _empty_classes(batch: ViewBatch, anchors: np.ndarray) -> Tuple[int, ...]:
    return tuple(c for c in (0, 1) if not np.any(anchors & (batch.labels == c)))


def contrastive_core(embeddings: EmbeddingBatch, positive_weights: np.ndarray,
                     mass: np.ndarray, tau: float,
                     proto_weights: Optional[np.ndarray] = None,
                     proto_vectors: Optional[np.ndarray] = None):
    """
    Evaluate the shared per-anchor form and its gradients.

    Args:
        embeddings: Views' w and z
        positive_weights: [V, V] C, zero diagonal
        mass: [V] log-sum-exp multiplier m
        tau: Temperature
        proto_weights: [V] prototype multiplier pi (default zeros)
        proto_vectors: [V, d] prototype per anchor q

    Returns:
        (value, grad_w, anchor_values, anchor_grad_w)
    """
    z = embeddings.z
    n_views = z.shape[0]
    if proto_weights is None:
        proto_weights = np.zeros(n_views)
        proto_vectors = np.zeros_like(z)

    sims = (z @ z.T) / tau
    masked = sims.copy()
    np.fill_diagonal(masked, -np.inf)
    lse = logsumexp(masked, axis=1)
    probs = np.exp(masked - lse[:, None])

    off_diag = sims.copy()
    np.fill_diagonal(off_diag, 0.0)
    proto_sims = np.sum(z * proto_vectors, axis=1) / tau
    total_mass = mass + proto_weights
    anchor_values = (total_mass * lse
                     - np.sum(positive_weights * off_diag, axis=1)
                     - proto_weights * proto_sims)

    coupling = total_mass[:, None] * probs - positive_weights
    own_grad_z = (coupling @ z - proto_weights[:, None] * proto_vectors) / tau
    grad_z = own_grad_z + (coupling.T @ z) / tau

    inv_norms = 1.0 / embeddings.w_norms[:, None]
    grad_w = tangent_project_rows(z, grad_z) * inv_norms
    anchor_grad_w = tangent_project_rows(z, own_grad_z) * inv_norms
    return float(np.sum(anchor_values)), grad_w, anchor_values, anchor_grad_w


def _assemble(embeddings: EmbeddingBatch, batch: ViewBatch, tau: float,
              anchors: np.ndarray, supervised: np.ndarray, weights: np.ndarray,
              proto_weights: Optional[np.ndarray] = None,
              proto_vectors: Optional[np.ndarray] = None) -> LossOutput:
    n_positives = np.count_nonzero(weights, axis=1)
    mass = anchors.astype(np.float64)
    value, grad_w, anchor_values, anchor_grad_w = contrastive_core(
        embeddings, weights, mass, tau, proto_weights, proto_vectors)
    if proto_weights is None:
        prototype_active = np.zeros(len(batch), dtype=bool)
    else:
        prototype_active = proto_weights > 0
    empty_classes = _empty_classes(batch, anchors)
    if empty_classes:
        logger.debug("no anchors for class(es) %s in this batch", empty_classes)
    return LossOutput(
        value=value,
        grad_w=grad_w,
        anchor_values=anchor_values,
        anchor_grad_w=anchor_grad_w,
        is_anchor=anchors,
        supervised=supervised,
        n_positives=n_positives,
        n_all=len(batch) - 1,
        empty_classes=empty_classes,
        prototype_active=prototype_active,
    )


def _mixed_weights(batch: ViewBatch, anchors: np.ndarray, supervised: np.ndarray) -> np.ndarray:
    """Same-class positives for supervised anchors, the partner view for the rest"""
    return (_same_class_weights(batch, np.flatnonzero(anchors & supervised))
            + _partner_weights(batch, np.flatnonzero(anchors & ~supervised)))


def nt_xent(embeddings: EmbeddingBatch, batch: ViewBatch, tau: float,
            anchor_mode: str = "all-views") -> LossOutput:
    """
    Self-supervised loss: each anchor's only positive is its partner view.

    The denominator includes the partner.
    """
    _check_tau(tau)
    validate_batch(batch, embeddings)
    anchors = anchor_mask(batch, anchor_mode)
    supervised = np.zeros(len(batch), dtype=bool)
    weights = _partner_weights(batch, np.flatnonzero(anchors))
    return _assemble(embeddings, batch, tau, anchors, supervised, weights)


def supcon(embeddings: EmbeddingBatch, batch: ViewBatch, tau: float,
           anchor_mode: str = "all-views") -> LossOutput:
    """
    Supervised contrastive loss summed over both classes.

    Each anchor averages over every other same-class view (its partner
    included); a class without anchors in the batch contributes nothing and
    is listed in empty_classes.
    """
    _check_tau(tau)
    validate_batch(batch, embeddings)
    anchors = anchor_mask(batch, anchor_mode)
    weights = _same_class_weights(batch, np.flatnonzero(anchors))
    return _assemble(embeddings, batch, tau, anchors, anchors.copy(), weights)


def sup_minority(embeddings: EmbeddingBatch, batch: ViewBatch, minority_label: int,
                 tau: float, anchor_mode: str = "all-views") -> LossOutput:
    """Supervised term on minority anchors, self-supervised term on majority anchors"""
    _check_tau(tau)
    validate_batch(batch, embeddings)
    anchors = anchor_mask(batch, anchor_mode)
    supervised = anchors & (batch.labels == minority_label)
    weights = _mixed_weights(batch, anchors, supervised)
    return _assemble(embeddings, batch, tau, anchors, supervised, weights)


def sup_prototypes(embeddings: EmbeddingBatch, batch: ViewBatch, prototypes: PrototypePair,
                   minority_label: int, tau: float, gate: float = 0.5,
                   anchor_mode: str = "all-views") -> LossOutput:
    """
    Self-supervised term for every anchor plus a gated prototype attraction.

    The prototype term for anchor i is added iff z_i.p_i <= gate, with p_i
    the anchor's class prototype. Prototypes are constants.
    """
    _check_tau(tau)
    validate_batch(batch, embeddings)
    anchors = anchor_mask(batch, anchor_mode)
    supervised = np.zeros(len(batch), dtype=bool)
    weights = _partner_weights(batch, np.flatnonzero(anchors))

    proto_vectors = np.where((batch.labels == minority_label)[:, None],
                             prototypes.p_min[None, :], prototypes.p_maj[None, :])
    similarity = np.sum(embeddings.z * proto_vectors, axis=1)
    proto_weights = (anchors & (similarity <= gate)).astype(np.float64)
    return _assemble(embeddings, batch, tau, anchors, supervised, weights,
                     proto_weights, proto_vectors)


def partial_supervision(embeddings: EmbeddingBatch, batch: ViewBatch, minority_label: int,
                        theta_min: float, theta_maj: float, tau: float, rng: RngStream,
                        anchor_mode: str = "all-views") -> LossOutput:
    """
    Supervise a fraction of each class's anchors and leave the rest self-supervised.

    floor(theta * n_c + 0.5) anchors of class c are drawn with rng.
    """
    _check_tau(tau)
    for name, theta in (("theta_min", theta_min), ("theta_maj", theta_maj)):
        if not 0.0 <= theta <= 1.0:
            raise InvalidConfig(f"{name} must be in [0, 1], got {theta}")
    validate_batch(batch, embeddings)
    anchors = anchor_mask(batch, anchor_mode)

    supervised = np.zeros(len(batch), dtype=bool)
    for label in (0, 1):
        theta = theta_min if label == minority_label else theta_maj
        members = np.flatnonzero(anchors & (batch.labels == label))
        n_chosen = int(np.floor(theta * members.size + 0.5))
        if n_chosen:
            supervised[members[rng.permutation(members.size)[:n_chosen]]] = True

    weights = _mixed_weights(batch, anchors, supervised)
    return _assemble(embeddings, batch, tau, anchors, supervised, weights)


def _subsampled_weights(batch: ViewBatch, anchors: np.ndarray, k: int, rng: RngStream,
                        force_partner: bool) -> np.ndarray:
    weights = np.zeros((len(batch), len(batch)))
    labels = batch.labels
    for i in np.flatnonzero(anchors):
        pool = np.flatnonzero(labels == labels[i])
        pool = pool[pool != i]
        if pool.size > k:
            if force_partner:
                rest = pool[pool != batch.partner[i]]
                picked = np.concatenate([[batch.partner[i]],
                                         rng.choice(rest, size=k - 1, replace=False)])
            else:
                picked = rng.choice(pool, size=k, replace=False)
            pool = picked.astype(np.int64)
        weights[i, pool] = 1.0 / pool.size
    return weights


def kcl(embeddings: EmbeddingBatch, batch: ViewBatch, k: int, tau: float, rng: RngStream,
        anchor_mode: str = "all-views", force_partner: bool = True) -> LossOutput:
    """
    Supervised loss with each anchor's positives subsampled to min(k, available).

    With force_partner the partner view is always among the k positives.
    """
    _check_tau(tau)
    if k < 1:
        raise InvalidConfig(f"k must be at least 1, got {k}")
    validate_batch(batch, embeddings)
    anchors = anchor_mask(batch, anchor_mode)
    weights = _subsampled_weights(batch, anchors, k, rng, force_partner)
    return _assemble(embeddings, batch, tau, anchors, anchors.copy(), weights)


def tsc_lite(embeddings: EmbeddingBatch, batch: ViewBatch, k: int, lam: float,
             prototypes: PrototypePair, minority_label: int, tau: float, rng: RngStream,
             anchor_mode: str = "all-views", force_partner: bool = True) -> LossOutput:
    """kcl plus lam times an ungated prototype term for every anchor"""
    _check_tau(tau)
    if k < 1:
        raise InvalidConfig(f"k must be at least 1, got {k}")
    if lam < 0:
        raise InvalidConfig(f"lambda must be non-negative, got {lam}")
    validate_batch(batch, embeddings)
    anchors = anchor_mask(batch, anchor_mode)
    weights = _subsampled_weights(batch, anchors, k, rng, force_partner)
    proto_vectors = np.where((batch.labels == minority_label)[:, None],
                             prototypes.p_min[None, :], prototypes.p_maj[None, :])
    proto_weights = lam * anchors.astype(np.float64)
    return _assemble(embeddings, batch, tau, anchors, anchors.copy(), weights,
                     proto_weights, proto_vectors)


def compute_loss(config, embeddings: EmbeddingBatch, batch: ViewBatch, minority_label: int,
                 prototypes: Optional[PrototypePair] = None,
                 rng: Optional[RngStream] = None) -> LossOutput:
    """
    Dispatch on config.kind.

    Args:
        config: LossConfig
        embeddings: Encoded batch
        batch: The views
        minority_label: Minority class id
        prototypes: Needed by sup-prototypes and tsc-lite
        rng: Needed by partial-supervision, kcl and tsc-lite
    """
    kind = config.kind
    if kind in ("sup-prototypes", "tsc-lite") and prototypes is None:
        raise InvalidConfig(f"loss '{kind}' needs prototypes")
    if kind in ("partial-supervision", "kcl", "tsc-lite") and rng is None:
        raise InvalidConfig(f"loss '{kind}' needs a random stream")

    if kind == "nt-xent":
        return nt_xent(embeddings, batch, config.tau, config.anchor_mode)
    if kind == "supcon":
        return supcon(embeddings, batch, config.tau, config.anchor_mode)
    if kind == "sup-minority":
        return sup_minority(embeddings, batch, minority_label, config.tau, config.anchor_mode)
    if kind == "sup-prototypes":
        return sup_prototypes(embeddings, batch, prototypes, minority_label, config.tau,
                              config.gate, config.anchor_mode)
    if kind == "partial-supervision":
        return partial_supervision(embeddings, batch, minority_label, config.theta_min,
                                   config.theta_maj, config.tau, rng, config.anchor_mode)
    if kind == "kcl":
        return kcl(embeddings, batch, config.k, config.tau, rng, config.anchor_mode,
                   config.force_partner)
    if kind == "tsc-lite":
        return tsc_lite(embeddings, batch, config.k, config.lam, prototypes, minority_label,
                        config.tau, rng, config.anchor_mode, config.force_partner)
    raise InvalidConfig(f"unknown loss kind '{kind}', expected one of {LOSS_KINDS}")


def anchor_gradient_closed_form(embeddings: EmbeddingBatch, labels: np.ndarray, anchor: int,
                                tau: float) -> np.ndarray:
    """
    Closed-form gradient of one supervised anchor term w.r.t. its own w.

    Evaluated term by term over the anchor's comparison set A(i) (every
    other view): positives contribute (z_p - (z_i.z_p) z_i)(P_ip - 1/|P(i)|)
    and negatives (z_n - (z_i.z_n) z_i) P_in, all scaled by 1/(tau ||w_i||).
    Kept independent of contrastive_core so the two can cross-check.

    Raises:
        EmptyPositives: if the anchor has no same-class view
    """
    _check_tau(tau)
    labels = np.asarray(labels)
    z = embeddings.z
    z_i = z[anchor]
    others = np.array([j for j in range(z.shape[0]) if j != anchor], dtype=np.int64)
    positives = labels[others] == labels[anchor]
    n_pos = int(np.count_nonzero(positives))
    if n_pos == 0:
        raise EmptyPositives(f"anchor {anchor} has no positives")

    dots = z[others] @ z_i
    logits = dots / tau
    shifted = np.exp(logits - logits.max())
    softmax = shifted / shifted.sum()

    tangents = z[others] - dots[:, None] * z_i[None, :]
    coefficients = softmax - np.where(positives, 1.0 / n_pos, 0.0)
    return (coefficients @ tangents) / (tau * np.linalg.norm(embeddings.w[anchor]))
