"""
Gradient-bound verification and collapse diagnosis for the supervised loss.

Near collapse every pair of batch embeddings is within epsilon. The gradient
of an anchor's supervised term w.r.t. its own w is then capped by a bound
that shrinks as the anchor's share of positives |P(i)|/|A(i)| grows. Two
forms of the cap are evaluated:

    proof-final  (e + e^2/2)/(tau ||w||) * [(1-rho) e^-x + e^-x (e^x - 1) + (1-rho) e^x]
    theorem      (e + e^2/2)/(tau ||w||) * [(1-rho) e^-x + (e^x - 1) + (1-rho)^2 e^x]

with x = e^2/tau and rho = |P(i)|/|A(i)|. Only the proof-final form is
asserted; the theorem form is reported next to it.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from imbalanced_supcon.errors import EmptyPositives, InvalidConfig, PremiseViolated
from imbalanced_supcon.losses import anchor_gradient_closed_form
from imbalanced_supcon.metrics import MetricReport
from imbalanced_supcon.sphere import EmbeddingBatch, pairwise_sq_dist

logger = logging.getLogger(__name__)

BOUND_FORMS = ("proof-final", "theorem")
DEFAULT_EPSILON_MAX = 0.3
SATISFIED_ATOL = 1e-12


def measure_epsilon(z: np.ndarray) -> float:
    """Largest pairwise distance in the set"""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[0] < 2:
        raise InvalidConfig("epsilon needs at least 2 views")
    return float(np.sqrt(max(pairwise_sq_dist(z).max(), 0.0)))


def bound_rhs(epsilon: float, tau: float, w_norm: float, n_positives: int, n_all: int,
              form: str = "proof-final") -> float:
    """
    Right-hand side of the gradient cap for one anchor.

    Args:
        epsilon: Max pairwise distance in the batch
        tau: Temperature
        w_norm: ||w_i||
        n_positives: |P(i)|
        n_all: |A(i)|
        form: proof-final or theorem

    Returns:
        The cap on ||dL_i/dw_i||
    """
    if not tau > 0:
        raise InvalidConfig(f"temperature must be positive, got {tau}")
    if not w_norm > 0:
        raise InvalidConfig(f"||w|| must be positive, got {w_norm}")
    if not 0 < n_positives <= n_all:
        raise InvalidConfig(f"need 0 < |P| <= |A|, got |P|={n_positives}, |A|={n_all}")
    if epsilon < 0:
        raise InvalidConfig(f"epsilon must be non-negative, got {epsilon}")

    rho = n_positives / n_all
    x = epsilon * epsilon / tau
    scale = (epsilon + 0.5 * epsilon * epsilon) / (tau * w_norm)
    if form == "proof-final":
        bracket = ((1 - rho) * np.exp(-x) + np.exp(-x) * np.expm1(x)
                   + (1 - rho) * np.exp(x))
    elif form == "theorem":
        bracket = (1 - rho) * np.exp(-x) + np.expm1(x) + (1 - rho) ** 2 * np.exp(x)
    else:
        raise InvalidConfig(f"unknown bound form '{form}', expected one of {BOUND_FORMS}")
    return float(scale * bracket)


@dataclass
class AnchorBound:
    index: int
    label: int
    grad_norm: float
    rhs_proof: float
    rhs_theorem: float
    n_positives: int
    n_all: int
    w_norm: float

    @property
    def satisfied_proof(self) -> bool:
        return self.grad_norm <= self.rhs_proof + SATISFIED_ATOL

    @property
    def satisfied_theorem(self) -> bool:
        return self.grad_norm <= self.rhs_theorem + SATISFIED_ATOL

    def to_dict(self) -> Dict:
        return {
            "index": self.index,
            "label": self.label,
            "grad_norm": self.grad_norm,
            "rhs_proof": self.rhs_proof,
            "rhs_theorem": self.rhs_theorem,
            "n_positives": self.n_positives,
            "n_all": self.n_all,
            "w_norm": self.w_norm,
            "satisfied_proof": self.satisfied_proof,
            "satisfied_theorem": self.satisfied_theorem,
        }


@dataclass
class BoundEvaluation:
    epsilon: float
    tau: float
    epsilon_max: float
    anchors: List[AnchorBound] = field(default_factory=list)

    @property
    def premise_violated(self) -> bool:
        return self.epsilon > self.epsilon_max

    @property
    def all_satisfied(self) -> bool:
        return all(a.satisfied_proof for a in self.anchors)

    @property
    def all_satisfied_theorem(self) -> bool:
        return all(a.satisfied_theorem for a in self.anchors)

    def slack(self, form: str = "proof-final") -> np.ndarray:
        rhs = [a.rhs_proof if form == "proof-final" else a.rhs_theorem for a in self.anchors]
        return np.asarray(rhs) - np.asarray([a.grad_norm for a in self.anchors])

    def mean_grad_norm(self, label: int) -> float:
        norms = [a.grad_norm for a in self.anchors if a.label == label]
        return float(np.mean(norms)) if norms else float("nan")

    def to_dict(self) -> Dict:
        proof_slack = self.slack("proof-final")
        theorem_slack = self.slack("theorem")
        return {
            "epsilon": self.epsilon,
            "tau": self.tau,
            "epsilon_max": self.epsilon_max,
            "premise_violated": self.premise_violated,
            "all_satisfied": self.all_satisfied,
            "all_satisfied_theorem": self.all_satisfied_theorem,
            "min_slack_proof": float(proof_slack.min()),
            "max_slack_proof": float(proof_slack.max()),
            "min_slack_theorem": float(theorem_slack.min()),
            "max_slack_theorem": float(theorem_slack.max()),
            "anchors": [a.to_dict() for a in self.anchors],
        }

    def format_table(self) -> str:
        """Per-anchor table for terminal output"""
        lines = [f"{'anchor':>6} {'label':>5} {'|P|':>5} {'|A|':>5} {'grad':>12} "
                 f"{'rhs proof':>12} {'rhs thm':>12} {'ok':>3}",
                 "-" * 70]
        for a in self.anchors:
            lines.append(f"{a.index:>6} {a.label:>5} {a.n_positives:>5} {a.n_all:>5} "
                         f"{a.grad_norm:>12.4e} {a.rhs_proof:>12.4e} {a.rhs_theorem:>12.4e} "
                         f"{'yes' if a.satisfied_proof else 'NO':>3}")
        return "\n".join(lines)


def verify_bound(embeddings: EmbeddingBatch, labels: np.ndarray, tau: float,
                 epsilon_max: float = DEFAULT_EPSILON_MAX, strict: bool = False) -> BoundEvaluation:
    """
    Measure every anchor's supervised gradient norm and compare it with both caps.

    A batch wider than epsilon_max is still evaluated; the result is flagged
    and a warning logged. With strict=True it raises PremiseViolated instead.

    Raises:
        EmptyPositives: if some anchor has no same-class view
    """
    labels = np.asarray(labels)
    epsilon = measure_epsilon(embeddings.z)
    if epsilon > epsilon_max:
        message = f"batch epsilon {epsilon:.4f} exceeds the near-collapse premise {epsilon_max}"
        if strict:
            raise PremiseViolated(message)
        logger.warning(message)

    n_all = len(embeddings) - 1
    evaluation = BoundEvaluation(epsilon=epsilon, tau=tau, epsilon_max=epsilon_max)
    for i in range(len(embeddings)):
        n_positives = int(np.sum(labels == labels[i])) - 1
        if n_positives == 0:
            raise EmptyPositives(f"anchor {i} has no positives")
        w_norm = float(np.linalg.norm(embeddings.w[i]))
        grad = anchor_gradient_closed_form(embeddings, labels, i, tau)
        evaluation.anchors.append(AnchorBound(
            index=i,
            label=int(labels[i]),
            grad_norm=float(np.linalg.norm(grad)),
            rhs_proof=bound_rhs(epsilon, tau, w_norm, n_positives, n_all, "proof-final"),
            rhs_theorem=bound_rhs(epsilon, tau, w_norm, n_positives, n_all, "theorem"),
            n_positives=n_positives,
            n_all=n_all,
            w_norm=w_norm,
        ))
    if not evaluation.all_satisfied:
        failed = sum(not a.satisfied_proof for a in evaluation.anchors)
        logger.warning("%d anchors exceed the proof-final bound", failed)
    return evaluation


@dataclass
class CollapseThresholds:
    saa: float = 0.05
    cac_band: float = 0.05
    similarity: float = 0.95

    def to_dict(self) -> Dict:
        return {"saa": self.saa, "cac_band": self.cac_band, "similarity": self.similarity}


def summarize_trajectory(grad_norms: Sequence[float]) -> Dict[str, float]:
    norms = np.asarray(grad_norms, dtype=np.float64)
    return {
        "first": float(norms[0]),
        "last": float(norms[-1]),
        "min": float(norms.min()),
        "max": float(norms.max()),
        "mean": float(norms.mean()),
    }


@dataclass
class CollapseVerdict:
    collapsed: bool
    evidence: Dict

    def to_dict(self) -> Dict:
        return {"collapsed": self.collapsed, "evidence": dict(self.evidence)}


def detect_collapse(report: MetricReport, grad_norms: Sequence[float],
                    thresholds: CollapseThresholds = CollapseThresholds()) -> CollapseVerdict:
    """
    Collapsed when all three hold: saa below its threshold, cac within the
    band around the label-mix baseline sum(q_c^2), and mean cosine similarity
    above its threshold.
    """
    if len(grad_norms) == 0:
        raise InvalidConfig("grad-norm trajectory is empty")
    baseline = report.label_mix_baseline()
    low_alignment = report.saa < thresholds.saa
    mixed = abs(report.cac - baseline) <= thresholds.cac_band
    concentrated = report.mean_cosine > thresholds.similarity
    return CollapseVerdict(
        collapsed=bool(low_alignment and mixed and concentrated),
        evidence={
            "saa": report.saa,
            "cac": report.cac,
            "cac_baseline": baseline,
            "mean_cosine": report.mean_cosine,
            "grad_norm": summarize_trajectory(grad_norms),
            "thresholds": thresholds.to_dict(),
        },
    )
