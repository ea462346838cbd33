"""
Linear-probe evaluation of frozen embeddings.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy.special import expit, log_expit
from sklearn.metrics import balanced_accuracy_score, roc_auc_score

from imbalanced_supcon.errors import InvalidConfig, SingleClassTestSet, SingleClassTrainSet
from imbalanced_supcon.sphere import RngStream

logger = logging.getLogger(__name__)

PROBE_OPTIMIZERS = ("full-batch", "sgd")


@dataclass
class ProbeResult:
    balanced_accuracy: float
    auc: float
    weights: np.ndarray
    train_size: int
    test_size: int
    loss_history: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "balanced_accuracy": self.balanced_accuracy,
            "auc": self.auc,
            "weights": [float(v) for v in self.weights],
            "train_size": self.train_size,
            "test_size": self.test_size,
        }


def _class_weights(labels: np.ndarray) -> np.ndarray:
    """Inverse-frequency weights, n / (2 n_c), per sample"""
    n = labels.size
    n_pos = np.sum(labels == 1)
    return np.where(labels == 1, n / (2.0 * n_pos), n / (2.0 * (n - n_pos)))


def _augmented(x: np.ndarray) -> np.ndarray:
    return np.hstack([x, np.ones((x.shape[0], 1))])


def _weighted_bce(weights: np.ndarray, x1: np.ndarray, labels: np.ndarray,
                  sample_weights: np.ndarray) -> float:
    scores = x1 @ weights
    losses = -(labels * log_expit(scores) + (1 - labels) * log_expit(-scores))
    return float(np.mean(sample_weights * losses))


def _weighted_bce_grad(weights: np.ndarray, x1: np.ndarray, labels: np.ndarray,
                       sample_weights: np.ndarray) -> np.ndarray:
    residual = sample_weights * (expit(x1 @ weights) - labels)
    return x1.T @ residual / labels.size


def fit_probe(x: np.ndarray, labels: np.ndarray, epochs: int = 200, lr: float = 0.1,
              rng: Optional[RngStream] = None, optimizer: str = "full-batch",
              momentum: float = 0.9, weight_decay: float = 1e-4,
              batch_size: int = 256, history: Optional[List[float]] = None) -> np.ndarray:
    """
    Class-weighted logistic regression from zero weights.

    full-batch: gradient descent over the whole set; an epoch that raises the
    loss is undone and retried with half the step, so the recorded loss never
    increases. sgd: shuffled minibatches with momentum and weight decay.

    Args:
        x: [n, d] embeddings
        labels: [n] binary labels
        epochs: Passes over the data
        lr: Step size
        rng: Shuffling stream (sgd only)
        optimizer: full-batch or sgd
        momentum: sgd momentum
        weight_decay: sgd weight decay
        batch_size: sgd minibatch size
        history: Optional list receiving the loss after every epoch

    Returns:
        [d + 1] weights, bias last

    Raises:
        SingleClassTrainSet: if only one class is present
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if np.unique(labels).size < 2:
        raise SingleClassTrainSet("probe training set holds a single class")
    if optimizer not in PROBE_OPTIMIZERS:
        raise InvalidConfig(f"unknown probe optimizer '{optimizer}'")

    x1 = _augmented(x)
    sample_weights = _class_weights(labels)
    weights = np.zeros(x1.shape[1])

    if optimizer == "full-batch":
        loss = _weighted_bce(weights, x1, labels, sample_weights)
        step = lr
        for _ in range(epochs):
            grad = _weighted_bce_grad(weights, x1, labels, sample_weights)
            while True:
                candidate = weights - step * grad
                candidate_loss = _weighted_bce(candidate, x1, labels, sample_weights)
                if candidate_loss <= loss or step < 1e-12:
                    break
                step *= 0.5
            if candidate_loss <= loss:
                weights, loss = candidate, candidate_loss
            if history is not None:
                history.append(loss)
        return weights

    rng = rng if rng is not None else RngStream(0, 0)
    velocity = np.zeros_like(weights)
    n = labels.size
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            grad = _weighted_bce_grad(weights, x1[idx], labels[idx], sample_weights[idx])
            grad = grad + weight_decay * weights
            velocity = momentum * velocity + grad
            weights = weights - lr * velocity
        if history is not None:
            history.append(_weighted_bce(weights, x1, labels, sample_weights))
    return weights


def auc_score(scores: np.ndarray, labels: np.ndarray) -> float:
    """ROC AUC; tied scores count half"""
    return float(roc_auc_score(np.asarray(labels), np.asarray(scores, dtype=np.float64)))


def balanced_accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    return float(balanced_accuracy_score(np.asarray(labels), np.asarray(predictions)))


def evaluate_probe(weights: np.ndarray, x: np.ndarray, labels: np.ndarray,
                   train_size: int = 0) -> ProbeResult:
    """
    Balanced accuracy at probability 0.5 and rank AUC on a test set.

    Raises:
        SingleClassTestSet: if the test set is empty or holds one class
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.size == 0 or np.unique(labels).size < 2:
        raise SingleClassTestSet("probe test set needs both classes")
    scores = _augmented(x) @ weights
    predictions = (expit(scores) >= 0.5).astype(np.int64)
    return ProbeResult(
        balanced_accuracy=balanced_accuracy(predictions, labels),
        auc=auc_score(scores, labels),
        weights=np.asarray(weights),
        train_size=int(train_size),
        test_size=int(labels.size),
    )


def balanced_subset(labels: np.ndarray, fraction: float, rng: RngStream,
                    min_per_class: int = 2) -> np.ndarray:
    """
    Class-balanced index subset of about fraction * n samples.

    Each class contributes the same count: round(fraction * n / 2), at least
    min_per_class, at most the smaller class size.
    """
    if not 0.0 < fraction <= 1.0:
        raise InvalidConfig(f"subset fraction must be in (0, 1], got {fraction}")
    labels = np.asarray(labels)
    members = [np.flatnonzero(labels == c) for c in (0, 1)]
    smallest = min(m.size for m in members)
    if fraction == 1.0:
        per_class = smallest
    else:
        per_class = int(np.floor(fraction * labels.size / 2.0 + 0.5))
        per_class = min(max(per_class, min_per_class), smallest)
    picked = [m[rng.permutation(m.size)[:per_class]] for m in members]
    return np.sort(np.concatenate(picked))


def probe_protocol(train_x: np.ndarray, train_labels: np.ndarray, test_x: np.ndarray,
                   test_labels: np.ndarray, subset_fraction: float, rng: RngStream,
                   epochs: int = 200, lr: float = 0.1, optimizer: str = "full-batch",
                   momentum: float = 0.9, weight_decay: float = 1e-4, batch_size: int = 256,
                   balance_test: bool = True) -> ProbeResult:
    """
    Fit on a balanced training subset and score on a balanced test split.

    Args:
        train_x, train_labels: Probe training split
        test_x, test_labels: Probe test split (disjoint from training)
        subset_fraction: Share of the training split to draw, class-balanced
        rng: Stream for subset draws and sgd shuffling
        balance_test: Downsample the larger test class to the smaller one

    Returns:
        ProbeResult
    """
    train_labels = np.asarray(train_labels)
    test_labels = np.asarray(test_labels)
    if np.unique(train_labels).size < 2:
        raise SingleClassTrainSet("probe training split holds a single class")
    if np.unique(test_labels).size < 2:
        raise SingleClassTestSet("probe test split holds a single class")

    train_idx = balanced_subset(train_labels, subset_fraction, rng)
    test_idx = (balanced_subset(test_labels, 1.0, rng) if balance_test
                else np.arange(test_labels.size))

    history: List[float] = []
    weights = fit_probe(np.asarray(train_x)[train_idx], train_labels[train_idx], epochs, lr,
                        rng, optimizer, momentum, weight_decay, batch_size, history)
    result = evaluate_probe(weights, np.asarray(test_x)[test_idx], test_labels[test_idx],
                            train_size=train_idx.size)
    result.loss_history = history
    logger.debug("probe on %d/%d samples: balanced accuracy %.4f, auc %.4f",
                 train_idx.size, test_idx.size, result.balanced_accuracy, result.auc)
    return result
