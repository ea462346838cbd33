import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from imbalanced_supcon.data import ViewBatch
from imbalanced_supcon.errors import EmptyPositives, InvalidConfig, PremiseViolated
from imbalanced_supcon.losses import supcon
from imbalanced_supcon.metrics import MetricReport
from imbalanced_supcon.sphere import normalize_rows
from imbalanced_supcon.theory import (AnchorBound, BoundEvaluation, bound_rhs, detect_collapse,
                                      measure_epsilon, summarize_trajectory, verify_bound)

import oracles


def near_collapsed(n_maj_samples=18, n_min_samples=2, d=8, noise=0.02, seed=0):
    rng = np.random.default_rng(seed)
    batch = ViewBatch.layout([0] * n_maj_samples + [1] * n_min_samples)
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    w = direction + noise * rng.standard_normal((len(batch), d))
    return batch, w * rng.uniform(0.8, 1.2, size=(len(batch), 1))


def report(saa, cac, mean_cosine, class_counts=(95, 5)):
    return MetricReport(sad=0.0, saa=saa, cad=0.0, cac=cac, gpu=0.0, r_fraction=0.05,
                        r_count=5, n_views=sum(class_counts), class_counts=list(class_counts),
                        mean_cosine=mean_cosine)


def test_epsilon_is_the_widest_pair():
    assert measure_epsilon(np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])) == pytest.approx(2.0)
    z = oracles.random_unit_rows(12, 4, 3)
    assert measure_epsilon(z) == pytest.approx(oracles.epsilon(z), abs=1e-12)
    with pytest.raises(InvalidConfig):
        measure_epsilon(z[:1])


def test_bound_vanishes_at_zero_epsilon():
    for form in ("proof-final", "theorem"):
        assert bound_rhs(0.0, 0.1, 1.0, 3, 10, form) == 0.0


def test_bound_with_all_positives():
    expected = (0.1 + 0.005) / 0.1 * (1.0 - np.exp(-0.1))
    assert bound_rhs(0.1, 0.1, 1.0, 5, 5) == pytest.approx(expected)
    assert bound_rhs(0.1, 0.1, 2.0, 5, 5) == pytest.approx(expected / 2)


def test_bound_shrinks_with_positive_share():
    values = [bound_rhs(0.2, 0.1, 1.0, p, 10) for p in range(1, 11)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_bound_grows_with_epsilon():
    values = [bound_rhs(eps, 0.1, 1.0, 2, 10) for eps in (0.01, 0.05, 0.1, 0.2, 0.3)]
    assert all(a < b for a, b in zip(values, values[1:]))


def test_bound_rejects_bad_arguments():
    for args in ((0.1, 0.0, 1.0, 1, 5), (0.1, 0.1, 0.0, 1, 5), (0.1, 0.1, 1.0, 0, 5),
                 (0.1, 0.1, 1.0, 6, 5), (-0.1, 0.1, 1.0, 1, 5)):
        with pytest.raises(InvalidConfig):
            bound_rhs(*args)
    with pytest.raises(InvalidConfig):
        bound_rhs(0.1, 0.1, 1.0, 1, 5, form="lemma")


def test_bound_holds_near_collapse():
    batch, w = near_collapsed()
    evaluation = verify_bound(normalize_rows(w), batch.labels, 0.1)
    assert evaluation.epsilon <= 0.2
    assert not evaluation.premise_violated
    assert evaluation.all_satisfied
    assert len(evaluation.anchors) == len(batch)
    assert evaluation.mean_grad_norm(1) > evaluation.mean_grad_norm(0)
    minority = [a for a in evaluation.anchors if a.label == 1]
    assert all(a.n_positives == 3 and a.n_all == 39 for a in minority)


@pytest.mark.parametrize("seed", range(17))
@pytest.mark.parametrize("n_maj_samples, n_min_samples", [(50, 50), (95, 5), (99, 1)])
def test_bound_holds_across_near_collapsed_batches(n_maj_samples, n_min_samples, seed):
    batch, w = near_collapsed(n_maj_samples, n_min_samples, seed=seed)
    evaluation = verify_bound(normalize_rows(w), batch.labels, 0.1)
    assert not evaluation.premise_violated
    assert evaluation.all_satisfied
    assert len(evaluation.anchors) == 2 * (n_maj_samples + n_min_samples)


@given(n_maj_samples=st.integers(1, 30), n_min_samples=st.integers(1, 10),
       seed=st.integers(0, 10_000))
def test_bound_shrinks_as_anchors_gain_positives(n_maj_samples, n_min_samples, seed):
    batch, w = near_collapsed(n_maj_samples, n_min_samples, seed=seed)
    evaluation = verify_bound(normalize_rows(w), batch.labels, 0.1)
    anchors = sorted(evaluation.anchors, key=lambda a: a.n_positives)
    for fewer, more in zip(anchors, anchors[1:]):
        assert more.rhs_proof * more.w_norm <= fewer.rhs_proof * fewer.w_norm * (1 + 1e-12)
        assert more.rhs_theorem * more.w_norm <= fewer.rhs_theorem * fewer.w_norm * (1 + 1e-12)


def test_measured_gradient_matches_finite_differences():
    batch, w = near_collapsed(n_maj_samples=5, n_min_samples=2, d=4)
    evaluation = verify_bound(normalize_rows(w), batch.labels, 0.1)
    for anchor in (0, len(batch) - 1):
        def own_term(w_i):
            shifted = w.copy()
            shifted[anchor] = w_i[0]
            return supcon(normalize_rows(shifted), batch, 0.1).anchor_values[anchor]

        numeric = oracles.finite_difference(own_term, w[anchor][None, :])
        assert np.linalg.norm(numeric) == pytest.approx(evaluation.anchors[anchor].grad_norm,
                                                        rel=1e-6)


def test_fully_collapsed_batch_has_zero_gradients():
    z = np.tile([0.0, 1.0, 0.0], (8, 1))
    evaluation = verify_bound(normalize_rows(z), np.array([0, 0, 0, 0, 0, 0, 1, 1]), 0.5)
    assert evaluation.epsilon == 0.0
    assert evaluation.all_satisfied
    assert all(a.grad_norm == 0.0 for a in evaluation.anchors)


def test_wide_batch_warns_or_raises(caplog):
    z = oracles.random_unit_rows(8, 3, 0)
    labels = np.array([0, 0, 0, 0, 0, 0, 1, 1])
    with caplog.at_level(logging.WARNING, logger="imbalanced_supcon.theory"):
        evaluation = verify_bound(normalize_rows(z), labels, 0.1)
    assert evaluation.premise_violated
    assert "near-collapse premise" in caplog.text
    with pytest.raises(PremiseViolated):
        verify_bound(normalize_rows(z), labels, 0.1, strict=True)


def test_anchor_without_positives():
    z = np.tile([1.0, 0.0], (4, 1))
    with pytest.raises(EmptyPositives):
        verify_bound(normalize_rows(z), np.array([0, 0, 0, 1]), 0.1)


def test_evaluation_summary_and_table():
    evaluation = BoundEvaluation(epsilon=0.1, tau=0.1, epsilon_max=0.3, anchors=[
        AnchorBound(index=0, label=0, grad_norm=0.01, rhs_proof=0.02, rhs_theorem=0.03,
                    n_positives=3, n_all=5, w_norm=1.0),
        AnchorBound(index=1, label=1, grad_norm=0.05, rhs_proof=0.04, rhs_theorem=0.06,
                    n_positives=1, n_all=5, w_norm=1.0),
    ])
    assert not evaluation.all_satisfied
    assert evaluation.all_satisfied_theorem
    summary = evaluation.to_dict()
    assert summary["min_slack_proof"] == pytest.approx(-0.01)
    assert summary["max_slack_theorem"] == pytest.approx(0.02)
    assert summary["anchors"][1]["satisfied_proof"] is False
    table = evaluation.format_table().splitlines()
    assert len(table) == 4
    assert table[2].endswith("yes")
    assert table[3].endswith("NO")


def test_detects_collapse():
    verdict = detect_collapse(report(saa=0.0, cac=0.91, mean_cosine=0.99), [0.5, 0.4, 0.3])
    assert verdict.collapsed
    assert verdict.evidence["cac_baseline"] == pytest.approx(0.905)
    assert verdict.evidence["grad_norm"]["last"] == 0.3


@pytest.mark.parametrize("saa, cac, mean_cosine", [
    (0.9, 1.0, 0.1),
    (0.0, 0.91, 0.5),
    (0.0, 0.99, 0.99),
    (0.2, 0.91, 0.99),
])
def test_any_failed_criterion_means_no_collapse(saa, cac, mean_cosine):
    assert not detect_collapse(report(saa, cac, mean_cosine), [1.0]).collapsed


def test_collapse_needs_a_trajectory():
    with pytest.raises(InvalidConfig):
        detect_collapse(report(0.0, 0.9, 0.99), [])


def test_trajectory_summary():
    assert summarize_trajectory([3.0, 1.0, 2.0]) == {
        "first": 3.0, "last": 2.0, "min": 1.0, "max": 3.0, "mean": 2.0}
