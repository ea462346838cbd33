import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logsumexp

from imbalanced_supcon.config import LossConfig
from imbalanced_supcon.data import ViewBatch
from imbalanced_supcon.errors import EmptyPositives, InvalidBatch, InvalidConfig
from imbalanced_supcon.losses import (PrototypePair, anchor_gradient_closed_form, compute_loss,
                                      kcl, nt_xent, partial_supervision, sup_minority,
                                      sup_prototypes, supcon, tsc_lite)
from imbalanced_supcon.sphere import EmbeddingBatch, RngStream, normalize_rows

import oracles
from oracles import finite_difference, max_relative_error, roundoff_floor

LN3 = np.log(3.0)
TAU = 0.5
E0 = np.array([1.0, 0.0, 0.0, 0.0])


def random_setup(sample_labels, d=4, seed=0):
    batch = ViewBatch.layout(sample_labels)
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((len(batch), d)) * rng.uniform(0.5, 2.0, size=(len(batch), 1))
    return batch, w


def assert_matches_finite_differences(loss_fn, w):
    analytic = loss_fn(normalize_rows(w)).grad_w
    numeric = finite_difference(lambda shifted: loss_fn(normalize_rows(shifted)).value, w)
    floor = roundoff_floor(loss_fn(normalize_rows(w)).value)
    assert max_relative_error(analytic, numeric, floor) < 1e-5


def identical_views(sample_labels, d=3):
    batch = ViewBatch.layout(sample_labels)
    w = np.zeros((len(batch), d))
    w[:, 0] = 1.0
    return batch, normalize_rows(w)


def test_nt_xent_identical_views_per_sample():
    batch, emb = identical_views([0, 1])
    for tau in (0.07, 0.5, 2.0):
        assert nt_xent(emb, batch, tau, "per-sample").value == pytest.approx(2 * LN3)


def test_nt_xent_identical_views_all_views():
    batch, emb = identical_views([0, 1])
    out = nt_xent(emb, batch, 0.1)
    assert out.value == pytest.approx(4 * LN3)
    np.testing.assert_allclose(out.anchor_values, LN3)


def test_all_views_value_is_sum_of_view_contributions():
    batch, w = random_setup([0, 0, 1, 0, 1])
    emb = normalize_rows(w)
    all_views = nt_xent(emb, batch, TAU)
    per_sample = nt_xent(emb, batch, TAU, "per-sample")
    assert all_views.value == pytest.approx(np.sum(all_views.anchor_values), abs=1e-12)
    np.testing.assert_allclose(per_sample.anchor_values[::2], all_views.anchor_values[::2])
    assert np.all(per_sample.anchor_values[1::2] == 0.0)
    assert all_views.value == pytest.approx(
        per_sample.value + np.sum(all_views.anchor_values[1::2]), abs=1e-12)


@pytest.mark.parametrize("anchor_mode", ["all-views", "per-sample"])
def test_nt_xent_gradient(anchor_mode):
    batch, w = random_setup([0, 1, 1, 0, 0])
    assert_matches_finite_differences(lambda e: nt_xent(e, batch, TAU, anchor_mode), w)


def test_supcon_single_class_identical_views():
    batch, emb = identical_views([0, 0])
    assert supcon(emb, batch, 0.3, "per-sample").value == pytest.approx(2 * LN3)


@pytest.mark.parametrize("anchor_mode", ["all-views", "per-sample"])
def test_supcon_gradient(anchor_mode):
    batch, w = random_setup([0, 1, 1, 0, 0, 0], seed=1)
    assert_matches_finite_differences(lambda e: supcon(e, batch, TAU, anchor_mode), w)


def test_supcon_anchor_gradient_matches_closed_form():
    batch, w = random_setup([0, 0, 0, 1, 0, 1, 0], d=5, seed=2)
    emb = normalize_rows(w)
    out = supcon(emb, batch, 0.1)
    for i in range(len(batch)):
        expected = anchor_gradient_closed_form(emb, batch.labels, i, 0.1)
        assert np.max(np.abs(out.anchor_grad_w[i] - expected)) < 1e-10


@settings(max_examples=100, deadline=None)
@given(sample_labels=st.lists(st.integers(0, 1), min_size=2, max_size=12),
       d=st.integers(3, 8), seed=st.integers(0, 10_000), tau=st.sampled_from([0.07, 0.5]))
def test_supcon_anchor_gradient_matches_closed_form_property(sample_labels, d, seed, tau):
    batch = ViewBatch.layout(sample_labels)
    scales = np.random.default_rng(seed + 1).uniform(0.5, 2.0, size=(len(batch), 1))
    emb = normalize_rows(oracles.random_unit_rows(len(batch), d, seed) * scales)
    out = supcon(emb, batch, tau)
    for i in range(len(batch)):
        expected = anchor_gradient_closed_form(emb, batch.labels, i, tau)
        np.testing.assert_allclose(out.anchor_grad_w[i], expected, rtol=0, atol=1e-10)


def test_supcon_reports_empty_class():
    batch, w = random_setup([0, 0, 0])
    out = supcon(normalize_rows(w), batch, TAU)
    assert out.empty_classes == (1,)


def test_sup_minority_without_minority_is_nt_xent():
    batch, w = random_setup([0, 0, 0])
    emb = normalize_rows(w)
    assert sup_minority(emb, batch, 1, TAU).value == pytest.approx(nt_xent(emb, batch, TAU).value,
                                                                   abs=1e-12)


def test_sup_minority_all_minority_is_supcon():
    batch, w = random_setup([1, 1, 1])
    emb = normalize_rows(w)
    assert sup_minority(emb, batch, 1, TAU).value == pytest.approx(supcon(emb, batch, TAU).value,
                                                                   abs=1e-12)


def test_sup_minority_supervises_minority_anchors_only():
    batch, w = random_setup([0, 1, 0, 1])
    out = sup_minority(normalize_rows(w), batch, 1, TAU)
    np.testing.assert_array_equal(out.supervised, batch.labels == 1)
    np.testing.assert_array_equal(out.n_positives, np.where(batch.labels == 1, 3, 1))


def test_sup_minority_gradient():
    batch, w = random_setup([0, 1, 0, 1, 0, 0], seed=3)
    assert_matches_finite_differences(lambda e: sup_minority(e, batch, 1, TAU), w)


def test_sup_prototypes_gate_off_equals_nt_xent():
    batch = ViewBatch.layout([0, 0])
    angles = np.array([0.1, 1.3, 2.2, 4.0])
    radius = np.sqrt(1 - 0.9 ** 2)
    w = np.column_stack([np.full(4, 0.9), radius * np.cos(angles), radius * np.sin(angles)])
    emb = normalize_rows(w)
    prototypes = PrototypePair(p_maj=np.array([1.0, 0.0, 0.0]))
    out = sup_prototypes(emb, batch, prototypes, 1, TAU, gate=0.5)
    assert not out.prototype_active.any()
    assert out.value == pytest.approx(nt_xent(emb, batch, TAU).value, abs=1e-12)


def test_sup_prototypes_coincident_term_is_ln3():
    batch, emb = identical_views([0, 0])
    prototypes = PrototypePair(p_maj=np.array([1.0, 0.0, 0.0]))
    out = sup_prototypes(emb, batch, prototypes, 1, 1.0, gate=1.0)
    assert out.prototype_active.all()
    np.testing.assert_allclose(out.anchor_values - nt_xent(emb, batch, 1.0).anchor_values, LN3)


def test_sup_prototypes_gradient_both_sides_of_gate():
    batch = ViewBatch.layout([0, 0, 0, 1, 1])
    w = np.array([
        [1.0, 0.1, 0.05, 0.0], [1.0, -0.05, 0.1, 0.02],
        [0.1, 1.0, 0.2, -0.3], [-0.2, 0.8, 0.4, 0.1],
        [0.3, -0.5, 1.0, 0.2], [0.6, 0.1, -0.2, 0.9],
        [-1.0, 0.2, 0.1, 0.0], [1.0, 0.3, -0.2, 0.1],
        [0.2, 0.3, 1.0, -0.5], [-0.4, -0.9, 0.3, 0.2],
    ])
    prototypes = PrototypePair(p_maj=E0)

    def loss(e):
        return sup_prototypes(e, batch, prototypes, 1, TAU, gate=0.5)

    active = loss(normalize_rows(w)).prototype_active
    assert active.any() and not active.all()
    assert_matches_finite_differences(loss, w)


def test_prototype_pair_is_antipodal():
    pair = PrototypePair(p_maj=np.array([0.0, 1.0]))
    np.testing.assert_array_equal(pair.p_min, [0.0, -1.0])
    np.testing.assert_array_equal(pair.for_label(1, minority_label=1), pair.p_min)
    np.testing.assert_array_equal(pair.for_label(0, minority_label=1), pair.p_maj)


def test_partial_supervision_endpoints():
    batch, w = random_setup([0, 1, 0, 0, 1])
    emb = normalize_rows(w)
    none_maj = partial_supervision(emb, batch, 1, 1.0, 0.0, TAU, RngStream(0, 6))
    all_maj = partial_supervision(emb, batch, 1, 1.0, 1.0, TAU, RngStream(0, 6))
    assert none_maj.value == pytest.approx(sup_minority(emb, batch, 1, TAU).value, abs=1e-12)
    assert all_maj.value == pytest.approx(supcon(emb, batch, TAU).value, abs=1e-12)


def test_partial_supervision_rounds_counts():
    batch, w = random_setup([0, 0, 0, 0, 1, 1])
    out = partial_supervision(normalize_rows(w), batch, 1, 1.0, 0.5, TAU, RngStream(0, 6))
    assert np.sum(out.supervised & (batch.labels == 0)) == 4
    assert np.sum(out.supervised & (batch.labels == 1)) == 4


def test_partial_supervision_rejects_theta():
    batch, w = random_setup([0, 1])
    with pytest.raises(InvalidConfig):
        partial_supervision(normalize_rows(w), batch, 1, 1.2, 0.0, TAU, RngStream(0, 6))


def test_partial_supervision_gradient():
    batch, w = random_setup([0, 1, 0, 0, 1, 0], seed=4)
    assert_matches_finite_differences(
        lambda e: partial_supervision(e, batch, 1, 1.0, 0.5, TAU, RngStream(7, 6)), w)


def test_kcl_large_k_is_supcon():
    batch, w = random_setup([0, 0, 0, 1, 1])
    emb = normalize_rows(w)
    out = kcl(emb, batch, 5, TAU, RngStream(0, 6))
    assert out.value == pytest.approx(supcon(emb, batch, TAU).value, abs=1e-12)


def test_kcl_single_forced_partner_is_nt_xent():
    batch, w = random_setup([0, 0, 0, 1, 1])
    emb = normalize_rows(w)
    out = kcl(emb, batch, 1, TAU, RngStream(0, 6))
    np.testing.assert_array_equal(out.n_positives, 1)
    assert out.value == pytest.approx(nt_xent(emb, batch, TAU).value, abs=1e-12)


def test_kcl_without_forced_partner_counts():
    batch, w = random_setup([0, 0, 0, 1, 1])
    out = kcl(normalize_rows(w), batch, 2, TAU, RngStream(0, 6), force_partner=False)
    np.testing.assert_array_equal(out.n_positives, 2)


def test_kcl_gradient():
    batch, w = random_setup([0, 0, 0, 1, 1, 0], seed=5)
    assert_matches_finite_differences(lambda e: kcl(e, batch, 2, TAU, RngStream(3, 6)), w)


def test_tsc_lite_zero_lambda_is_kcl():
    batch, w = random_setup([0, 0, 1, 1, 0])
    emb = normalize_rows(w)
    prototypes = PrototypePair(p_maj=E0)
    out = tsc_lite(emb, batch, 2, 0.0, prototypes, 1, TAU, RngStream(2, 6))
    assert out.value == pytest.approx(kcl(emb, batch, 2, TAU, RngStream(2, 6)).value, abs=1e-12)


def test_tsc_lite_composes_supcon_and_prototype_terms():
    batch, w = random_setup([0, 0, 1, 1, 0])
    emb = normalize_rows(w)
    prototypes = PrototypePair(p_maj=E0)
    out = tsc_lite(emb, batch, 50, 1.0, prototypes, 1, TAU, RngStream(2, 6))
    sims = emb.z @ emb.z.T / TAU
    np.fill_diagonal(sims, -np.inf)
    q = np.where((batch.labels == 1)[:, None], -E0, E0)
    prototype_terms = logsumexp(sims, axis=1) - np.sum(emb.z * q, axis=1) / TAU
    np.testing.assert_allclose(out.anchor_values - supcon(emb, batch, TAU).anchor_values,
                               prototype_terms, atol=1e-12)


def test_tsc_lite_gradient():
    batch, w = random_setup([0, 1, 0, 1, 0], seed=6)
    prototypes = PrototypePair(p_maj=E0)
    assert_matches_finite_differences(
        lambda e: tsc_lite(e, batch, 2, 0.7, prototypes, 1, TAU, RngStream(1, 6)), w)


def test_closed_form_uniform_similarities():
    z = np.array([
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0],
        [0.0, -1.0, 0.0, 0.0], [0.0, 0.0, -1.0, 0.0],
    ])
    labels = np.array([0, 0, 0, 1, 1, 1])
    positives = np.array([1, 1, 0, 0, 0])
    expected = ((1 / 5 - positives / 2)[:, None] * z[1:]).sum(axis=0) / TAU
    grad = anchor_gradient_closed_form(EmbeddingBatch.from_unit(z), labels, 0, TAU)
    np.testing.assert_allclose(grad, expected, atol=1e-14)


def test_closed_form_needs_positives():
    emb = EmbeddingBatch.from_unit(np.eye(4))
    with pytest.raises(EmptyPositives):
        anchor_gradient_closed_form(emb, np.array([0, 0, 0, 1]), 3, TAU)


def test_invalid_batches():
    batch, w = random_setup([0, 1])
    emb = normalize_rows(w)
    broken = ViewBatch(sample_ids=batch.sample_ids, labels=batch.labels,
                       view_index=batch.view_index, partner=np.array([1, 0, 2, 3]))
    with pytest.raises(InvalidBatch):
        nt_xent(emb, broken, TAU)
    with pytest.raises(InvalidBatch):
        nt_xent(normalize_rows(w[:3]), batch, TAU)
    with pytest.raises(InvalidConfig):
        nt_xent(emb, batch, 0.0)
    with pytest.raises(InvalidConfig):
        nt_xent(emb, batch, TAU, anchor_mode="every-other")


def test_compute_loss_dispatch():
    batch, w = random_setup([0, 1, 0])
    emb = normalize_rows(w)
    assert compute_loss(LossConfig(kind="supcon", tau=TAU), emb, batch, 1).value == pytest.approx(
        supcon(emb, batch, TAU).value)
    with pytest.raises(InvalidConfig):
        compute_loss(LossConfig(kind="sup-prototypes"), emb, batch, 1)
    with pytest.raises(InvalidConfig):
        compute_loss(LossConfig(kind="kcl"), emb, batch, 1)
    out = compute_loss(LossConfig(kind="tsc-lite", tau=TAU), emb, batch, 1,
                       PrototypePair(p_maj=E0), RngStream(0, 6))
    assert out.prototype_active.all()


def permuted(batch, w, order):
    """Batch and w with view j taken from view order[j]; partners follow their views"""
    inverse = np.argsort(order)
    shuffled = ViewBatch(sample_ids=batch.sample_ids[order], labels=batch.labels[order],
                         view_index=batch.view_index[order],
                         partner=inverse[batch.partner[order]])
    return shuffled, w[order]


DETERMINISTIC_LOSSES = {
    "nt-xent": lambda e, b, m: nt_xent(e, b, TAU),
    "supcon": lambda e, b, m: supcon(e, b, TAU),
    "sup-minority": lambda e, b, m: sup_minority(e, b, m, TAU),
    "sup-prototypes": lambda e, b, m: sup_prototypes(e, b, PrototypePair(p_maj=E0), m, TAU),
    "kcl-all-positives": lambda e, b, m: kcl(e, b, 100, TAU, RngStream(0, 6)),
    "partial-all": lambda e, b, m: partial_supervision(e, b, m, 1.0, 1.0, TAU, RngStream(0, 6)),
    "partial-none": lambda e, b, m: partial_supervision(e, b, m, 0.0, 0.0, TAU, RngStream(0, 6)),
}

SAMPLE_LABELS = st.lists(st.integers(0, 1), min_size=2, max_size=10)


@pytest.mark.parametrize("kind", sorted(DETERMINISTIC_LOSSES))
@given(sample_labels=SAMPLE_LABELS, seed=st.integers(0, 10_000))
def test_losses_ignore_view_order(kind, sample_labels, seed):
    loss = DETERMINISTIC_LOSSES[kind]
    batch, w = random_setup(sample_labels, seed=seed)
    order = np.random.default_rng(seed).permutation(len(batch))
    shuffled, shuffled_w = permuted(batch, w, order)
    base = loss(normalize_rows(w), batch, 1)
    moved = loss(normalize_rows(shuffled_w), shuffled, 1)
    assert moved.value == pytest.approx(base.value, abs=1e-12)
    np.testing.assert_allclose(moved.grad_w, base.grad_w[order], rtol=1e-12, atol=1e-12)


@given(sample_labels=SAMPLE_LABELS, seed=st.integers(0, 10_000))
def test_losses_are_symmetric_under_label_swap(sample_labels, seed):
    batch, w = random_setup(sample_labels, seed=seed)
    swapped = dataclasses.replace(batch, labels=1 - batch.labels)
    emb = normalize_rows(w)
    for loss in (lambda b, m: supcon(emb, b, TAU), lambda b, m: nt_xent(emb, b, TAU),
                 lambda b, m: sup_minority(emb, b, m, TAU)):
        base = loss(batch, 1)
        mirrored = loss(swapped, 0)
        assert mirrored.value == pytest.approx(base.value, abs=1e-12)
        np.testing.assert_allclose(mirrored.grad_w, base.grad_w, rtol=1e-12, atol=1e-12)


def near_collapsed_batch(n_maj_samples=18, n_min_samples=2, d=8, noise=0.02, seed=0):
    rng = np.random.default_rng(seed)
    batch = ViewBatch.layout([0] * n_maj_samples + [1] * n_min_samples)
    w = np.eye(d)[0] + noise * rng.standard_normal((len(batch), d))
    return batch, normalize_rows(w)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_minority_anchor_gradients_agree_between_supcon_and_sup_minority(seed):
    batch, emb = near_collapsed_batch(seed=seed)
    minority = batch.labels == 1
    full = supcon(emb, batch, 0.1)
    partial = sup_minority(emb, batch, 1, 0.1)
    np.testing.assert_allclose(partial.anchor_grad_w[minority], full.anchor_grad_w[minority],
                               rtol=0, atol=1e-14)
    majority_norms = [np.linalg.norm(out.anchor_grad_w[~minority], axis=1).mean()
                      for out in (partial, full)]
    assert majority_norms[0] > 2 * majority_norms[1]
