import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from neighbor_transfer.diffcore import Graph, backward, finite_difference_check
from neighbor_transfer.models import MlpSpec, ModelBundle, ProjectionSpec, init_params
from neighbor_transfer.neighborhood import assemble_batch, build_index
from neighbor_transfer.objectives import (LOG_FLOOR, ObjectiveConfig, alpha_regularizer,
                                          annotation_loss, empirical_risk, neighbor_transfer_loss,
                                          sequence_transfer_loss, similarity_regularizer,
                                          smoothed_targets, total_objective)
from neighbor_transfer.synthgen import generate


def log_softmax(z):
    z = np.asarray(z, dtype=np.float64)
    return z - z.max() - np.log(np.exp(z - z.max()).sum())


class TestPointwise:
    def test_cross_entropy_hand_case(self):
        z = np.array([1.0, 2.0, 0.5])
        assert annotation_loss(z, 1).item() == pytest.approx(-log_softmax(z)[1], abs=1e-14)

    def test_log_floor(self):
        assert annotation_loss(np.array([0.0, 1e4]), 0).item() == pytest.approx(-LOG_FLOOR)

    def test_bce_positives_and_negatives(self):
        z = np.array([0.0, 2.0, -1.0])
        expected = (math.log(2) + math.log1p(math.exp(-2.0)) + math.log1p(math.exp(-1.0))) / 3
        assert annotation_loss(z, [0, 1], "sigmoid-bce", negatives=[2]).item() == pytest.approx(expected)

    def test_empirical_risk_averages_annotations(self):
        z = np.array([[0.0, 1.0], [2.0, 0.0]])
        lp = np.array([log_softmax(r) for r in z])
        expected = (-(lp[0, 0] + lp[0, 1]) / 2 - lp[1, 0]) / 2
        assert empirical_risk(z, [[0, 1], [0]]).item() == pytest.approx(expected, abs=1e-14)

    def test_empty_annotation_set(self):
        with pytest.raises(ValueError, match="empty"):
            empirical_risk(np.zeros((1, 2)), [[]])


class TestTransfer:
    def test_hand_case(self):
        z = np.array([0.2, -0.3, 1.0])
        lp = log_softmax(z)
        got = neighbor_transfer_loss(z, 0, [1, 2], [0.5, 0.25], lam=2.0).item()
        assert got == pytest.approx(-lp[0] + 2.0 / 2 * (-0.5 * lp[1] - 0.25 * lp[2]), abs=1e-14)

    def test_lambda_zero_is_plain_loss(self):
        z = np.array([0.2, -0.3, 1.0])
        assert neighbor_transfer_loss(z, 2, [0], [1.0], lam=0.0).item() == annotation_loss(z, 2).item()

    def test_count_mismatch(self):
        with pytest.raises(ValueError, match="neighbor labels"):
            neighbor_transfer_loss(np.zeros(3), 0, [1, 2], [0.5], lam=1.0)

    def test_similarity_regularizer(self):
        assert similarity_regularizer([0.5, 1.0], mu=2.0).item() == pytest.approx(2.0 / 2 * 0.25)

    def test_k_gradient_pulls_up_when_mu_dominates(self):
        g = Graph()
        k = g.param(np.array([0.2, 0.6]))
        z = np.array([0.0, 1.0, -1.0])
        lam, mu = 0.5, 10.0
        backward(neighbor_transfer_loss(z, 0, [1, 2], k, lam) + similarity_regularizer(k, mu))
        assert np.all(k.grad < 0)

    @given(st.lists(st.integers(0, 4), min_size=1, max_size=6).flatmap(
        lambda c: st.tuples(st.just(c), arrays(np.float64, len(c), elements=st.floats(0.01, 1.0, width=64)))),
        st.randoms(use_true_random=False))
    def test_smoothed_targets_normalized_and_order_free(self, case, rnd):
        classes, k = case
        t = smoothed_targets(classes, k, 5)
        assert abs(t.sum() - 1.0) < 1e-12
        perm = list(range(len(classes)))
        rnd.shuffle(perm)
        t2 = smoothed_targets([classes[p] for p in perm], k[perm], 5)
        assert np.allclose(t, t2, atol=1e-15)

    def test_smoothed_targets_zero_mass(self):
        with pytest.raises(ValueError, match="zero"):
            smoothed_targets([0, 1], [0.0, 0.0], 3)


class TestSequence:
    def test_transfer_hand_case(self):
        lps = [np.log([0.5, 0.25]), np.log([0.1])]
        alphas = [np.array([1.0, 0.5]), np.array([0.2])]
        got = sequence_transfer_loss(lps, alphas, [0.8, 0.4], lam=1.5).item()
        expected = -1.5 / 2 * (0.8 * (np.log(0.5) + 0.5 * np.log(0.25)) + 0.4 * 0.2 * np.log(0.1))
        assert got == pytest.approx(expected, abs=1e-14)

    def test_alpha_regularizer_hand_case(self):
        got = alpha_regularizer([np.array([0.5, 0.25]), np.array([1.0])], [1.0, 0.5], mu=2.0, T=2).item()
        assert got == pytest.approx(2.0 / (2 * 2) * (0.25 ** 2 + 0.5 * 0.0))

    @given(arrays(np.float64, 3, elements=st.floats(0.01, 0.99, width=64)),
           arrays(np.float64, 3, elements=st.floats(0.0, 1.0, width=64)),
           st.integers(0, 2), st.floats(0.0, 0.5, width=64))
    def test_monotone_in_alpha_and_nll(self, p, alpha, t, bump):
        lp = np.log(p)
        base = sequence_transfer_loss([lp], [alpha], [0.7], lam=1.0).item()
        a2 = alpha.copy()
        a2[t] += bump
        assert sequence_transfer_loss([lp], [a2], [0.7], lam=1.0).item() >= base - 1e-12
        lp2 = lp.copy()
        lp2[t] -= bump  # larger -log p
        assert sequence_transfer_loss([lp2], [alpha], [0.7], lam=1.0).item() >= base - 1e-12

    def test_alpha_length_mismatch(self):
        with pytest.raises(ValueError, match="alpha length"):
            sequence_transfer_loss([np.zeros(2)], [np.zeros(3)], [1.0], lam=1.0)


def small_setup(kind="multiclass-toy", mode="ours", lam=0.7, mu=1.3):
    if kind == "multiclass-toy":
        ds = generate(kind, 0, clusters=3, classes=4, points_per_cluster=6, input_dim=5)
        loss_kind, head = "softmax-ce", "softmax-multiclass"
    else:
        ds = generate(kind, 0, clusters=3, labels=8, points_per_cluster=6, positives_per_cluster=3,
                      input_dim=5, annotation={"count": 2})
        loss_kind, head = "sigmoid-bce", "sigmoid-multilabel"
    spec, pspec = MlpSpec((5, 6, ds.n_outputs), head), ProjectionSpec(5, 4, (6,))
    bundle = ModelBundle(init_params(spec, 1), init_params(pspec, 2), spec, pspec)
    idx = build_index(bundle.embed(ds.features), 3)
    batch = assemble_batch(ds, idx, [0, 5, 11, 16])
    if loss_kind == "sigmoid-bce":
        batch.negatives = [[j for j in range(ds.n_outputs) if j not in a][:2] for a in batch.annotations]
    return ObjectiveConfig(lam=lam, mu=mu, mode=mode, loss_kind=loss_kind), batch, bundle


class TestTotalObjective:
    @pytest.mark.parametrize("kind", ["multiclass-toy", "multilabel-toy"])
    @pytest.mark.parametrize("mode", ["ours", "mle", "ce-l2", "augment", "no-refine"])
    def test_gradients(self, kind, mode):
        cfg, batch, bundle = small_setup(kind, mode)
        tnames, pnames = sorted(bundle.task), sorted(bundle.projection)

        def f(*ts):
            lifted = (dict(zip(tnames, ts[:len(tnames)])), dict(zip(pnames, ts[len(tnames):])))
            return total_objective(cfg, batch, bundle, lifted=lifted).loss

        params = [bundle.task[k] for k in tnames] + [bundle.projection[k] for k in pnames]
        assert finite_difference_check(f, params) < 1e-4

    def test_lambda_mu_zero_matches_mle_bitwise(self):
        cfg, batch, bundle = small_setup(mode="ours", lam=0.0, mu=0.0)
        ours = total_objective(cfg, batch, bundle)
        mle = total_objective(ObjectiveConfig(mode="mle"), batch, bundle)
        backward(ours.loss)
        backward(mle.loss)
        assert ours.loss.item() == mle.loss.item()
        for k in bundle.task:
            assert np.array_equal(ours.task[k].grad, mle.task[k].grad)

    def test_augment_uses_unit_similarity(self):
        cfg, batch, bundle = small_setup(mode="augment")
        assert np.all(total_objective(cfg, batch, bundle).k.value == 1.0)

    def test_no_refine_projection_is_constant(self):
        cfg, batch, bundle = small_setup(mode="no-refine")
        res = total_objective(cfg, batch, bundle)
        backward(res.loss)
        assert all(not t.requires_grad for t in res.projection.values())

    def test_ce_l2_adds_penalty(self):
        _, batch, bundle = small_setup()
        mle = total_objective(ObjectiveConfig(mode="mle"), batch, bundle).loss.item()
        l2 = total_objective(ObjectiveConfig(mode="ce-l2", l2_weight=0.1), batch, bundle).loss.item()
        sq = sum(float((v ** 2).sum()) for v in bundle.task.values())
        assert l2 == pytest.approx(mle + 0.1 * sq, rel=1e-12)

    def test_kind_mismatch(self):
        cfg, batch, bundle = small_setup()
        with pytest.raises(ValueError, match="region bags"):
            total_objective(ObjectiveConfig(loss_kind="sequence-nll"), batch, bundle)

