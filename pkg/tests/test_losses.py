"""Loss oracles, analytic-vs-numerical gradients, and algebraic identities.

Closed-form values below were worked out by hand from the definitions (state
noted next to each) rather than by running the implementation.
"""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logsumexp

from tailext.core import ClassStats, DataError, LabelSpace, build_label_space, derive_rng
from tailext.losses import (
    SilenceWeights,
    bal_ce,
    bal_ce_batch,
    bal_ce_merged,
    balanced_error,
    batch_loss,
    ns_ce,
    ns_ce_batch,
)


def fd_grad(fn, z, h=1e-5):
    """Central finite difference of a scalar fn at z."""
    g = np.zeros_like(z)
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = h
        g[i] = (fn(z + e) - fn(z - e)) / (2 * h)
    return g


def random_space(rng, max_total=10):
    L = int(rng.integers(1, max_total))
    K = int(rng.integers(0, max_total - L + 1))
    pairs = [(L + k, int(rng.integers(0, L))) for k in range(K)]
    return build_label_space(L, pairs)


class TestFrozenValues:
    def test_two_class_uniform(self):
        # z = (0, 0), counts (1, 1), y = 0: softmax is (1/2, 1/2)
        loss, grad = bal_ce(np.zeros(2), 0, ClassStats(np.array([1, 1])))
        assert loss == pytest.approx(0.6931471805599453, abs=1e-15)
        np.testing.assert_allclose(grad, [-0.5, 0.5], atol=1e-15)

    def test_count_offsets_enter_denominator(self):
        # z = 0 everywhere, counts (100, 10, 1), y = 2:
        # loss = log(111) - log(1), grad = n/111 - onehot
        loss, grad = bal_ce(np.zeros(3), 2, ClassStats(np.array([100, 10, 1])))
        assert loss == pytest.approx(4.709530201312334, rel=1e-14)
        np.testing.assert_allclose(
            grad, [100 / 111, 10 / 111, 1 / 111 - 1], rtol=1e-14
        )

    def test_uniform_counts_reduce_to_ce(self):
        # z = (2, 0), y = 0: loss = log(1 + e^-2)
        loss, grad = bal_ce(np.array([2.0, 0.0]), 0, ClassStats(np.array([1, 1])))
        assert loss == pytest.approx(0.12692801104297263, rel=1e-14)
        np.testing.assert_allclose(
            grad, [-0.11920292202211755, 0.11920292202211755], rtol=1e-13
        )

    def test_silencing_discounts_neighbor_term(self):
        # One target, one aux queried from it, equal counts, z = (0, 0), y = 0:
        # loss = log(1 + 0.1), grad = (-1/11, 1/11)
        space = build_label_space(1, [(1, 0)])
        stats = ClassStats(np.array([1, 1]))
        loss, grad = ns_ce(np.zeros(2), 0, stats, space, lambda_s=0.1)
        assert loss == pytest.approx(0.09531017980432486, rel=1e-14)
        np.testing.assert_allclose(grad, [-1 / 11, 1 / 11], rtol=1e-14)

    def test_full_silencing_removes_neighbor(self):
        # lambda_s = 0: the aux term vanishes, only the true-class term
        # survives, so the loss is exactly 0 regardless of the aux logit.
        space = build_label_space(1, [(1, 0)])
        stats = ClassStats(np.array([1, 1]))
        loss, grad = ns_ce(np.array([0.0, 500.0]), 0, stats, space, lambda_s=0.0)
        assert loss == 0.0
        np.testing.assert_allclose(grad, [0.0, 0.0], atol=1e-15)


class TestGradients:
    def test_bal_ce_matches_finite_difference(self):
        rng = derive_rng(11, "fd-balce")
        for _ in range(60):
            n = int(rng.integers(2, 10))
            stats = ClassStats(rng.integers(1, 500, size=n))
            z = rng.normal(scale=3.0, size=n)
            y = int(rng.integers(0, n))
            _, grad = bal_ce(z, y, stats)
            num = fd_grad(lambda v: bal_ce(v, y, stats)[0], z)
            np.testing.assert_allclose(grad, num, rtol=1e-4, atol=1e-6)

    def test_ns_ce_matches_finite_difference(self):
        rng = derive_rng(12, "fd-nsce")
        for _ in range(60):
            space = random_space(rng)
            M = space.num_classes
            stats = ClassStats(rng.integers(1, 500, size=M))
            z = rng.normal(scale=3.0, size=M)
            y = int(rng.integers(0, M))
            lam = float(rng.choice([0.0, 0.1, 0.5, 1.0]))
            _, grad = ns_ce(z, y, stats, space, lam)
            num = fd_grad(lambda v: ns_ce(v, y, stats, space, lam)[0], z)
            np.testing.assert_allclose(grad, num, rtol=1e-4, atol=1e-6)

    @given(st.integers(0, 10**6))
    @settings(max_examples=40, deadline=None)
    def test_gradient_rows_sum_to_zero(self, seed):
        rng = derive_rng(seed, "gradsum")
        space = random_space(rng)
        M = space.num_classes
        stats = ClassStats(rng.integers(1, 100, size=M))
        Z = rng.normal(size=(4, M))
        labels = rng.integers(0, M, size=4)
        _, g1 = bal_ce_batch(Z, labels, stats)
        _, g2 = ns_ce_batch(Z, labels, stats, space, 0.3)
        np.testing.assert_allclose(g1.sum(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(g2.sum(axis=1), 0.0, atol=1e-12)


class TestIdentities:
    def test_uniform_counts_equal_plain_ce(self):
        # independent oracle: logsumexp from scipy
        rng = derive_rng(21, "id-ce")
        for _ in range(1000):
            n = int(rng.integers(2, 12))
            z = rng.normal(scale=5.0, size=n)
            y = int(rng.integers(0, n))
            loss, _ = bal_ce(z, y, ClassStats(np.ones(n, dtype=int)))
            want = float(logsumexp(z) - z[y])
            assert abs(loss - want) < 1e-12

    def test_lambda_one_equals_merged_bal_ce(self):
        rng = derive_rng(22, "id-merged")
        for _ in range(1000):
            space = random_space(rng)
            M = space.num_classes
            stats = ClassStats(rng.integers(1, 400, size=M))
            z = rng.normal(scale=4.0, size=M)
            y = int(rng.integers(0, M))
            a, ga = ns_ce(z, y, stats, space, lambda_s=1.0)
            b, gb = bal_ce_merged(z, y, stats)
            assert abs(a - b) < 1e-12
            np.testing.assert_allclose(ga, gb, atol=1e-12)

    @given(st.integers(0, 10**6), st.floats(-50, 50))
    @settings(max_examples=50, deadline=None)
    def test_shift_invariance(self, seed, c):
        rng = derive_rng(seed, "shift")
        space = random_space(rng)
        M = space.num_classes
        stats = ClassStats(rng.integers(1, 300, size=M))
        z = rng.normal(size=M)
        y = int(rng.integers(0, M))
        a, _ = ns_ce(z, y, stats, space, 0.25)
        b, _ = ns_ce(z + c, y, stats, space, 0.25)
        assert a == pytest.approx(b, rel=1e-10, abs=1e-10)

    @given(st.integers(0, 10**6))
    @settings(max_examples=50, deadline=None)
    def test_loss_nondecreasing_in_lambda(self, seed):
        rng = derive_rng(seed, "lam-mono")
        space = build_label_space(3, [(3, 0), (4, 0), (5, 2)])
        stats = ClassStats(rng.integers(1, 200, size=6))
        z = rng.normal(scale=3.0, size=6)
        losses = [ns_ce(z, 0, stats, space, lam)[0] for lam in (0.0, 0.1, 0.5, 1.0)]
        for lo, hi in zip(losses, losses[1:]):
            assert hi >= lo - 1e-12

    def test_zero_lambda_equals_dropping_silenced_classes(self):
        # Shift safety: with lambda_s = 0 the silenced exponents must not
        # participate in the max shift, so the value equals a recomputation on
        # the reduced class set even when a silenced logit dominates.
        space = build_label_space(2, [(2, 0)])
        stats = ClassStats(np.array([50, 20, 7]))
        z = np.array([1.0, -2.0, 300.0])
        loss, grad = ns_ce(z, 0, stats, space, 0.0)
        keep = [0, 1]
        sub, gs = ns_ce(
            z[keep], 0, ClassStats(stats.counts[keep]), LabelSpace(num_target=2), 0.0
        )
        assert loss == pytest.approx(sub, rel=1e-14)
        np.testing.assert_allclose(grad[keep], gs, atol=1e-14)
        assert grad[2] == 0.0


class TestBatchForms:
    def test_batch_matches_single_sample_loop(self):
        rng = derive_rng(31, "batch")
        space = random_space(rng)
        M = space.num_classes
        stats = ClassStats(rng.integers(1, 300, size=M))
        Z = rng.normal(size=(16, M))
        labels = rng.integers(0, M, size=16)
        losses, grads = ns_ce_batch(Z, labels, stats, space, 0.1)
        for b in range(16):
            l, g = ns_ce(Z[b], int(labels[b]), stats, space, 0.1)
            assert losses[b] == pytest.approx(l, rel=1e-14)
            np.testing.assert_allclose(grads[b], g, atol=1e-14)

    def test_batch_loss_mean_and_dispatch(self):
        stats = ClassStats(np.array([1, 1]))
        batch = [(np.array([2.0, 0.0]), 0), (np.zeros(2), 0)]
        mean, grads = batch_loss(batch, "bal_ce", stats)
        want = (0.12692801104297263 + 0.6931471805599453) / 2
        assert mean == pytest.approx(want, rel=1e-14)
        assert grads.shape == (2, 2)

    def test_batch_loss_errors(self):
        stats = ClassStats(np.array([1, 1]))
        with pytest.raises(DataError):
            batch_loss([], "bal_ce", stats)
        with pytest.raises(DataError):
            batch_loss([(np.zeros(2), 0)], "ns_ce", stats)  # missing space
        with pytest.raises(DataError):
            batch_loss([(np.zeros(2), 0)], "focal", stats)

    def test_input_validation(self):
        stats = ClassStats(np.array([1, 1]))
        space = LabelSpace(num_target=2)
        with pytest.raises(DataError):
            bal_ce(np.array([np.nan, 0.0]), 0, stats)
        with pytest.raises(DataError):
            bal_ce(np.zeros(3), 0, stats)
        with pytest.raises(DataError):
            bal_ce(np.zeros(2), 2, stats)
        with pytest.raises(DataError):
            ns_ce_batch(np.zeros((1, 2)), np.array([5]), stats, space, 0.1)
        with pytest.raises(DataError):
            ns_ce_batch(np.zeros((1, 3)), np.array([0]), stats, space, 0.1)


class TestSilenceWeights:
    def test_pair_rules(self):
        # targets 0..2, aux 3 and 4 both queried from target 1
        space = build_label_space(3, [(3, 1), (4, 1)])
        w = SilenceWeights(space, 0.2)
        assert w.pair_weight(1, 3) == 0.2
        assert w.pair_weight(3, 1) == 0.2
        assert w.pair_weight(4, 1) == 0.2
        assert w.pair_weight(3, 4) == 1.0  # siblings do not silence each other
        assert w.pair_weight(0, 3) == 1.0  # not its querying target
        assert w.pair_weight(0, 1) == 1.0
        assert w.pair_weight(3, 3) == 1.0

    def test_silenced_indices(self):
        space = build_label_space(3, [(3, 1), (4, 1)])
        w = SilenceWeights(space, 0.0)
        np.testing.assert_array_equal(w.silenced_indices(1), [3, 4])
        np.testing.assert_array_equal(w.silenced_indices(0), [])
        np.testing.assert_array_equal(w.silenced_indices(3), [1])

    def test_negative_lambda_rejected_and_gt_one_warns(self):
        space = build_label_space(1, [(1, 0)])
        with pytest.raises(DataError):
            SilenceWeights(space, -0.5)
        with pytest.warns(UserWarning):
            SilenceWeights(space, 1.2)


class TestBalancedError:
    def test_hand_counted(self):
        # class 0: 3 samples 1 wrong; class 1: 1 sample 0 wrong
        be = balanced_error([0, 1, 1, 0], [0, 1, 0, 0], num_classes=2)
        assert be.sum == pytest.approx(1 / 3, rel=1e-15)
        assert be.mean == pytest.approx(1 / 6, rel=1e-15)

    def test_missing_class_rejected(self):
        with pytest.raises(DataError):
            balanced_error([0, 0], [0, 0], num_classes=2)

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            balanced_error([0, 1], [0], num_classes=2)
