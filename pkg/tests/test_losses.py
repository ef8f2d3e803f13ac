import numpy as np
import pytest

from oracles import rel_error

from vidrep.losses import (
    CircleParams,
    ScoreSet,
    anchor_gradient_analytic,
    circle_loss,
    evaluate_loss,
    infonce_loss,
    negative_contribution,
    similarity_scores,
    softmax_loss,
)
from vidrep.validation import DegenerateInputError, MalformedInputError


def fd_score_gradient(fn, s_p, s_n, h=1e-6):
    """Central differences of a loss value in each similarity score."""
    d_sp = (fn(ScoreSet(s_p + h, s_n)).value - fn(ScoreSet(s_p - h, s_n)).value) / (2 * h)
    d_sn = np.zeros_like(s_n)
    for j in range(s_n.size):
        up, dn = s_n.copy(), s_n.copy()
        up[j] += h
        dn[j] -= h
        d_sn[j] = (fn(ScoreSet(s_p, up)).value - fn(ScoreSet(s_p, dn)).value) / (2 * h)
    return np.concatenate([[d_sp], d_sn])


def random_scores(rng, n_neg=None, lo=-0.99, hi=0.99):
    n = n_neg if n_neg is not None else int(rng.integers(1, 8))
    return float(rng.uniform(lo, hi)), rng.uniform(lo, hi, size=n)


class TestScoreSet:
    def test_requires_negatives(self):
        with pytest.raises(MalformedInputError):
            ScoreSet(0.5, np.array([]))

    def test_rejects_out_of_range(self):
        with pytest.raises(MalformedInputError):
            ScoreSet(1.5, np.array([0.0]))

    def test_rejects_non_finite(self):
        with pytest.raises(MalformedInputError):
            ScoreSet(0.1, np.array([np.nan]))


class TestSimilarityScores:
    def test_identical_vectors(self):
        s = similarity_scores([1.0, 0.0], [1.0, 0.0], [[0.0, 1.0]])
        assert s.s_p == 1.0

    def test_orthogonal_negative(self):
        s = similarity_scores([1.0, 0.0], [1.0, 0.0], [[0.0, 1.0]])
        assert s.s_n[0] == 0.0

    def test_scale_invariance(self):
        s = similarity_scores([2.0, 0.0], [5.0, 0.0], [[0.0, -3.0]])
        assert s.s_p == 1.0

    def test_zero_norm_rejected(self):
        with pytest.raises(DegenerateInputError):
            similarity_scores([0.0, 0.0], [1.0, 0.0], [[0.0, 1.0]])


class TestSoftmaxLoss:
    def test_uniform_scores_give_log_n(self):
        for n in (2, 5, 9):
            scores = ScoreSet(0.3, np.full(n - 1, 0.3))
            assert abs(softmax_loss(scores).value - np.log(n)) < 1e-12

    def test_separated_pair_value(self):
        out = softmax_loss(ScoreSet(1.0, np.array([-1.0])))
        assert abs(out.value - np.log(1.0 + np.exp(-2.0))) < 1e-12

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            s_p, s_n = random_scores(rng)
            out = softmax_loss(ScoreSet(s_p, s_n))
            analytic = np.concatenate([[out.d_sp], out.d_sn])
            fd = fd_score_gradient(softmax_loss, s_p, s_n)
            assert rel_error(analytic, fd) < 1e-6

    def test_monotonicity(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            s_p, s_n = random_scores(rng, lo=-0.9, hi=0.9)
            base = softmax_loss(ScoreSet(s_p, s_n)).value
            assert softmax_loss(ScoreSet(s_p + 0.05, s_n)).value < base
            bumped = s_n.copy()
            bumped[0] += 0.05
            assert softmax_loss(ScoreSet(s_p, bumped)).value > base


class TestInfonceLoss:
    def test_reduces_to_softmax_at_tau_one_exactly(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            s_p, s_n = random_scores(rng, lo=-1.0, hi=1.0)
            a = infonce_loss(ScoreSet(s_p, s_n), tau=1.0)
            b = softmax_loss(ScoreSet(s_p, s_n))
            assert a.value == b.value
            assert a.d_sp == b.d_sp
            assert np.array_equal(a.d_sn, b.d_sn)

    def test_direct_evaluation_oracle(self):
        s_p, s_n, tau = 0.9, np.array([0.1, -0.5]), 0.07
        expected = -np.log(
            np.exp(s_p / tau) / (np.exp(s_p / tau) + np.exp(s_n / tau).sum())
        )
        out = infonce_loss(ScoreSet(s_p, s_n), tau=tau)
        assert abs(out.value - expected) < 1e-12

    def test_paper_strongest_temperature_is_usable(self):
        out = infonce_loss(ScoreSet(0.8, np.array([0.2, -0.4])), tau=1.0 / 256.0)
        assert np.isfinite(out.value) and out.value >= 0.0

    def test_gradients_match_finite_differences(self):
        # keep scores tight enough that the tau-scaled softmax does not
        # saturate below finite-difference resolution
        rng = np.random.default_rng(3)
        checked = 0
        for _ in range(100):
            s_p, s_n = random_scores(rng, lo=-0.3, hi=0.3)
            fn = lambda s: infonce_loss(s, tau=0.07)
            out = fn(ScoreSet(s_p, s_n))
            analytic = np.concatenate([[out.d_sp], out.d_sn])
            if np.linalg.norm(analytic) < 1e-4:
                continue
            fd = fd_score_gradient(fn, s_p, s_n, h=1e-7)
            assert rel_error(analytic, fd) < 1e-5
            checked += 1
        assert checked >= 50

    def test_non_positive_tau_rejected(self):
        with pytest.raises(MalformedInputError):
            infonce_loss(ScoreSet(0.5, np.array([0.0])), tau=0.0)

    def test_monotonicity(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            s_p, s_n = random_scores(rng, lo=-0.9, hi=0.9)
            base = infonce_loss(ScoreSet(s_p, s_n), tau=0.07).value
            assert infonce_loss(ScoreSet(s_p + 0.05, s_n), tau=0.07).value < base
            bumped = s_n.copy()
            bumped[0] += 0.05
            assert infonce_loss(ScoreSet(s_p, bumped), tau=0.07).value > base


class TestCircleLoss:
    def test_defaults(self):
        params = CircleParams()
        assert (params.gamma, params.margin) == (256.0, 0.25)

    def test_easy_negatives_reduce_to_softplus_of_single_term(self):
        # s_p = 1, all s_n <= -m: the negative weights clamp to zero, so
        # every negative logit is exactly 0 and the value collapses to
        # log(1 + (N-1) exp(-gamma * m * m))
        for gamma in (4.0, 256.0):
            params = CircleParams(gamma=gamma, margin=0.25)
            s_n = np.array([-0.3, -0.9, -1.0])
            out = circle_loss(ScoreSet(1.0, s_n), params)
            expected = np.log1p(len(s_n) * np.exp(-gamma * 0.25 * 0.25))
            assert abs(out.value - expected) < 1e-12 * max(1.0, abs(expected))

    def test_value_non_negative_and_finite(self):
        rng = np.random.default_rng(5)
        for _ in range(300):
            s_p, s_n = random_scores(rng, lo=-1.0, hi=1.0)
            out = circle_loss(ScoreSet(s_p, s_n))
            assert np.isfinite(out.value) and out.value >= 0.0
            assert out.d_sp <= 0.0

    def test_gradients_match_finite_differences_away_from_kinks(self):
        rng = np.random.default_rng(6)
        params = CircleParams(gamma=16.0, margin=0.25)
        checked = 0
        for _ in range(200):
            s_p, s_n = random_scores(rng)
            if abs(s_p - 1.25) < 1e-3 or np.any(np.abs(s_n + 0.25) < 1e-3):
                continue
            fn = lambda s: circle_loss(s, params)
            out = fn(ScoreSet(s_p, s_n))
            analytic = np.concatenate([[out.d_sp], out.d_sn])
            fd = fd_score_gradient(fn, s_p, s_n)
            assert rel_error(analytic, fd) < 1e-5
            checked += 1
        assert checked >= 150

    def test_gradients_at_default_gamma(self):
        # gamma=256 saturates most random draws; pick a mild instance where
        # finite differences stay resolvable
        params = CircleParams()
        s_p, s_n = 0.4, np.array([0.32, 0.28])
        fn = lambda s: circle_loss(s, params)
        out = fn(ScoreSet(s_p, s_n))
        analytic = np.concatenate([[out.d_sp], out.d_sn])
        fd = fd_score_gradient(fn, s_p, s_n, h=1e-7)
        assert rel_error(analytic, fd) < 1e-5

    def test_decreasing_in_positive_score(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            s_p = float(rng.uniform(-0.9, 0.9))
            s_n = rng.uniform(-0.9, 0.9, size=3)
            base = circle_loss(ScoreSet(s_p, s_n)).value
            assert circle_loss(ScoreSet(s_p + 0.05, s_n)).value < base

    def test_increasing_in_active_negative_scores(self):
        # the adaptive weight makes the value non-monotone in s_n below 0;
        # strict growth holds on the positive side of the hinge. Checked at a
        # moderate gamma: at 256 the increment of a dominated negative falls
        # below float64 resolution, so there only >= is representable.
        rng = np.random.default_rng(8)
        mild = CircleParams(gamma=8.0, margin=0.25)
        for _ in range(100):
            s_p = float(rng.uniform(-0.9, 0.9))
            s_n = rng.uniform(0.05, 0.9, size=3)
            base = circle_loss(ScoreSet(s_p, s_n), mild).value
            bumped = s_n.copy()
            bumped[0] += 0.05
            assert circle_loss(ScoreSet(s_p, bumped), mild).value > base
            base256 = circle_loss(ScoreSet(s_p, s_n)).value
            assert circle_loss(ScoreSet(s_p, bumped)).value >= base256

    def test_hinge_kink_uses_flat_side_subgradient(self):
        out = circle_loss(ScoreSet(0.5, np.array([-0.25])), CircleParams(margin=0.25))
        assert out.d_sn[0] == 0.0

    def test_overflow_free_at_extreme_scores(self):
        out = circle_loss(ScoreSet(-1.0, np.array([1.0, 1.0])))
        assert np.isfinite(out.value)


class TestLossOutputContract:
    def test_values_non_negative_and_positive_gradient_non_positive(self):
        rng = np.random.default_rng(20)
        for _ in range(300):
            s_p, s_n = random_scores(rng, lo=-1.0, hi=1.0)
            scores = ScoreSet(s_p, s_n)
            for out in (softmax_loss(scores), infonce_loss(scores, tau=0.07),
                        circle_loss(scores)):
                assert np.isfinite(out.value) and out.value >= 0.0
                assert out.d_sp <= 0.0
                assert np.all(np.isfinite(out.d_sn))


class TestEvaluateLoss:
    def test_dispatch(self):
        scores = ScoreSet(0.5, np.array([0.1, -0.2]))
        assert evaluate_loss(scores, "softmax").value == softmax_loss(scores).value
        assert evaluate_loss(scores, "infonce", tau=0.2).value == infonce_loss(scores, 0.2).value
        assert evaluate_loss(scores, "circle").value == circle_loss(scores).value

    def test_unknown_loss_rejected(self):
        with pytest.raises(MalformedInputError):
            evaluate_loss(ScoreSet(0.5, np.array([0.1])), "triplet")


class TestAnchorGradient:
    def test_colinear_positive_term_vanishes(self):
        # with z_p == z_a the positive part of the projected direction is 0,
        # so the gradient comes from the negatives alone
        rng = np.random.default_rng(9)
        w_a = rng.standard_normal(6)
        negs = [rng.standard_normal(6) for _ in range(3)]
        g_full = anchor_gradient_analytic(w_a, w_a * 2.0, negs)

        z_a = w_a / np.linalg.norm(w_a)
        scores = similarity_scores(w_a, w_a * 2.0, negs)
        exps = np.exp(np.concatenate([[scores.s_p], scores.s_n]))
        sigma = exps / exps.sum()
        z_n = np.stack([n / np.linalg.norm(n) for n in negs])
        negatives_only = sigma[1:] @ z_n
        expected = (negatives_only - z_a * (z_a @ negatives_only)) / np.linalg.norm(w_a)
        np.testing.assert_allclose(g_full, expected, atol=1e-12)

    def test_matches_finite_differences_through_normalization(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            d = 4
            w_a = rng.standard_normal(d) * rng.uniform(0.5, 2.0)
            w_p = rng.standard_normal(d)
            negs = [rng.standard_normal(d) for _ in range(3)]
            g = anchor_gradient_analytic(w_a, w_p, negs)

            def value(w):
                return softmax_loss(similarity_scores(w, w_p, negs)).value

            fd = np.zeros(d)
            h = 1e-5
            for i in range(d):
                up, dn = w_a.copy(), w_a.copy()
                up[i] += h
                dn[i] -= h
                fd[i] = (value(up) - value(dn)) / (2 * h)
            assert rel_error(g, fd) < 1e-5

    def test_orthogonal_to_normalized_anchor(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            w_a = rng.standard_normal(8) * 3.0
            g = anchor_gradient_analytic(
                w_a, rng.standard_normal(8), [rng.standard_normal(8) for _ in range(4)]
            )
            assert abs(float(g @ (w_a / np.linalg.norm(w_a)))) < 1e-8


class TestNegativeContribution:
    def test_zero_at_minus_one_exactly(self):
        scores = ScoreSet(0.5, np.array([-1.0, 0.3]))
        assert negative_contribution(scores, 0) == 0.0

    def test_zero_at_plus_one(self):
        scores = ScoreSet(0.5, np.array([1.0, 0.3]))
        assert negative_contribution(scores, 0) == 0.0

    def test_hard_negative_beats_easy_negative(self):
        rng = np.random.default_rng(12)
        for _ in range(200):
            s_p = float(rng.uniform(-0.9, 0.9))
            extras = rng.uniform(-0.9, 0.9, size=int(rng.integers(0, 4)))
            s_n = np.concatenate([[-0.99, 0.0], extras])
            scores = ScoreSet(s_p, s_n)
            assert negative_contribution(scores, 1) > negative_contribution(scores, 0)

    def test_index_out_of_range(self):
        with pytest.raises(IndexError):
            negative_contribution(ScoreSet(0.5, np.array([0.0])), 3)
