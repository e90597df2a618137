import numpy as np
import pytest

from eraps.core import ProbVector, RegParams
from eraps.scores import (descending_order, mass_above, rank_of, raps_score,
                          score_all_labels, scores_at_labels)

P = [0.5, 0.3, 0.2]


class TestMassAbove:
    def test_top_label_has_no_mass_above(self):
        assert mass_above(P, 0) == 0.0

    def test_middle_label(self):
        assert mass_above(P, 1) == 0.5

    def test_bottom_label(self):
        assert abs(mass_above(P, 2) - 0.8) < 1e-12

    def test_ties_contribute_nothing(self):
        for c in range(4):
            assert mass_above([0.25, 0.25, 0.25, 0.25], c) == 0.0

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            mass_above(P, 3)


class TestRankOf:
    def test_ranks(self):
        assert [rank_of(P, c) for c in range(3)] == [1, 2, 3]

    def test_tied_labels_share_best_rank(self):
        p = [0.4, 0.4, 0.2]
        assert rank_of(p, 0) == 1
        assert rank_of(p, 1) == 1
        assert rank_of(p, 2) == 3

    def test_uniform_all_rank_one(self):
        for c in range(4):
            assert rank_of([0.25] * 4, c) == 1


class TestRapsScore:
    def test_pinned_example(self):
        # mass 0.5, jitter 0.3 * 0.5, penalty 1 * (2 - 1)
        got = raps_score(P, 1, 0.5, RegParams(lam=1.0, k_reg=1))
        assert abs(got - 1.65) < 1e-12

    def test_no_penalty_when_lam_zero(self):
        got = raps_score(P, 2, 0.5, RegParams(lam=0.0, k_reg=1))
        assert abs(got - 0.9) < 1e-12

    def test_no_penalty_when_rank_within_k_reg(self):
        got = raps_score(P, 1, 0.0, RegParams(lam=5.0, k_reg=2))
        assert abs(got - 0.5) < 1e-12

    def test_u_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            raps_score(P, 0, 1.5, RegParams())
        with pytest.raises(ValueError):
            raps_score(P, 0, -0.1, RegParams())

    def test_accepts_prob_vector(self):
        got = raps_score(ProbVector(P), 1, 0.5, RegParams(lam=1.0, k_reg=1))
        assert abs(got - 1.65) < 1e-12


class TestScoreAllLabels:
    def test_pinned_example_values_and_order(self):
        scored = score_all_labels(P, 0.5, RegParams(lam=1.0, k_reg=1))
        assert [sl.label for sl in scored] == [0, 1, 2]
        expected = [0.25, 1.65, 2.90]
        for sl, e in zip(scored, expected):
            assert abs(sl.score - e) < 1e-12

    def test_tie_order_is_ascending_label(self):
        scored = score_all_labels([0.4, 0.2, 0.4], 0.0, RegParams())
        assert [sl.label for sl in scored] == [0, 2, 1]

    def test_matches_scalar_scoring(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            p = rng.dirichlet(np.ones(rng.integers(2, 9)))
            u = rng.random()
            reg = RegParams(rng.random() * 3, int(rng.integers(1, len(p) + 1)))
            for sl in score_all_labels(p, u, reg):
                assert sl.score == raps_score(p, sl.label, u, reg)


class TestScoreProperties:
    def test_nondecreasing_along_descending_order(self):
        rng = np.random.default_rng(2)
        for _ in range(10_000):
            k = int(rng.integers(2, 8))
            p = rng.dirichlet(np.ones(k) * rng.uniform(0.2, 5.0))
            u = rng.random()
            reg = RegParams(rng.random() * 5, int(rng.integers(1, k + 1)))
            s = [sl.score for sl in score_all_labels(p, u, reg)]
            assert all(a <= b for a, b in zip(s, s[1:]))

    def test_score_nondecreasing_in_lam(self):
        rng = np.random.default_rng(3)
        for _ in range(500):
            p = rng.dirichlet(np.ones(5))
            u = rng.random()
            c = int(rng.integers(0, 5))
            k = int(rng.integers(1, 6))
            lo = raps_score(p, c, u, RegParams(0.5, k))
            hi = raps_score(p, c, u, RegParams(2.0, k))
            assert lo <= hi

    def test_tied_labels_get_identical_scores(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            base = rng.dirichlet(np.ones(3))
            p = np.array([base[0], base[0], base[1], base[2]]) / (1 + base[0])
            u = rng.random()
            reg = RegParams(rng.random() * 2, int(rng.integers(1, 5)))
            assert raps_score(p, 0, u, reg) == raps_score(p, 1, u, reg)

    def test_zero_lam_zero_u_reduces_to_mass(self):
        rng = np.random.default_rng(5)
        reg = RegParams(0.0, 1)
        for _ in range(500):
            p = rng.dirichlet(np.ones(6))
            c = int(rng.integers(0, 6))
            assert raps_score(p, c, 0.0, reg) == mass_above(p, c)


class TestVectorizedScores:
    def test_matches_scalar_on_random_batches(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            n, k = int(rng.integers(1, 30)), int(rng.integers(2, 7))
            Pm = rng.dirichlet(np.ones(k), size=n)
            y = rng.integers(0, k, size=n)
            u = rng.random(n)
            reg = RegParams(rng.random() * 3, int(rng.integers(1, k + 1)))
            got = scores_at_labels(Pm, y, u, reg)
            want = [raps_score(Pm[i], int(y[i]), u[i], reg) for i in range(n)]
            np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


class TestDescendingOrder:
    def test_orders_by_probability_then_label(self):
        np.testing.assert_array_equal(
            descending_order([0.2, 0.5, 0.2, 0.1]), [1, 0, 2, 3])
