import json

import numpy as np
import pytest

from eraps.classifiers import ClassifierSpec
from eraps.core import RandomSource
from eraps.synth import (SyntheticDGP, TheoryReport, coverage_gap_experiment,
                         dkw_bound, dkw_experiment, generate,
                         labels_from_uniforms, make_dgp, oracle_set,
                         set_convergence_experiment, uniform_ks_distance)


class TestMakeDgp:
    def test_shapes_and_fields(self):
        dgp = make_dgp(5, 8, 0.5, seed=3)
        assert dgp.W.shape == (5, 8)
        assert dgp.rho == 0.5 and dgp.n_classes == 5 and dgp.n_features == 8

    def test_seed_controls_weights(self):
        a = make_dgp(3, 4, 0.2, seed=1)
        b = make_dgp(3, 4, 0.2, seed=1)
        c = make_dgp(3, 4, 0.2, seed=2)
        np.testing.assert_array_equal(a.W, b.W)
        assert not np.array_equal(a.W, c.W)

    def test_weight_scale(self):
        small = make_dgp(4, 6, 0.0, seed=7, weight_scale=0.1)
        big = make_dgp(4, 6, 0.0, seed=7, weight_scale=10.0)
        np.testing.assert_allclose(big.W, small.W * 100.0)

    def test_invalid_rho_rejected(self):
        for rho in (-0.1, 1.0, 1.5):
            with pytest.raises(ValueError):
                make_dgp(3, 4, rho)

    def test_nonfinite_weights_rejected(self):
        with pytest.raises(ValueError):
            SyntheticDGP(W=np.array([[np.inf, 0.0]]), rho=0.5)


class TestGenerate:
    def test_shapes_dtypes_ranges(self):
        dgp = make_dgp(5, 8, 0.5, seed=11)
        series, probs = generate(dgp, 200)
        assert series.features.shape == (200, 8)
        assert series.labels.shape == (200,)
        assert probs.shape == (200, 5)
        assert series.n_classes == 5
        assert series.labels.min() >= 0 and series.labels.max() < 5
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_deterministic(self):
        dgp = make_dgp(4, 6, 0.3, seed=12)
        s1, p1 = generate(dgp, 100)
        s2, p2 = generate(dgp, 100)
        np.testing.assert_array_equal(s1.features, s2.features)
        np.testing.assert_array_equal(s1.labels, s2.labels)
        np.testing.assert_array_equal(p1, p2)

    def test_rho_zero_features_uncorrelated(self):
        dgp = make_dgp(3, 1, 0.0, seed=13)
        series, _ = generate(dgp, 200_000)
        x = series.features[:, 0]
        r = np.corrcoef(x[:-1], x[1:])[0, 1]
        assert abs(r) < 0.05

    def test_rho_large_features_correlated(self):
        dgp = make_dgp(3, 1, 0.9, seed=14)
        series, _ = generate(dgp, 200_000)
        x = series.features[:, 0]
        r = np.corrcoef(x[:-1], x[1:])[0, 1]
        assert abs(r - 0.9) < 0.05

    def test_stationary_unit_variance(self):
        for rho in (0.0, 0.5, 0.9):
            dgp = make_dgp(3, 2, rho, seed=15)
            series, _ = generate(dgp, 200_000)
            assert abs(series.features.std() - 1.0) < 0.05

    def test_zero_weights_give_uniform_probs(self):
        dgp = SyntheticDGP(W=np.zeros((4, 3)), rho=0.5, seed=16)
        _, probs = generate(dgp, 50)
        np.testing.assert_allclose(probs, 0.25, atol=1e-15)

    def test_length_validated(self):
        with pytest.raises(ValueError):
            generate(make_dgp(3, 2, 0.1), 0)


class TestLabelsFromUniforms:
    def test_inverse_cdf_cells(self):
        # label k iff cumsum[k-1] < u <= cumsum[k]
        probs = np.tile([0.2, 0.5, 0.3], (6, 1))
        u = np.array([0.0, 0.2, 0.21, 0.7, 0.71, 0.999])
        np.testing.assert_array_equal(labels_from_uniforms(probs, u),
                                      [0, 0, 1, 1, 2, 2])

    def test_frequencies_match_target(self):
        target = np.array([0.1, 0.6, 0.3])
        n = 100_000
        u = RandomSource(99).uniforms(0, n)
        labels = labels_from_uniforms(np.tile(target, (n, 1)), u)
        freq = np.bincount(labels, minlength=3) / n
        np.testing.assert_allclose(freq, target, atol=0.01)

    def test_u_at_one_clips_to_last_class(self):
        probs = np.array([[0.5, 0.5]])
        assert labels_from_uniforms(probs, np.array([1.0]))[0] == 1


class TestOracleSet:
    def test_mass_prefix_examples(self):
        p = [0.6, 0.3, 0.1]
        assert oracle_set(p, 0.1).labels == (0, 1)
        assert oracle_set(p, 0.05).labels == (0, 1, 2)
        assert oracle_set(p, 0.41).labels == (0,)

    def test_never_empty(self):
        assert len(oracle_set([0.99, 0.01], 0.5)) == 1


class TestKsDistance:
    def test_hand_cases(self):
        assert uniform_ks_distance(np.array([0.5])) == 0.5
        assert uniform_ks_distance(np.array([0.25, 0.75])) == 0.25
        assert abs(uniform_ks_distance(np.array([0.1, 0.2])) - 0.8) < 1e-15

    def test_matches_dense_grid_evaluation(self):
        rng = np.random.default_rng(17)
        grid = np.linspace(0.0, 1.0, 20001)
        for _ in range(50):
            n = int(rng.integers(1, 40))
            x = np.sort(rng.random(n))
            ecdf = np.searchsorted(x, grid, side="right") / n
            approx = np.abs(ecdf - grid).max()
            exact = uniform_ks_distance(x)
            assert exact >= approx - 1e-9
            assert exact <= approx + 1.0 / 20000

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            uniform_ks_distance(np.array([]))


class TestDkwBound:
    def test_value_at_1000(self):
        assert abs(dkw_bound(1000) - np.sqrt(np.log(16 * 1000) / 1000)) < 1e-15
        assert abs(dkw_bound(1000) - 0.0984) < 5e-4

    def test_shrinks_with_t(self):
        assert dkw_bound(4000) < dkw_bound(1000)


class TestDkwExperiment:
    def test_small_run_structure(self):
        rep = dkw_experiment((50,), 40, seed=5)
        assert rep.experiment == "dkw"
        (row,) = rep.rows
        assert row["T"] == 50 and row["n_reps"] == 40
        assert 0.0 <= row["exceedance"] <= 1.0
        assert row["bound"] == dkw_bound(50)
        assert 0.0 < row["mean_sup_distance"] < row["bound"]

    def test_deterministic(self):
        a = dkw_experiment((30,), 20, seed=5)
        b = dkw_experiment((30,), 20, seed=5)
        assert a.rows == b.rows

    def test_reps_validated(self):
        with pytest.raises(ValueError):
            dkw_experiment((30,), 0)


class TestCoverageGapExperiment:
    def test_structure_and_determinism(self):
        dgp = make_dgp(3, 4, 0.5, seed=2)
        kw = dict(alphas=(0.1, 0.2), T_list=(60,), reps=2,
                  spec=ClassifierSpec(epochs=10), b=2, seed=4)
        rep = coverage_gap_experiment(dgp, "eraps", **kw)
        assert rep.experiment == "coverage_gap"
        assert rep.meta["method"] == "eraps"
        assert len(rep.rows) == 2
        for row in rep.rows:
            assert row["T"] == 60 and row["n_reps"] == 2
            assert 0.0 <= row["coverage_mean"] <= 1.0
            assert row["gap_mean"] >= 0.0
        again = coverage_gap_experiment(dgp, "eraps", **kw)
        assert rep.rows == again.rows
        assert set(rep.meta["nonincreasing_within_one_se"]) == {"0.1", "0.2"}

    def test_sraps_method_runs(self):
        dgp = make_dgp(3, 4, 0.5, seed=2)
        rep = coverage_gap_experiment(dgp, "sraps", alphas=(0.1,),
                                      T_list=(80,), reps=2,
                                      spec=ClassifierSpec(epochs=10), seed=4)
        assert rep.rows[0]["n_reps"] == 2

    def test_oracle_method_has_tiny_gap(self):
        dgp = make_dgp(3, 4, 0.3, seed=5)
        rep = coverage_gap_experiment(dgp, "oracle", alphas=(0.1,),
                                      T_list=(400,), reps=5, seed=6)
        assert rep.rows[0]["gap_mean"] < 0.05

    def test_unknown_method_rejected(self):
        dgp = make_dgp(3, 4, 0.5)
        with pytest.raises(ValueError):
            coverage_gap_experiment(dgp, "magic", alphas=(0.1,),
                                    T_list=(50,), reps=1)


class TestSetConvergenceExperiment:
    def test_structure(self):
        dgp = make_dgp(4, 5, 0.4, seed=3)
        rep = set_convergence_experiment(dgp, 0.1, (300,), 3,
                                         spec=ClassifierSpec(epochs=40),
                                         test_size=100, seed=7)
        assert rep.experiment == "set_convergence"
        (row,) = rep.rows
        assert set(row) >= {"T", "alpha", "n_reps", "match_rate",
                            "match_rate_se", "mean_set_diff"}
        assert 0.0 <= row["match_rate"] <= 1.0

    def test_oracle_probs_match_almost_everywhere(self):
        # flat conditionals keep every cumulative boundary far below 1-alpha,
        # so two boundaries almost never fall inside the quantile gap
        dgp = make_dgp(5, 8, 0.4, seed=3, weight_scale=0.5)
        rep = set_convergence_experiment(dgp, 0.1, (1000,), 3, test_size=100,
                                         oracle_probs=True, seed=8)
        assert rep.rows[0]["match_rate"] >= 0.99

    def test_alpha_validated(self):
        dgp = make_dgp(3, 4, 0.5)
        with pytest.raises(ValueError):
            set_convergence_experiment(dgp, 0.0, (50,), 1)


class TestTheoryReport:
    def test_json_round_trip(self):
        rep = TheoryReport(experiment="demo", rows=[{"T": 10, "v": 0.125}],
                           meta={"seed": 3})
        blob = rep.to_json()
        back = json.loads(blob)
        assert back["experiment"] == "demo"
        assert back["rows"] == [{"T": 10, "v": 0.125}]
        assert back["meta"] == {"seed": 3}
        assert blob == rep.to_json()

    def test_csv_header_and_floats(self):
        rep = TheoryReport(experiment="demo",
                           rows=[{"T": 10, "v": 1.0 / 3.0},
                                 {"T": 20, "v": 0.5}])
        lines = rep.to_csv().strip().splitlines()
        assert lines[0] == "T,v"
        assert float(lines[1].split(",")[1]) == 1.0 / 3.0

    def test_csv_requires_uniform_rows(self):
        rep = TheoryReport(experiment="demo", rows=[{"a": 1}, {"b": 2}])
        with pytest.raises(ValueError):
            rep.to_csv()

    def test_empty_rows_give_empty_csv(self):
        assert TheoryReport(experiment="demo", rows=[]).to_csv() == ""
