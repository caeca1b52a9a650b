"""CV harness, metrics conventions, the 1-SE search, regime usage."""

import numpy as np
import pytest

from zegnn import evaluation
from zegnn.evaluation import (PROTOCOL_IN_SAMPLE, PROTOCOL_RANDOM,
                              PROTOCOL_SPATIAL, FoldSizeError, RunSettings,
                              SearchGrid, hyper_search, make_random_folds,
                              r_squared, regime_usage, rmse, run_cv)
from zegnn.synthetic import ScenarioSpec, generate_scenario

FAST = RunSettings(graph_k=8, k_regimes=2, lambda_sparse=0.001,
                   lambda_mag=0.001, max_epochs=30, patience=29,
                   baseline_epochs=50)


class TestMetrics:
    def test_oracle_predictor(self):
        rng = np.random.default_rng(0)
        y = rng.standard_normal(50)
        assert r_squared(y, y) == 1.0
        assert rmse(y, y) == 0.0

    def test_held_out_mean_scores_zero(self):
        rng = np.random.default_rng(1)
        y = rng.standard_normal(50)
        pred = np.full(50, y.mean())
        np.testing.assert_allclose(r_squared(y, pred), 0.0, atol=1e-12)

    def test_r_squared_can_be_negative(self):
        y = np.array([0.0, 1.0, 2.0])
        assert r_squared(y, y[::-1] * 5) < 0

    def test_constant_outcomes_rejected(self):
        with pytest.raises(ValueError):
            r_squared(np.ones(5), np.zeros(5))


class TestFolds:
    def test_random_folds_partition(self):
        folds = make_random_folds(103, 5, seed=4)
        assert folds.shape == (103,)
        counts = np.bincount(folds)
        assert counts.min() >= 20 and counts.max() <= 21

    def test_random_folds_seeded(self):
        np.testing.assert_array_equal(make_random_folds(50, 5, 7),
                                      make_random_folds(50, 5, 7))

    def test_cv_folds_partition_and_cover(self, nonlinear_small):
        report = run_cv("ols", nonlinear_small, PROTOCOL_SPATIAL, FAST,
                        seed=3)
        folds = report.fold_assignment
        assert folds.shape == (nonlinear_small.n,)
        assert set(np.unique(folds)) == {0, 1, 2, 3, 4}

    def test_tiny_fold_raises(self):
        ds = generate_scenario(ScenarioSpec(kind="nonlinear", seed=0,
                                            lattice_side=4))
        with pytest.raises(FoldSizeError):
            run_cv("ols", ds, PROTOCOL_RANDOM, FAST, seed=0, n_folds=10)


class TestRunCv:
    def test_ols_global_linear_transfers_spatially(self):
        """A truly global mechanism degrades little under blocking."""
        ds = generate_scenario(ScenarioSpec(kind="global-linear", seed=21))
        random = run_cv("ols", ds, PROTOCOL_RANDOM, FAST, seed=5,
                        with_refit=False)
        spatial = run_cv("ols", ds, PROTOCOL_SPATIAL, FAST, seed=5,
                         with_refit=False)
        assert abs(random.mean_r2 - spatial.mean_r2) < 0.05

    def test_report_fields_present(self, nonlinear_small):
        report = run_cv("zegnn", nonlinear_small, PROTOCOL_SPATIAL, FAST,
                        seed=2)
        assert len(report.fold_r2) == 5
        assert report.mean_r2 is not None and report.se_r2 is not None
        assert report.in_sample_r2 is not None
        assert report.residual_morans_i is not None
        assert report.oof_residual_morans_i is not None
        assert report.regime_usage is not None
        payload = report.to_dict()
        assert payload["settings"]["graph_k"] == 8
        assert len(payload["fold_assignment"]) == nonlinear_small.n

    def test_in_sample_protocol(self, nonlinear_small):
        report = run_cv("ols", nonlinear_small, PROTOCOL_IN_SAMPLE, FAST,
                        seed=2)
        assert report.fold_r2 == [] and report.mean_r2 is None
        assert report.in_sample_r2 is not None
        assert report.fold_assignment is None

    def test_unknown_model_rejected(self, nonlinear_small):
        with pytest.raises(ValueError):
            run_cv("kriging", nonlinear_small, PROTOCOL_RANDOM, FAST, 0)

    def test_leakage_audit_spatial_folds(self, nonlinear_small):
        audit = []
        run_cv("gnn", nonlinear_small, PROTOCOL_SPATIAL, FAST, seed=6,
               with_refit=False, audit=audit)
        assert len(audit) == 5
        for fold in audit:
            assert np.intersect1d(fold.test_ids, fold.train_ids).size == 0
            assert np.intersect1d(fold.test_ids, fold.stats_row_ids).size == 0
            assert np.intersect1d(fold.test_ids,
                                  fold.graph_edge_nodes).size == 0


class TestHyperSearch:
    def test_single_point_grid_selects_it(self, nonlinear_small):
        grid = SearchGrid(k_candidates=(8,), k_regimes_candidates=(2,),
                          lambda_sparse=(0.001,), lambda_mag=(0.001,))
        result = hyper_search(nonlinear_small, grid, seed=1, base=FAST)
        assert result.selected.graph_k == 8
        assert result.selected.k_regimes == 2
        assert len(result.table) == 1
        assert result.table[0]["selected"]

    def test_one_se_tie_prefers_smaller_k_then_smaller_penalty(self,
                                                               monkeypatch):
        rows = {
            (8, 3, 0.005, 0.01): (0.80, 0.02),
            (12, 3, 0.0, 0.001): (0.81, 0.02),
            (16, 3, 0.0, 0.001): (0.70, 0.01),
        }

        def fake_eval(args):
            _, _, point, _ = args
            mean, se = rows[point]
            return {"graph_k": point[0], "k_regimes": point[1],
                    "lambda_sparse": point[2], "lambda_mag": point[3],
                    "mean_spatial_r2": mean, "se_spatial_r2": se,
                    "mean_spatial_rmse": 1.0, "oof_residual_morans_i": 0.0}

        monkeypatch.setattr(evaluation, "_evaluate_grid_point", fake_eval)
        grid = SearchGrid(k_candidates=(8, 12, 16),
                          k_regimes_candidates=(3,),
                          lambda_sparse=(0.0, 0.005),
                          lambda_mag=(0.001, 0.01))
        grid_points = [(8, 3, 0.005, 0.01), (12, 3, 0.0, 0.001),
                       (16, 3, 0.0, 0.001)]
        monkeypatch.setattr(SearchGrid, "points", lambda self: grid_points)
        result = hyper_search(None, grid, seed=0)
        # best mean 0.81 (k=12), threshold 0.79: k=8 admissible and smaller
        assert result.selected.graph_k == 8
        # k=16 config is below the threshold
        table = {r["graph_k"]: r for r in result.table}
        assert not table[16]["admissible"]

    def test_search_is_deterministic(self, nonlinear_small):
        grid = SearchGrid(k_candidates=(6, 8), k_regimes_candidates=(2,),
                          lambda_sparse=(0.001,), lambda_mag=(0.001,))
        a = hyper_search(nonlinear_small, grid, seed=2, base=FAST)
        b = hyper_search(nonlinear_small, grid, seed=2, base=FAST)
        assert a.table == b.table
        assert a.selected == b.selected

    def test_empty_grid_rejected(self):
        with pytest.raises(ValueError):
            SearchGrid(k_candidates=())


class TestRegimeUsage:
    def test_uniform_rows(self):
        usage = regime_usage(np.full((40, 5), 0.2))
        np.testing.assert_allclose(usage.n_eff_global, 5.0, atol=1e-12)
        np.testing.assert_allclose(usage.n_eff_local, 5.0, atol=1e-12)
        # argmax ties resolve to the lowest index, so one regime "wins" all
        assert usage.max_dominant_share == 1.0

    def test_all_one_hot_same_regime(self):
        p = np.zeros((30, 4))
        p[:, 1] = 1.0
        usage = regime_usage(p)
        np.testing.assert_allclose(usage.n_eff_global, 1.0, atol=1e-12)
        np.testing.assert_allclose(usage.n_eff_local, 1.0, atol=1e-12)
        assert usage.max_dominant_share == 1.0

    def test_even_hard_split_separates_global_and_local(self):
        p = np.zeros((50, 5))
        for i in range(50):
            p[i, i % 5] = 1.0
        usage = regime_usage(p)
        np.testing.assert_allclose(usage.n_eff_global, 5.0, atol=1e-12)
        np.testing.assert_allclose(usage.n_eff_local, 1.0, atol=1e-12)
        np.testing.assert_allclose(usage.max_dominant_share, 0.2, atol=1e-12)

    def test_bounds_on_random_rows(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            k = int(rng.integers(2, 7))
            raw = rng.uniform(size=(30, k))
            p = raw / raw.sum(axis=1, keepdims=True)
            usage = regime_usage(p)
            assert 1.0 - 1e-9 <= usage.n_eff_local <= k + 1e-9
            assert 1.0 - 1e-9 <= usage.n_eff_global <= k + 1e-9
