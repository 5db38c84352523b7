"""Tests for the Gaussian mixture module."""

import math

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment
from sklearn.metrics import adjusted_rand_score

from errors import ComponentCollapseError, GmmFitError
from features import RAW, ZSCORE, FeatureMatrix, standardize
from gmm import (
    DIAGONAL, FULL, GmmConfig, GmmModel, Responsibilities, assign, bic, bic_value, e_step, fit, kmeans_plusplus,
    load_model, log_likelihood, m_step, n_parameters, save_model,
)
from synthetic import planted_blobs, random_mixture


def _model(means, variances, weights=None, covariance=DIAGONAL):
    means = np.asarray(means, dtype=float)
    weights = np.full(len(means), 1.0 / len(means)) if weights is None else np.asarray(weights, dtype=float)
    return GmmModel(weights=weights, means=means, covariances=np.asarray(variances, dtype=float),
                    covariance=covariance)


def _aligned_means(model, X, labels):
    """Fitted means reordered to match planted groups, plus the planted group means."""
    groups = np.unique(labels)
    planted = np.array([X[labels == g].mean(axis=0) for g in groups])
    cost = np.linalg.norm(planted[:, None, :] - model.means[None, :, :], axis=2)
    rows, cols = linear_sum_assignment(cost)
    return model.means[cols[np.argsort(rows)]], planted


def _em_instances(count, seed=2024):
    """Seeded (X, config) pairs spanning sizes, widths, K and both covariance forms."""
    rng = np.random.default_rng(seed)
    instances = []
    for i in range(count):
        d = int(rng.integers(2, 11))
        k = int(rng.integers(1, 7))
        covariance = DIAGONAL if i % 2 == 0 else FULL
        width = d + 1 if covariance == FULL else d
        n = int(rng.integers(max(50, 4 * k * width), 501))
        X = random_mixture(int(rng.integers(0, 2 ** 31)), n, d, k)
        config = GmmConfig(n_components=k, covariance=covariance, n_restarts=2, max_iter=200,
                           seed=int(rng.integers(0, 2 ** 31)))
        instances.append(pytest.param(X, config, id=f"{i}-n{n}-d{d}-k{k}-{covariance}"))
    return instances


class TestGmmConfig:
    """Test cases for GmmConfig validation."""

    def test_defaults(self):
        """Test the documented defaults."""
        config = GmmConfig(n_components=3)
        assert config.covariance == DIAGONAL
        assert config.max_iter == 500
        assert config.tol == 1e-7
        assert config.n_restarts == 10
        assert config.reg_var == 1e-6

    @pytest.mark.parametrize('kwargs', [
        {'n_components': 0},
        {'n_components': 2, 'covariance': 'spherical'},
        {'n_components': 2, 'tol': 0},
        {'n_components': 2, 'n_restarts': 0},
        {'n_components': 2, 'seed': -1},
    ])
    def test_invalid(self, kwargs):
        """Test invalid configurations are rejected."""
        with pytest.raises(ValueError):
            GmmConfig(**kwargs)


class TestEStep:
    """Test cases for responsibilities."""

    def test_symmetric_point(self):
        """Test a point midway between two mirrored components gets (0.5, 0.5)."""
        model = _model([[-1.0], [1.0]], [[1.0], [1.0]])
        resp = e_step(model, np.array([[0.0]]))
        np.testing.assert_allclose(resp.matrix, [[0.5, 0.5]], atol=1e-12)

    def test_tie_goes_to_smaller_index(self):
        """Test an exact tie assigns component 0."""
        model = _model([[-1.0], [1.0]], [[1.0], [1.0]])
        assert assign(model, np.array([[0.0]])).tolist() == [0]

    def test_rows_sum_to_one(self):
        """Test responsibilities are a distribution per row."""
        X = random_mixture(3, 200, 4, 3)
        model = fit(X, GmmConfig(n_components=3, n_restarts=2, seed=3))
        resp = e_step(model, X).matrix
        np.testing.assert_allclose(resp.sum(axis=1), 1, atol=1e-10)
        assert resp.min() >= 0 and resp.max() <= 1

    def test_far_points_stay_finite(self):
        """Test extreme distances still give valid responsibilities via log-space."""
        model = _model([[0.0], [1.0]], [[1e-4], [1e-4]])
        resp = e_step(model, np.array([[500.0]])).matrix
        assert np.isfinite(resp).all()
        np.testing.assert_allclose(resp, [[0.0, 1.0]], atol=1e-12)

    def test_dimension_mismatch(self):
        """Test a matrix of the wrong width is rejected."""
        with pytest.raises(GmmFitError):
            e_step(_model([[0.0, 0.0]], [[1.0, 1.0]]), np.zeros((3, 3)))


class TestMStep:
    """Test cases for parameter updates."""

    def test_one_hot_gives_group_moments(self, rng):
        """Test hard responsibilities reduce to per-group means and variances."""
        X = rng.normal(size=(40, 2))
        groups = np.repeat([0, 1], 20)
        resp = np.eye(2)[groups]
        config = GmmConfig(n_components=2)
        weights, means, covariances = m_step(X, resp, config)

        np.testing.assert_allclose(weights, [0.5, 0.5])
        for g in (0, 1):
            np.testing.assert_allclose(means[g], X[groups == g].mean(axis=0))
            np.testing.assert_allclose(covariances[g], X[groups == g].var(axis=0) + config.reg_var)

    def test_uniform_gives_global_moments(self, rng):
        """Test uniform responsibilities give two copies of the global fit."""
        X = rng.normal(size=(30, 3))
        config = GmmConfig(n_components=2)
        weights, means, covariances = m_step(X, np.full((30, 2), 0.5), config)

        np.testing.assert_allclose(weights, [0.5, 0.5])
        np.testing.assert_allclose(means, np.tile(X.mean(axis=0), (2, 1)))
        np.testing.assert_allclose(covariances, np.tile(X.var(axis=0) + config.reg_var, (2, 1)))

    def test_full_covariance_symmetric(self, rng):
        """Test full covariances are symmetric with the reg_var diagonal floor."""
        X = rng.normal(size=(30, 3))
        _, _, covariances = m_step(X, np.ones((30, 1)), GmmConfig(n_components=1, covariance=FULL))
        np.testing.assert_allclose(covariances[0], covariances[0].T, atol=1e-12)
        assert np.all(np.linalg.eigvalsh(covariances[0]) > 0)

    def test_collapsed_component(self, rng):
        """Test a component with no responsibility raises."""
        X = rng.normal(size=(10, 2))
        resp = np.column_stack([np.ones(10), np.zeros(10)])
        with pytest.raises(ComponentCollapseError) as exc:
            m_step(X, Responsibilities(matrix=resp), GmmConfig(n_components=2))
        assert exc.value.component == 1


class TestLikelihoodAndBic:
    """Test cases for log-likelihood and BIC."""

    def test_standard_normal_at_mean(self):
        """Test one point at the mean of a unit normal."""
        model = _model([[0.0]], [[1.0]])
        assert log_likelihood(model, np.array([[0.0]])) == pytest.approx(-0.9189385, abs=1e-7)

    def test_full_matches_diagonal(self, rng):
        """Test a diagonal full covariance gives the same likelihood as the diagonal form."""
        X = rng.normal(size=(25, 3))
        variances = np.array([[0.5, 2.0, 1.5]])
        diagonal = _model([[0.1, -0.2, 0.3]], variances)
        full = _model([[0.1, -0.2, 0.3]], np.diag(variances[0])[None], covariance=FULL)
        assert log_likelihood(full, X) == pytest.approx(log_likelihood(diagonal, X), rel=1e-12)

    def test_bic_worked_example(self):
        """Test diagonal K=1, d=2, N=10, ln L=-20."""
        assert n_parameters(1, 2, DIAGONAL) == 4
        assert bic_value(4, 10, -20.0) == pytest.approx(4 * math.log(10) + 40)
        assert bic_value(4, 10, -20.0) == pytest.approx(49.2103, abs=1e-4)

    def test_parameter_counts(self):
        """Test diagonal and full parameter counts."""
        assert n_parameters(3, 31, DIAGONAL) == 2 + 93 + 93
        assert n_parameters(2, 4, FULL) == 1 + 8 + 20

    def test_bic_uses_model(self, rng):
        """Test bic agrees with bic_value on the model's own likelihood."""
        X = rng.normal(size=(50, 2))
        model = fit(X, GmmConfig(n_components=1, n_restarts=1))
        assert bic(model, X) == pytest.approx(bic_value(4, 50, log_likelihood(model, X)))


class TestFit:
    """Test cases for EM fitting."""

    def test_single_component_closed_form(self, rng):
        """Test K=1 recovers the sample mean and variance."""
        X = rng.normal(loc=3.0, scale=2.0, size=(100, 3))
        config = GmmConfig(n_components=1, n_restarts=1)
        model = fit(X, config)

        np.testing.assert_allclose(model.weights, [1.0])
        np.testing.assert_allclose(model.means[0], X.mean(axis=0), atol=1e-10)
        np.testing.assert_allclose(model.covariances[0], X.var(axis=0) + config.reg_var, atol=1e-10)

    def test_planted_blobs_recovered(self):
        """Test three separated blobs: means within 0.1 sigma and ARI >= 0.99 in at least 9 of 10 seeds."""
        recovered = 0
        for seed in range(10):
            X, labels = planted_blobs(seed=seed)
            model = fit(X, GmmConfig(n_components=3, n_restarts=5, seed=seed))
            fitted, planted = _aligned_means(model, X, labels)
            recovered += bool(np.max(np.linalg.norm(fitted - planted, axis=1)) < 0.1
                              and adjusted_rand_score(labels, assign(model, X)) >= 0.99)
        assert recovered >= 9

    def test_planted_blobs_full_covariance(self):
        """Test full covariance also separates the blobs."""
        X, labels = planted_blobs(seed=8)
        model = fit(X, GmmConfig(n_components=3, covariance=FULL, n_restarts=5, seed=2))
        assert adjusted_rand_score(labels, assign(model, X)) >= 0.99
        for cov in model.covariances:
            np.testing.assert_allclose(cov, cov.T, atol=1e-12)

    @pytest.mark.parametrize('X, config', _em_instances(100))
    def test_log_likelihood_monotone(self, X, config):
        """Test EM never decreases the log-likelihood within a run."""
        model = fit(X, config)
        history = np.array(model.history)
        assert np.all(np.diff(history) >= -1e-9 * np.maximum(1.0, np.abs(history[:-1])))

    def test_converged_restarts(self):
        """Test fit counts the restarts that met the tolerance before max_iter."""
        X, _ = planted_blobs(seed=2)
        assert fit(X, GmmConfig(n_components=1, n_restarts=4, seed=1)).converged_restarts == 4
        capped = fit(X, GmmConfig(n_components=3, n_restarts=4, max_iter=1, seed=1))
        assert capped.converged_restarts == 0
        assert not capped.converged

    def test_model_invariants(self):
        """Test weights sum to 1 and variances respect the floor."""
        X = random_mixture(5, 200, 3, 3)
        config = GmmConfig(n_components=3, n_restarts=3, seed=5)
        model = fit(X, config)
        assert model.weights.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(model.weights > 0)
        assert np.all(model.covariances >= config.reg_var)

    def test_fixed_point_at_convergence(self):
        """Test one more EM step at convergence barely moves the likelihood."""
        X, _ = planted_blobs(seed=9)
        config = GmmConfig(n_components=3, n_restarts=2, seed=1)
        model = fit(X, config)
        assert model.converged
        weights, means, covariances = m_step(X, e_step(model, X), config)
        again = GmmModel(weights=weights, means=means, covariances=covariances, covariance=DIAGONAL)
        before = log_likelihood(model, X)
        assert abs(log_likelihood(again, X) - before) < config.tol * abs(before)

    def test_deterministic_across_threads(self):
        """Test the fitted model is bit-identical for 1 and 4 threads."""
        X = random_mixture(2, 250, 4, 3)
        config = GmmConfig(n_components=3, n_restarts=6, seed=42)
        serial = fit(X, config, threads=1)
        threaded = fit(X, config, threads=4)

        assert serial.restart == threaded.restart
        np.testing.assert_array_equal(serial.means, threaded.means)
        np.testing.assert_array_equal(serial.covariances, threaded.covariances)
        assert serial.train_log_likelihood == threaded.train_log_likelihood

    def test_affine_rescaling_keeps_labels(self, rng):
        """Test a positive affine rescale of raw columns leaves assignments unchanged."""
        X, _ = planted_blobs(seed=4, centers=((0, 0, 0), (10, 0, 5), (0, 10, -5)))
        raw = FeatureMatrix(row_ids=tuple(('c', i) for i in range(len(X))), column_names=('a', 'b', 'c'),
                            values=X, normalization=RAW)
        scaled = FeatureMatrix(row_ids=raw.row_ids, column_names=raw.column_names,
                               values=X * np.array([3.0, 0.5, 7.0]) + np.array([10.0, -4.0, 1.0]))
        a, b = standardize(raw, ZSCORE), standardize(scaled, ZSCORE)
        np.testing.assert_allclose(a.values, b.values, atol=1e-9)

        config = GmmConfig(n_components=3, n_restarts=3, seed=6)
        assert assign(fit(a, config), a).tolist() == assign(fit(b, config), b).tolist()

    def test_too_few_rows(self):
        """Test more components than rows is rejected."""
        with pytest.raises(GmmFitError):
            fit(np.zeros((2, 1)), GmmConfig(n_components=3))

    def test_non_finite_rows(self):
        """Test NaN input is rejected."""
        X = np.array([[0.0], [np.nan], [1.0]])
        with pytest.raises(GmmFitError):
            fit(X, GmmConfig(n_components=1))

    def test_duplicate_rows_do_not_crash(self):
        """Test many identical rows still produce a valid model."""
        X = np.vstack([np.zeros((80, 2)), planted_blobs(seed=3, n_per=40)[0]])
        model = fit(X, GmmConfig(n_components=4, n_restarts=3, seed=3))
        assert np.isfinite(model.train_log_likelihood)


class TestKmeansPlusPlus:
    """Test cases for seeding."""

    def test_centres_are_rows(self, rng):
        """Test every seed centre is a data row."""
        X = rng.normal(size=(50, 2))
        centers = kmeans_plusplus(X, 4, np.random.default_rng(0))
        for c in centers:
            assert any(np.array_equal(c, row) for row in X)

    def test_identical_rows(self):
        """Test seeding falls back to uniform picks on identical rows."""
        centers = kmeans_plusplus(np.ones((5, 2)), 3, np.random.default_rng(0))
        np.testing.assert_array_equal(centers, np.ones((3, 2)))


class TestModelFile:
    """Test cases for model serialization."""

    def test_save_and_load(self, tmp_path):
        """Test a saved model reloads with the same parameters and config."""
        X, _ = planted_blobs(seed=1)
        model = fit(X, GmmConfig(n_components=3, n_restarts=2, seed=9))
        path = str(tmp_path / 'model.json')
        save_model(model, path, column_names=['x', 'y'])
        again = load_model(path)

        assert again.config == model.config
        np.testing.assert_array_equal(again.means, model.means)
        np.testing.assert_array_equal(again.covariances, model.covariances)
        assert again.converged_restarts == model.converged_restarts
        assert assign(again, X).tolist() == assign(model, X).tolist()

    def test_wrong_format(self, tmp_path):
        """Test a foreign JSON document is rejected."""
        path = tmp_path / 'model.json'
        path.write_text('{"format": "other"}', encoding='utf-8')
        with pytest.raises(GmmFitError):
            load_model(str(path))
