import math
import os
import unittest

import numpy as np

from errors import ConfigurationError, DegenerateGapError, DimensionError, TruncationError
import estimator
from estimator import (CoefficientSample, a3_series, apply_coefficients, assumption_a3_proxy, consistency_ratio,
                       eigendecompose, embed_states, empirical_autocovariance, empirical_cross_covariance,
                       error_upper_bound, estimate_rho, from_coefficients, predict_next, spectral_gap_coefficients,
                       truncation_level)
from mra import build_basis, synthesize
from procgen import build_model_spec, covariance_spectrum, simulate, trajectory_coefficients, wavelet_transfer
from spaces import ExtendedState, ext_inner


def _sample(states) -> CoefficientSample:
    """Выборка с единичными весами: признаки совпадают с коэффициентами"""
    states = np.asarray(states, dtype=float)
    return CoefficientSample(states, np.ones(states.shape[2]))


# Правила выбора k_n
class TestTruncationLevel(unittest.TestCase):

    def test_rules(self):
        self.assertEqual(truncation_level(1500, "log_n"), 7)
        self.assertEqual(truncation_level(48, "log2_sqrt"), 2)
        self.assertEqual(truncation_level(48, "ln_n_5_2"), 9)
        self.assertEqual(truncation_level(2, "log2_sqrt"), 1)

    def test_invalid(self):
        with self.assertRaises(ConfigurationError):
            truncation_level(100, "sqrt")
        with self.assertRaises(ConfigurationError):
            truncation_level(1)


# Эмпирические операторы ковариации
class TestEmpiricalOperators(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(21)

    def test_repeated_state(self):
        x = self.rng.normal(size=(2, 4))
        eigensystem = eigendecompose(empirical_autocovariance(_sample([x] * 5)))
        self.assertEqual(eigensystem.rank, 1)
        self.assertAlmostEqual(eigensystem.eigenvalues[0], float(np.sum(x ** 2)))
        np.testing.assert_allclose(eigensystem.eigenvalues[1:], 0.0)

    def test_two_orthogonal_states(self):
        first = np.zeros((1, 4))
        first[0, 0] = 2.0
        second = np.zeros((1, 4))
        second[0, 1] = 1.0
        eigensystem = eigendecompose(empirical_autocovariance(_sample([first, second])))
        np.testing.assert_allclose(eigensystem.eigenvalues, [2.0, 0.5])

    def test_trace_identity(self):
        states = self.rng.normal(size=(12, 2, 4))
        handle = empirical_autocovariance(_sample(states))
        eigensystem = eigendecompose(handle)
        self.assertAlmostEqual(eigensystem.eigenvalues.sum(), float(np.sum(states ** 2)) / 12, places=10)
        self.assertAlmostEqual(np.trace(handle.dense()), eigensystem.eigenvalues.sum(), places=10)

    def test_gram_and_svd_paths(self):
        # n <= dim решается через матрицу Грама, n > dim - через SVD
        for n in (6, 30):
            states = self.rng.normal(size=(n, 2, 4))
            handle = empirical_autocovariance(_sample(states))
            eigensystem = eigendecompose(handle)
            expected = np.clip(np.linalg.eigvalsh(handle.dense())[::-1], 0.0, None)[:eigensystem.eigenvalues.size]
            np.testing.assert_allclose(eigensystem.eigenvalues, expected, atol=1e-8)
            np.testing.assert_allclose(eigensystem.eigenstates @ eigensystem.eigenstates.T,
                                       np.eye(eigensystem.rank), atol=1e-8)

    def test_sign_convention(self):
        eigensystem = eigendecompose(empirical_autocovariance(_sample(self.rng.normal(size=(10, 1, 4)))))
        for row in eigensystem.eigenstates:
            self.assertGreater(row[np.abs(row).argmax()], 0.0)

    def test_cross_covariance(self):
        states = self.rng.normal(size=(6, 1, 3))
        handle = empirical_cross_covariance(_sample(states))
        flat = states.reshape(6, 3)
        expected = sum(np.outer(flat[i + 1], flat[i]) for i in range(5)) / 5
        np.testing.assert_allclose(handle.dense(), expected)
        x = self.rng.normal(size=3)
        np.testing.assert_allclose(handle.apply(x), expected @ x)

    def test_scaled_chain(self):
        # X_{i+1} = c X_i: D_n = c / (n - 1) sum_{i<n} X_i (x) X_i
        x = self.rng.normal(size=3)
        flat = np.array([0.7 ** i * x for i in range(8)])
        handle = empirical_cross_covariance(_sample(flat.reshape(8, 1, 3)))
        expected = 0.7 * sum(np.outer(row, row) for row in flat[:-1]) / 7
        np.testing.assert_allclose(handle.dense(), expected)

    def test_too_small(self):
        with self.assertRaises(DimensionError):
            empirical_autocovariance(_sample(np.zeros((1, 1, 3))))
        with self.assertRaises(ConfigurationError):
            empirical_autocovariance([ExtendedState.from_array(np.zeros((1, 4)))] * 3)


# Собственные состояния в геометрии H~
class TestEigenstatesOnBasis(unittest.TestCase):

    def setUp(self):
        self.basis = build_basis(order=4, grid_levels=8, primary_level=2, last_level=3)
        coeffs = np.random.default_rng(4).normal(size=(10, 2, 16))
        self.states = [ExtendedState.from_array(synthesize(c, self.basis)) for c in coeffs]
        self.sample = from_coefficients(coeffs, self.basis, 0.6)

    def test_orthonormal_in_htilde(self):
        eigensystem = eigendecompose(empirical_autocovariance(self.sample))
        phi = [eigensystem.eigenstate(j, self.basis) for j in (1, 2, 3)]
        for j in range(3):
            for l in range(3):
                self.assertAlmostEqual(ext_inner(phi[j], phi[l], self.basis, 0.6), float(j == l), places=6)

    def test_embedding_states(self):
        embedded = embed_states(self.states, self.basis, 0.6)
        np.testing.assert_allclose(embedded.coefficients, self.sample.coefficients, atol=1e-9)


# Оценка rho
class TestEstimateRho(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(8)

    def test_one_dimensional(self):
        # c_{i+1} = 0.5 c_i вдоль одного направления
        v = np.array([[1.0, 0.0, 0.0]])
        c = 0.5 ** np.arange(10)
        sample = _sample(np.array([ci * v for ci in c]))
        op = estimate_rho(sample, 1)
        expected = 0.5 * (10 / 9) * np.sum(c[:-1] ** 2) / np.sum(c ** 2)
        self.assertAlmostEqual(op.coefficients[0, 0], expected, places=10)
        np.testing.assert_allclose(apply_coefficients(op, v), expected * v, atol=1e-12)

    def test_linearity(self):
        sample = _sample(self.rng.normal(size=(20, 2, 3)))
        op = estimate_rho(sample, 3)
        x = self.rng.normal(size=(2, 3))
        y = self.rng.normal(size=(2, 3))
        np.testing.assert_allclose(apply_coefficients(op, np.zeros((2, 3))), 0.0)
        np.testing.assert_allclose(apply_coefficients(op, 2 * x - y),
                                   2 * apply_coefficients(op, x) - apply_coefficients(op, y), atol=1e-10)

    def test_matches_dense_oracle(self):
        # состояния в 3-мерном подпространстве: оценка = Pi D C^+ Pi
        for _ in range(10):
            directions = self.rng.normal(size=(3, 8))
            weights = self.rng.uniform(0.5, 2.0, size=4)
            flat = self.rng.normal(size=(20, 3)) @ directions
            sample = CoefficientSample(flat.reshape(20, 2, 4), weights)
            op = estimate_rho(sample, 3)

            features = sample.features
            cov = features.T @ features / 20
            cross = features[1:].T @ features[:-1] / 19
            values, vectors = np.linalg.eigh(cov)
            top = vectors[:, -3:]
            projector = top @ top.T
            oracle = projector @ cross @ np.linalg.pinv(cov, rcond=1e-10, hermitian=True) @ projector
            np.testing.assert_allclose(op.dense, oracle, atol=1e-10)

    def test_lag_order(self):
        # x_{i+1} = A x_i + e с несимметричной A: оценивается A, а не A^T
        matrix = np.array([[0.5, 0.4], [0.0, 0.3]])
        states = np.zeros((4000, 2))
        noise = self.rng.normal(size=(4000, 2))
        for i in range(1, 4000):
            states[i] = matrix @ states[i - 1] + noise[i]
        op = estimate_rho(_sample(states[:, None, :]), 2)
        for column in range(2):
            unit = np.eye(2)[column][None, :]
            np.testing.assert_allclose(apply_coefficients(op, unit)[0], matrix[:, column], atol=0.08)

    def test_truncation_error(self):
        v = np.array([[1.0, 2.0, 0.0]])
        sample = _sample(np.array([v * (i + 1) for i in range(6)]))
        with self.assertRaises(TruncationError):
            estimate_rho(sample, 2)
        with self.assertRaises(ConfigurationError):
            estimate_rho(sample, 0)

    def test_predict_next(self):
        basis = build_basis(order=4, grid_levels=8, primary_level=2, last_level=3)
        coeffs = self.rng.normal(size=(15, 2, 16))
        sample = from_coefficients(coeffs, basis)
        op = estimate_rho(sample, 4)
        last = ExtendedState.from_array(synthesize(coeffs[-1], basis))
        prediction = predict_next(op, last, basis)
        expected = synthesize(apply_coefficients(op, coeffs[-1]), basis)
        np.testing.assert_allclose(prediction.as_array(), expected, atol=1e-9)


# Зазоры, отношение состоятельности и граница ошибки
class TestBounds(unittest.TestCase):

    def test_gap_coefficients(self):
        np.testing.assert_allclose(spectral_gap_coefficients([4, 2, 1], 2), [math.sqrt(2), 2 * math.sqrt(2)])
        np.testing.assert_allclose(spectral_gap_coefficients([4, 2, 1], 1), [math.sqrt(2)])

    def test_last_gap_is_one_sided(self):
        np.testing.assert_allclose(spectral_gap_coefficients([4, 2], 2), [math.sqrt(2), math.sqrt(2)])

    def test_degenerate_gap(self):
        with self.assertRaises(DegenerateGapError):
            spectral_gap_coefficients([2, 2, 1], 2)
        with self.assertRaises(ConfigurationError):
            spectral_gap_coefficients([1], 1)

    def test_consistency_ratio(self):
        ratio = consistency_ratio([4, 2, 1], 100, 2)
        expected = 2 * (1 / 2) * 3 * math.sqrt(2) / math.sqrt(100 / math.log(100))
        self.assertAlmostEqual(ratio, expected, places=12)
        self.assertAlmostEqual(ratio, 0.9105, places=3)

    def test_error_upper_bound(self):
        self.assertEqual(error_upper_bound(1.0, [4, 2, 1], 100, 1), math.exp(-800))
        self.assertEqual(error_upper_bound(0.0, [4, 2, 1], 100, 2), 0.0)
        bounds = [error_upper_bound(1.0, [4, 2, 1], n, 2) for n in (10, 20, 40)]
        self.assertGreater(bounds[0], bounds[1])
        self.assertGreater(bounds[1], bounds[2])
        self.assertEqual(bounds[0], error_upper_bound(1.0, [4, 2, 1], 10, 2))

    def test_default_model_bound_is_nearly_m(self):
        # при спектре C-bar модели по умолчанию exp(-n / scale) > 0.9999 для n <= 5000
        eigenvalues = covariance_spectrum(build_model_spec().state_covariance)
        for n, k in ((1500, 7), (2500, 7), (5000, 8)):
            self.assertEqual(truncation_level(n), k)
            self.assertGreater(error_upper_bound(1.0, eigenvalues, n, k), 0.9999)
            self.assertLess(error_upper_bound(1.0, eigenvalues, n, k), 1.0)

    def test_non_positive_eigenvalue(self):
        with self.assertRaises(TruncationError):
            consistency_ratio([2, 1, 0, -1], 100, 3)


# Прокси предположения о проекции образа
class TestAssumptionProxy(unittest.TestCase):

    def setUp(self):
        # состояния вдоль осей: собственные состояния - координатные векторы
        states = []
        for axis, scale in enumerate((4.0, 3.0, 2.0, 1.0)):
            for sign in (1.0, -1.0):
                row = np.zeros((1, 4))
                row[0, axis] = sign * scale
                states.append(row)
        self.sample = _sample(states)
        self.eigensystem = eigendecompose(empirical_autocovariance(self.sample))

    def test_coordinate_eigenstates(self):
        np.testing.assert_allclose(self.eigensystem.eigenvalues, [4.0, 2.25, 1.0, 0.25])
        np.testing.assert_allclose(np.abs(self.eigensystem.eigenstates), np.eye(4), atol=1e-12)

    def test_series_non_increasing(self):
        matrix = np.random.default_rng(2).normal(size=(4, 4))
        series = a3_series(matrix, self.eigensystem, range(5), trials=50, rng_seed=1)
        sups = [row[1] for row in series]
        htildes = [row[2] for row in series]
        for earlier, later in zip(sups, sups[1:]):
            self.assertGreaterEqual(earlier + 1e-12, later)
        for earlier, later in zip(htildes, htildes[1:]):
            self.assertGreaterEqual(earlier + 1e-12, later)
        self.assertAlmostEqual(sups[-1], 0.0, places=10)

    def test_k_zero_is_image_norm(self):
        matrix = np.random.default_rng(3).normal(size=(4, 4))
        trials = estimator._draw_trial_states(self.sample, 50, 1)
        images = trials.reshape(50, 4) @ matrix.T
        self.assertAlmostEqual(assumption_a3_proxy(matrix, self.eigensystem, 0, trials=50, rng_seed=1),
                               float(np.abs(images).max()), places=12)

    def test_callable_operator(self):
        proxy = assumption_a3_proxy(lambda coeffs: 2 * coeffs, self.eigensystem, 2, trials=20, rng_seed=4)
        self.assertLessEqual(proxy, 2.0 + 1e-12)

    def test_estimated_operator_range(self):
        # образ оценки лежит в первых k_n собственных состояниях
        sample = _sample(np.random.default_rng(5).normal(size=(20, 2, 3)))
        eigensystem = eigendecompose(empirical_autocovariance(sample))
        op = estimate_rho(sample, eigensystem.rank, eigensystem=eigensystem)
        self.assertLess(assumption_a3_proxy(op, eigensystem, eigensystem.rank, trials=30, rng_seed=2), 1e-10)


# Ошибка прогноза падает с ростом n
@unittest.skipUnless(os.environ.get("ARBX_SLOW") == "1", "долгая проверка Монте-Карло")
class TestErrorDecreasesWithN(unittest.TestCase):

    def test_mean_error_non_increasing(self):
        basis = build_basis(order=4, grid_levels=8, primary_level=2, last_level=3)
        spec = build_model_spec(b=1, M=8, grid_size=basis.grid_size, burn_in=50)
        transfer = wavelet_transfer(spec.M, basis)
        means, errors = [], []
        for n in (300, 1200, 4800):
            values = []
            for replicate in range(20):
                trajectory = simulate(spec, n, rng_seed=np.random.SeedSequence(77, spawn_key=(n, replicate)))
                coeffs = trajectory_coefficients(trajectory, basis)
                operator = estimate_rho(from_coefficients(coeffs, basis, spec.beta), truncation_level(n))
                truth = spec.autocorrelation.apply(trajectory.coefficients[-1]) @ transfer
                values.append(np.abs(truth - apply_coefficients(operator, coeffs[-1])).max())
            means.append(np.mean(values))
            errors.append(np.std(values, ddof=1) / math.sqrt(len(values)))
        for i in range(2):
            self.assertLessEqual(means[i + 1], means[i] + 2 * math.hypot(errors[i], errors[i + 1]))


if __name__ == "__main__":
    unittest.main()
