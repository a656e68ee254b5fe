"""
Покомпонентная оценка оператора автокорреляции ARBX(1) по выборке (b+1)-наборов
и диагностики сильной состоятельности.

Все операторы работают в геометрии H~: состояние представлено вектором признаков
c * sqrt(w) по всем компонентам, тогда ext_inner - обычное скалярное произведение.
"""
import logging
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg

from config import BETA, GAP_TOLERANCE, TRIAL_STATES
from errors import ConfigurationError, DegenerateGapError, DimensionError, NumericError, TruncationError
from mra import WaveletBasis, coefficients, synthesize
from spaces import ExtendedState, htilde_weights

logger = logging.getLogger(__name__)

TRUNCATION_RULES = ("log_n", "log2_sqrt", "ln_n_5_2")
# Относительный порог нулевого собственного значения
RANK_TOLERANCE = 1e-12


@dataclass(frozen=True, eq=False)
class CoefficientSample:
    """Выборка состояний в вейвлет-коэффициентах: массив (n, b+1, P) и веса H~ длины P"""
    coefficients: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        coeffs = np.asarray(self.coefficients, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if coeffs.ndim != 3:
            raise DimensionError(f"sample coefficients must have shape (n, b+1, P), got {coeffs.shape}")
        if weights.shape != (coeffs.shape[2],):
            raise DimensionError(f"{coeffs.shape[2]} coefficients per curve but {weights.size} weights")
        object.__setattr__(self, "coefficients", coeffs)
        object.__setattr__(self, "weights", weights)

    @property
    def n(self) -> int:
        return self.coefficients.shape[0]

    @property
    def components(self) -> int:
        return self.coefficients.shape[1]

    @property
    def scale(self) -> np.ndarray:
        """sqrt(w), размноженный на все компоненты; длина (b+1) P"""
        return np.tile(np.sqrt(self.weights), self.components)

    @cached_property
    def features(self) -> np.ndarray:
        """Матрица признаков F (n, (b+1) P): F_i . F_l = ext_inner(X_i, X_l)"""
        return self.coefficients.reshape(self.n, -1) * self.scale

    def to_features(self, coeffs) -> np.ndarray:
        """(..., b+1, P) коэффициентов -> (..., (b+1) P) признаков"""
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape[-2:] != self.coefficients.shape[1:]:
            raise DimensionError(f"state has shape {coeffs.shape[-2:]}, sample {self.coefficients.shape[1:]}")
        return coeffs.reshape(*coeffs.shape[:-2], -1) * self.scale

    def from_features(self, features) -> np.ndarray:
        features = np.asarray(features, dtype=float)
        return (features / self.scale).reshape(*features.shape[:-1], *self.coefficients.shape[1:])


def from_coefficients(coeffs, basis: WaveletBasis, beta: float = BETA) -> CoefficientSample:
    return CoefficientSample(coeffs, htilde_weights(basis, beta))


def embed_states(states, basis: WaveletBasis, beta: float = BETA) -> CoefficientSample:
    """
    Раскладывает последовательность ExtendedState по базису

    :param states: состояния на сетке базиса
    :param basis: вейвлет-базис
    :param beta: индекс пространства H~
    """
    states = list(states)
    if not states:
        raise DimensionError("empty sample")
    sizes = {(x.b, x.grid_size) for x in states}
    if len(sizes) != 1:
        raise DimensionError(f"states disagree on components or grid: {sorted(sizes)}")
    values = np.stack([x.as_array() for x in states])
    return from_coefficients(coefficients(values, basis), basis, beta)


def _as_sample(sample, basis, beta) -> CoefficientSample:
    if isinstance(sample, CoefficientSample):
        return sample
    if basis is None:
        raise ConfigurationError("a basis is needed to embed a sequence of states")
    return embed_states(sample, basis, beta)


@dataclass(frozen=True, eq=False)
class AutocovarianceHandle:
    """C_n = (1/n) sum X_i (x) X_i через матрицу Грама G_il = ext_inner(X_i, X_l) / n"""
    sample: CoefficientSample

    @cached_property
    def gram(self) -> np.ndarray:
        features = self.sample.features
        return features @ features.T / self.sample.n

    def apply(self, features) -> np.ndarray:
        """C_n на векторе признаков"""
        data = self.sample.features
        return data.T @ (data @ np.asarray(features, dtype=float)) / self.sample.n

    def dense(self) -> np.ndarray:
        data = self.sample.features
        return data.T @ data / self.sample.n


@dataclass(frozen=True, eq=False)
class CrossCovarianceHandle:
    """D_n(x) = 1/(n-1) sum_{i<n} ext_inner(X_i, x) X_{i+1}"""
    sample: CoefficientSample

    @cached_property
    def lag_gram(self) -> np.ndarray:
        """(n-1) x (n-1): ext_inner(X_i, X_{l+1}) / (n - 1)"""
        data = self.sample.features
        return data[:-1] @ data[1:].T / (self.sample.n - 1)

    def apply(self, features) -> np.ndarray:
        data = self.sample.features
        return data[1:].T @ (data[:-1] @ np.asarray(features, dtype=float)) / (self.sample.n - 1)

    def dense(self) -> np.ndarray:
        data = self.sample.features
        return data[1:].T @ data[:-1] / (self.sample.n - 1)


def _check_size(sample: CoefficientSample) -> None:
    if sample.n < 2:
        raise DimensionError(f"empirical operators need n >= 2 states, got {sample.n}")


def empirical_autocovariance(sample, basis: WaveletBasis | None = None, beta: float = BETA) -> AutocovarianceHandle:
    """
    :param sample: CoefficientSample или последовательность ExtendedState (тогда нужен basis)
    """
    sample = _as_sample(sample, basis, beta)
    _check_size(sample)
    return AutocovarianceHandle(sample)


def empirical_cross_covariance(sample, basis: WaveletBasis | None = None, beta: float = BETA) -> CrossCovarianceHandle:
    sample = _as_sample(sample, basis, beta)
    _check_size(sample)
    return CrossCovarianceHandle(sample)


@dataclass(frozen=True, eq=False)
class EmpiricalEigenSystem:
    """
    Собственные значения C_{n,1} >= ... >= 0 (их min(n, dim)) и собственные состояния
    для строго положительных значений, строками в координатах признаков
    """
    eigenvalues: np.ndarray
    eigenstates: np.ndarray
    sample_size: int
    sample: CoefficientSample

    @property
    def rank(self) -> int:
        return self.eigenstates.shape[0]

    def scores(self, k: int | None = None) -> np.ndarray:
        """Проекции выборки на первые k собственных состояний, массив (n, k)"""
        k = self.rank if k is None else k
        return self.sample.features @ self.eigenstates[:k].T

    def eigenstate_coefficients(self, j: int) -> np.ndarray:
        """Коэффициенты (b+1, P) состояния phi_{n,j}, j с единицы"""
        return self.sample.from_features(self.eigenstates[j - 1])

    def eigenstate(self, j: int, basis: WaveletBasis) -> ExtendedState:
        return ExtendedState.from_array(synthesize(self.eigenstate_coefficients(j), basis))


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Координата с наибольшим модулем каждой строки делается положительной"""
    pivots = np.abs(vectors).argmax(axis=1)
    signs = np.sign(vectors[np.arange(vectors.shape[0]), pivots])
    signs[signs == 0] = 1.0
    return vectors * signs[:, None]


def eigendecompose(handle: AutocovarianceHandle) -> EmpiricalEigenSystem:
    """
    Спектр C_n. При n <= dim решается задача n x n для матрицы Грама
    и собственные векторы поднимаются как phi_j = F^T u_j / sqrt(n C_j);
    иначе берётся тонкое SVD матрицы F / sqrt(n), что даёт те же пары.
    """
    sample = handle.sample
    data = sample.features
    n, dim = data.shape
    try:
        if n <= dim:
            values, vectors = scipy.linalg.eigh(handle.gram)
            values = np.clip(values[::-1], 0.0, None)
            vectors = vectors[:, ::-1]
            positive = _positive(values)
            states = (data.T @ vectors[:, :positive] / np.sqrt(n * values[:positive])).T
        else:
            _, singular, right = scipy.linalg.svd(data / math.sqrt(n), full_matrices=False)
            values = singular ** 2
            positive = _positive(values)
            states = right[:positive]
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as ex:
        raise NumericError(f"eigen solver failed: {ex}") from ex
    if not np.all(np.isfinite(values)):
        raise NumericError("eigen solver returned non-finite eigenvalues")
    values = np.where(np.arange(values.size) < positive, values, 0.0)
    logger.debug("eigendecomposition of n=%d states in dimension %d: rank %d", n, dim, positive)
    return EmpiricalEigenSystem(values, _fix_signs(states), n, sample)


def _positive(values: np.ndarray) -> int:
    if values.size == 0 or values[0] <= 0:
        return 0
    return int(np.count_nonzero(values > RANK_TOLERANCE * values[0]))


def truncation_level(n: int, rule: str = "log_n") -> int:
    """
    k_n по правилу: log_n = [ln n], log2_sqrt = [log2 sqrt(n)], ln_n_5_2 = [ln n^{5/2}]; не меньше 1
    """
    if n < 2:
        raise ConfigurationError(f"truncation level needs n >= 2, got {n}")
    if rule == "log_n":
        value = math.log(n)
    elif rule == "log2_sqrt":
        value = math.log2(math.sqrt(n))
    elif rule == "ln_n_5_2":
        value = 2.5 * math.log(n)
    else:
        raise ConfigurationError(f"unknown truncation rule {rule!r}; expected one of {', '.join(TRUNCATION_RULES)}")
    return max(1, int(math.floor(value)))


@dataclass(frozen=True, eq=False)
class EstimatedOperator:
    """k_n x k_n матрица R[j, l] = <D_n phi_j, phi_l> / C_{n,j} и собственная система"""
    k_n: int
    coefficients: np.ndarray
    eigensystem: EmpiricalEigenSystem

    @cached_property
    def dense(self) -> np.ndarray:
        """Оператор на признаках: f -> Phi^T R^T Phi f"""
        basis = self.eigensystem.eigenstates[:self.k_n]
        return basis.T @ self.coefficients.T @ basis

    def apply_features(self, features) -> np.ndarray:
        basis = self.eigensystem.eigenstates[:self.k_n]
        scores = np.asarray(features, dtype=float) @ basis.T
        return scores @ self.coefficients @ basis


def estimate_rho(sample, k_n: int, basis: WaveletBasis | None = None, beta: float = BETA,
                 eigensystem: EmpiricalEigenSystem | None = None) -> EstimatedOperator:
    """
    Покомпонентная оценка Pi^k D_n C_n^{-1} Pi^k

    :param sample: CoefficientSample или последовательность ExtendedState
    :param k_n: число сохраняемых собственных направлений
    :param eigensystem: уже посчитанная собственная система этой выборки
    """
    sample = _as_sample(sample, basis, beta)
    _check_size(sample)
    if k_n < 1:
        raise ConfigurationError(f"k_n must be >= 1, got {k_n}")
    if eigensystem is None:
        eigensystem = eigendecompose(empirical_autocovariance(sample))
    if k_n > eigensystem.rank:
        raise TruncationError(f"C_(n,{k_n}) <= 0: only {eigensystem.rank} positive eigenvalues; "
                              f"use a smaller k_n")
    scores = eigensystem.scores(k_n)
    cross = scores[:-1].T @ scores[1:] / (sample.n - 1)
    matrix = cross / eigensystem.eigenvalues[:k_n, None]
    return EstimatedOperator(k_n, matrix, eigensystem)


def apply_coefficients(op: EstimatedOperator, coeffs) -> np.ndarray:
    """Оценённый оператор на коэффициентах (..., b+1, P)"""
    sample = op.eigensystem.sample
    return sample.from_features(op.apply_features(sample.to_features(coeffs)))


def predict_next(op: EstimatedOperator, x: ExtendedState, basis: WaveletBasis) -> ExtendedState:
    """Подстановочный прогноз rho~(x) для последнего наблюдённого состояния"""
    prediction = apply_coefficients(op, coefficients(x.as_array(), basis))
    return ExtendedState.from_array(synthesize(prediction, basis))


def spectral_gap_coefficients(eigenvalues, k: int) -> np.ndarray:
    """
    a_1 = 2 sqrt(2) / (C_1 - C_2), a_j = 2 sqrt(2) max(1/(C_{j-1} - C_j), 1/(C_j - C_{j+1}));
    если C_{k+1} нет, для a_k берётся только левый зазор
    """
    values = np.asarray(eigenvalues, dtype=float)
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    if values.size < 2 or values.size < k:
        raise ConfigurationError(f"need at least max(2, k) eigenvalues, got {values.size} for k={k}")
    gaps = -np.diff(values[:k + 1])
    if np.any(gaps <= GAP_TOLERANCE):
        where = int(np.argmax(gaps <= GAP_TOLERANCE)) + 1
        raise DegenerateGapError(f"eigenvalues {where} and {where + 1} are tied within {GAP_TOLERANCE}")
    factor = 2 * math.sqrt(2)
    result = np.empty(k)
    result[0] = factor / gaps[0]
    for j in range(1, k):
        right = 1 / gaps[j] if j < gaps.size else 0.0
        result[j] = factor * max(1 / gaps[j - 1], right)
    return result


def _gap_factor(eigenvalues, k: int) -> tuple[float, float]:
    values = np.asarray(eigenvalues, dtype=float)
    gaps = spectral_gap_coefficients(values, k)
    if not values[k - 1] > 0:
        raise TruncationError(f"C_{k} = {values[k - 1]} is not positive")
    return float(values[k - 1]), float(gaps.sum())


def consistency_ratio(eigenvalues, n: int, k_n: int) -> float:
    """k_n C_{k_n}^{-1} sum a_j / sqrt(n / ln n)"""
    if n < 2:
        raise ConfigurationError(f"n must be >= 2, got {n}")
    c_k, a_sum = _gap_factor(eigenvalues, k_n)
    return k_n * a_sum / c_k / math.sqrt(n / math.log(n))


def error_upper_bound(x0_norm: float, eigenvalues, n: int, k_n: int) -> float:
    """M exp(-n / (C_{k_n}^{-2} k_n^2 (sum a_j)^2))"""
    c_k, a_sum = _gap_factor(eigenvalues, k_n)
    scale = k_n ** 2 * a_sum ** 2 / c_k ** 2
    return float(x0_norm * math.exp(-n / scale))


def _operator_images(operator, trials: np.ndarray, sample: CoefficientSample) -> np.ndarray:
    """
    Образы пробных состояний (m, b+1, P) в признаках

    :param operator: EstimatedOperator, матрица на развёрнутых коэффициентах или функция на массиве коэффициентов
    """
    if isinstance(operator, EstimatedOperator):
        return operator.apply_features(sample.to_features(trials))
    if callable(operator):
        return sample.to_features(operator(trials))
    matrix = np.asarray(operator, dtype=float)
    flat = trials.reshape(trials.shape[0], -1)
    if matrix.shape != (flat.shape[1], flat.shape[1]):
        raise DimensionError(f"operator matrix must be {flat.shape[1]} square, got {matrix.shape}")
    return sample.to_features((flat @ matrix.T).reshape(trials.shape))


def _draw_trial_states(sample: CoefficientSample, trials: int, rng_seed) -> np.ndarray:
    rng = np.random.default_rng(rng_seed)
    draws = rng.uniform(-1.0, 1.0, size=(trials, *sample.coefficients.shape[1:]))
    return draws / np.abs(draws).reshape(trials, -1).max(axis=1)[:, None, None]


def _residual_norms(images: np.ndarray, eigensystem: EmpiricalEigenSystem, k: int) -> tuple[float, float]:
    if k > eigensystem.rank:
        raise ConfigurationError(f"k={k} exceeds the {eigensystem.rank} available eigenstates")
    basis = eigensystem.eigenstates[:k]
    residual = images - (images @ basis.T) @ basis
    coeffs = eigensystem.sample.from_features(residual)
    sup = np.abs(coeffs).reshape(coeffs.shape[0], -1).max(axis=1)
    htilde = np.sqrt((residual ** 2).sum(axis=1))
    return float(sup.max()), float(htilde.max())


def assumption_a3_proxy(operator, eigensystem: EmpiricalEigenSystem, k: int, trials: int = TRIAL_STATES,
                        rng_seed=None) -> float:
    """
    L_k = max по пробам ||rho(x) - sum_{j<=k} <rho(x), phi_j> phi_j||_B-bar при ||x||_B-bar = 1.
    Пробы - равномерные на [-1, 1] коэффициенты, нормированные по sup; это нижняя оценка супремума.
    """
    sample = eigensystem.sample
    images = _operator_images(operator, _draw_trial_states(sample, trials, rng_seed), sample)
    return _residual_norms(images, eigensystem, k)[0]


def a3_series(operator, eigensystem: EmpiricalEigenSystem, ks, trials: int = TRIAL_STATES,
              rng_seed=None) -> list[tuple[int, float, float]]:
    """Строки (k, L_k по sup-норме, L_k по норме H~) на одном наборе проб"""
    sample = eigensystem.sample
    images = _operator_images(operator, _draw_trial_states(sample, trials, rng_seed), sample)
    return [(int(k), *_residual_norms(images, eigensystem, int(k))) for k in ks]
