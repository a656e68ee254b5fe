"""
Спектральные ковариации и операторы автокорреляции в синус-базисе,
моделирование стационарных траекторий ARBX(1).

Коэффициенты состояния хранятся по компонентам: вектор длины (b+1)*M,
компонента a занимает позиции a*M .. a*M + M - 1.
"""
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from threading import Lock

import numpy as np
from cachetools import LRUCache, cached
from cachetools.keys import hashkey

from config import BETA, BURN_IN, GRID_SIZE, PSD_TOLERANCE, RADIUS_POWERS, SINE_TERMS, W, reject_unknown
from errors import ConfigurationError, DimensionError, DomainError, ModelError
from mra import WaveletBasis, coefficients, trapezoid_weights, uniform_grid
from spaces import ExtendedState, SpaceParams, gamma_family

logger = logging.getLogger(__name__)

# Матрицы перехода синус -> вейвлет, ключ - (M, базис); ключ держит ссылку на базис
CACHE_TRANSFER = LRUCache(maxsize=16)
lock = Lock()


def sine_basis(j: int, x):
    """
    phi_j(x) = sqrt(2) sin(pi j x) на [0, 1]

    :param j: номер функции, j >= 1
    :param x: точка или массив точек
    """
    if j < 1:
        raise DomainError(f"sine basis index must be >= 1, got {j}")
    return math.sqrt(2.0) * np.sin(np.pi * j * np.asarray(x, dtype=float))


def sine_table(truncation: int, grid_size: int) -> np.ndarray:
    """Значения phi_1..phi_M на сетке, массив (M, N)"""
    grid = uniform_grid(grid_size)
    return np.vstack([sine_basis(j, grid) for j in range(1, truncation + 1)])


@dataclass(frozen=True, eq=False)
class SpectralOperator:
    """Оператор на кривых: matrix[j-1, h-1] = <O(phi_j), phi_h>"""
    matrix: np.ndarray

    def __post_init__(self):
        matrix = np.array(self.matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1] or matrix.shape[0] < 1:
            raise DimensionError(f"spectral operator needs a square M x M matrix, got {matrix.shape}")
        if not np.all(np.isfinite(matrix)):
            raise ModelError("spectral operator has non-finite entries")
        matrix.setflags(write=False)
        object.__setattr__(self, "matrix", matrix)

    @property
    def truncation(self) -> int:
        return self.matrix.shape[0]

    def apply(self, coeffs) -> np.ndarray:
        """Коэффициенты O(f) по коэффициентам f, по последней оси"""
        return np.asarray(coeffs, dtype=float) @ self.matrix

    def kernel(self, grid_size: int) -> np.ndarray:
        """Ядро K(x, y) = sum o_{jh} phi_h(x) phi_j(y) на сетке, массив (N, N)"""
        table = sine_table(self.truncation, grid_size)
        return table.T @ self.matrix.T @ table

    def apply_on_grid(self, values) -> np.ndarray:
        """(O f)(x) = int K(x, y) f(y) dy, квадратура трапеций"""
        values = np.asarray(values, dtype=float)
        weighted = self.kernel(values.shape[-1]) * trapezoid_weights(values.shape[-1])
        return values @ weighted.T


def kernel_on_grid(operator: SpectralOperator, grid_size: int) -> np.ndarray:
    return operator.kernel(grid_size)


def _banded(truncation: int, diagonal, off_diagonal) -> np.ndarray:
    """matrix[j, h] = diagonal(j) при j == h, off_diagonal(|j - h|) иначе; j, h = 1..M"""
    index = np.arange(1, truncation + 1)
    distance = np.abs(index[:, None] - index[None, :]).astype(float)
    matrix = off_diagonal(distance)
    np.fill_diagonal(matrix, diagonal(index.astype(float)))
    return matrix


def _project_psd(matrix: np.ndarray, what: str) -> tuple[np.ndarray, float]:
    """Симметризует и обрезает отрицательные собственные значения; возвращает матрицу и срезанную массу"""
    if not np.all(np.isfinite(matrix)):
        raise ModelError(f"{what} has non-finite entries")
    symmetric = (matrix + matrix.T) / 2
    eigenvalues, vectors = np.linalg.eigh(symmetric)
    if eigenvalues[0] >= 0:
        return symmetric, 0.0
    clipped = float(-eigenvalues[eigenvalues < 0].sum())
    if eigenvalues[0] < -PSD_TOLERANCE:
        logger.warning("%s is not PSD (min eigenvalue %.3g); clipped mass %.3g", what, eigenvalues[0], clipped)
    projected = (vectors * np.clip(eigenvalues, 0.0, None)) @ vectors.T
    projected = (projected + projected.T) / 2
    if np.linalg.eigvalsh(projected)[0] < -PSD_TOLERANCE:
        raise ModelError(f"{what} stays indefinite after PSD projection")
    return projected, clipped


@dataclass(frozen=True, eq=False)
class BlockCovariance:
    """Блочная ковариация коэффициентов (b+1)-набора в синус-базисе"""
    matrix: np.ndarray
    components: int
    truncation: int
    clipped_mass: float = 0.0

    def __post_init__(self):
        size = self.components * self.truncation
        if self.matrix.shape != (size, size):
            raise DimensionError(f"block covariance must be {size} x {size}, got {self.matrix.shape}")
        self.matrix.setflags(write=False)

    @classmethod
    def zeros(cls, components: int, truncation: int) -> "BlockCovariance":
        size = components * truncation
        return cls(np.zeros((size, size)), components, truncation)

    def block(self, row: int, column: int) -> SpectralOperator:
        m = self.truncation
        return SpectralOperator(self.matrix[row * m:(row + 1) * m, column * m:(column + 1) * m])

    def spectrum(self) -> np.ndarray:
        return covariance_spectrum(self)

    @cached_property
    def factor(self) -> np.ndarray:
        """L с L L^T = C через симметричное разложение (устойчиво к вырожденности)"""
        try:
            eigenvalues, vectors = np.linalg.eigh(self.matrix)
        except np.linalg.LinAlgError as ex:
            raise ModelError(f"covariance factorization failed: {ex}") from ex
        if eigenvalues.size and eigenvalues[0] < -PSD_TOLERANCE:
            raise ModelError(f"covariance is not PSD (min eigenvalue {eigenvalues[0]:.3g})")
        return vectors * np.sqrt(np.clip(eigenvalues, 0.0, None))

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """size выборок коэффициентов, массив (size, b+1, M)"""
        normals = rng.standard_normal((size, self.matrix.shape[0]))
        return (normals @ self.factor.T).reshape(size, self.components, self.truncation)


def covariance_spectrum(covariance: BlockCovariance) -> np.ndarray:
    """Собственные значения по убыванию, отрицательный шум обнулён"""
    return np.clip(np.linalg.eigvalsh(covariance.matrix)[::-1], 0.0, None)


@dataclass(frozen=True, eq=False)
class BlockOperator:
    """Блочный оператор rho-bar; blocks[r][c] действует из компоненты c в компоненту r, None - нулевой блок"""
    blocks: tuple

    @property
    def components(self) -> int:
        return len(self.blocks)

    @property
    def truncation(self) -> int:
        for row in self.blocks:
            for block in row:
                if block is not None:
                    return block.truncation
        raise ModelError("block operator has no non-zero block")

    @cached_property
    def matrix(self) -> np.ndarray:
        """A с новым вектором коэффициентов = A @ старый"""
        m = self.truncation
        full = np.zeros((self.components * m, self.components * m))
        for r, row in enumerate(self.blocks):
            for c, block in enumerate(row):
                if block is not None:
                    full[r * m:(r + 1) * m, c * m:(c + 1) * m] = block.matrix.T
        full.setflags(write=False)
        return full

    def apply(self, coeffs) -> np.ndarray:
        """Коэффициенты (..., b+1, M) -> (..., b+1, M)"""
        coeffs = np.asarray(coeffs, dtype=float)
        flat = coeffs.reshape(*coeffs.shape[:-2], -1)
        return (flat @ self.matrix.T).reshape(coeffs.shape)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, components: int) -> "BlockOperator":
        m = matrix.shape[0] // components
        return cls(tuple(tuple(SpectralOperator(matrix[r * m:(r + 1) * m, c * m:(c + 1) * m].T)
                               for c in range(components)) for r in range(components)))


def build_state_covariance(params: SpaceParams, truncation: int = SINE_TERMS) -> BlockCovariance:
    """
    Ковариация C-bar: блок (a, c) диагонален, <C phi_j, phi_j> = (1+j)^{-(gamma_a + gamma_c)/2}

    :param params: beta, gamma_1..gamma_{b+1}
    :param truncation: число синус-функций M
    """
    if truncation < 1:
        raise ConfigurationError(f"sine truncation must be >= 1, got {truncation}")
    gamma = np.array(params.gamma)
    count = gamma.size
    base = 1.0 + np.arange(1, truncation + 1)
    matrix = np.zeros((count * truncation, count * truncation))
    for a in range(count):
        for c in range(count):
            block = np.diag(base ** (-(gamma[a] + gamma[c]) / 2))
            matrix[a * truncation:(a + 1) * truncation, c * truncation:(c + 1) * truncation] = block
    projected, clipped = _project_psd(matrix, "state covariance")
    return BlockCovariance(projected, count, truncation, clipped)


def build_autocorrelation(b: int, width: float = W, truncation: int = SINE_TERMS) -> BlockOperator:
    """
    Блочный rho-bar: первая строка (rho, a_1..a_b), на диагонали u_1..u_b, остальное - ноль

    :param b: число экзогенных переменных
    :param width: параметр W внедиагональных экспонент
    :param truncation: число синус-функций M
    """
    if b < 1:
        raise ConfigurationError(f"number of exogenous variables must be >= 1, got {b}")
    if width <= 0:
        raise ConfigurationError(f"W must be positive, got {width}")
    rho = SpectralOperator(_banded(truncation, lambda j: (1 + j) ** -1.5,
                                   lambda d: np.exp(-d / width)))
    blocks = [[None] * (b + 1) for _ in range(b + 1)]
    blocks[0][0] = rho
    for i in range(1, b + 1):
        blocks[0][i] = SpectralOperator(_banded(truncation, lambda j, i=i: (1 + j) ** -(4 + 0.5 * i),
                                                lambda d: np.exp(-d ** 3 / width)))
        blocks[i][i] = SpectralOperator(_banded(truncation, lambda j, i=i: (1 + j) ** -(3 + 0.5 * i),
                                                lambda d: np.exp(-d ** 2 / width)))
    return BlockOperator(tuple(tuple(row) for row in blocks))


def build_innovation_covariance(state_covariance: BlockCovariance, autocorrelation: BlockOperator,
                                width: float = W) -> BlockCovariance:
    """
    Ковариация инноваций C_eta: диагональные блоки, перекрёстные - нули.

    eps: диагональ C_X(phi_j)(phi_j)(1 - rho_jj^2), вне диагонали exp(-|j-h|^2 / W^2);
    eta_i: диагональ C_Zi(phi_j)(phi_j)(1 - (u_i)_jj^2), вне диагонали exp(-|j-h|^3 / W^2).
    """
    m = state_covariance.truncation
    count = state_covariance.components
    if autocorrelation.components != count or autocorrelation.truncation != m:
        raise DimensionError("state covariance and autocorrelation disagree on shape")
    matrix = np.zeros((count * m, count * m))
    for a in range(count):
        variance = np.diag(state_covariance.block(a, a).matrix)
        persistence = np.diag(autocorrelation.blocks[a][a].matrix)
        power = 2 if a == 0 else 3
        block = _banded(m, lambda j: np.zeros_like(j), lambda d, p=power: np.exp(-d ** p / width ** 2))
        np.fill_diagonal(block, variance * (1 - persistence ** 2))
        matrix[a * m:(a + 1) * m, a * m:(a + 1) * m] = block
    projected, clipped = _project_psd(matrix, "innovation covariance")
    return BlockCovariance(projected, count, m, clipped)


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Параметры симулируемой модели ARBX(1) и собранные операторы"""
    b: int
    beta: float
    gamma: tuple
    gamma_family: str
    W: float
    M: int
    grid_size: int
    burn_in: int
    autocorrelation: BlockOperator
    state_covariance: BlockCovariance
    innovation_covariance: BlockCovariance

    def __post_init__(self):
        SpaceParams(self.beta, self.gamma, self.b)
        if self.grid_size < 2:
            raise ConfigurationError(f"grid size must be >= 2, got {self.grid_size}")
        if self.burn_in < 0:
            raise ConfigurationError(f"burn-in must be >= 0, got {self.burn_in}")

    @property
    def space_params(self) -> SpaceParams:
        return SpaceParams(self.beta, self.gamma, self.b)


def build_model_spec(b: int = 3, beta: float = BETA, gamma_family: str = "gamma1", gamma=None,
                     W: float = W, M: int = SINE_TERMS, grid_size: int = GRID_SIZE,
                     burn_in: int = BURN_IN) -> ModelSpec:
    """
    Собирает ModelSpec из скалярных параметров

    :param gamma: явный набор gamma; если задан, gamma_family игнорируется
    """
    if gamma is None:
        params = SpaceParams.from_family(gamma_family, beta, b)
    else:
        params = SpaceParams(beta, tuple(gamma), b)
        gamma_family = "custom"
    state_covariance = build_state_covariance(params, M)
    autocorrelation = build_autocorrelation(b, W, M)
    innovation_covariance = build_innovation_covariance(state_covariance, autocorrelation, W)
    return ModelSpec(b, beta, params.gamma, gamma_family, W, M, grid_size, burn_in,
                     autocorrelation, state_covariance, innovation_covariance)


MODEL_KEYS = {"b", "beta", "gamma_family", "gamma", "W", "M", "grid_size", "burn_in"}


def model_spec_to_dict(spec: ModelSpec) -> dict:
    data = {"b": spec.b, "beta": spec.beta, "gamma_family": spec.gamma_family, "W": spec.W,
            "M": spec.M, "grid_size": spec.grid_size, "burn_in": spec.burn_in}
    if spec.gamma_family == "custom":
        data["gamma"] = list(spec.gamma)
    return data


def model_spec_from_dict(data: dict) -> ModelSpec:
    reject_unknown(data, MODEL_KEYS, "model")
    return build_model_spec(**data)


def sample_gaussian_state(covariance: BlockCovariance, grid_size: int, rng_seed=None) -> ExtendedState:
    """
    Одна выборка X ~ N(0, C) на сетке

    :param covariance: блочная ковариация коэффициентов
    :param grid_size: число точек сетки
    :param rng_seed: int, SeedSequence или Generator
    """
    rng = np.random.default_rng(rng_seed)
    draw = covariance.draw(rng, 1)[0]
    return ExtendedState.from_array(draw @ sine_table(covariance.truncation, grid_size))


def grid_size_for(step: float) -> int:
    """floor(1 / dh) + 1 точек"""
    if not 0 < step < 1:
        raise ConfigurationError(f"discretization step must lie in (0, 1), got {step}")
    return int(math.floor(1.0 / step + 1e-9)) + 1


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Траектория ARBX(1): коэффициенты (n, b+1, M) в синус-базисе и шаг сетки"""
    coefficients: np.ndarray
    spec: ModelSpec
    discretization: float

    @property
    def n(self) -> int:
        return self.coefficients.shape[0]

    @property
    def grid_size(self) -> int:
        return grid_size_for(self.discretization)

    def values(self) -> np.ndarray:
        """Значения всех состояний на сетке, массив (n, b+1, N)"""
        return self.coefficients @ sine_table(self.spec.M, self.grid_size)

    def state(self, index: int) -> ExtendedState:
        return ExtendedState.from_array(self.coefficients[index] @ sine_table(self.spec.M, self.grid_size))

    @property
    def states(self) -> list[ExtendedState]:
        table = sine_table(self.spec.M, self.grid_size)
        return [ExtendedState.from_array(c @ table) for c in self.coefficients]


@dataclass(frozen=True)
class RadiusReport:
    """Первая степень j0 с ||rho^j|| < 1 (или None) и нормы ||rho^j||, j = 1..j_max"""
    j0: int | None
    norms: tuple


def spectral_radius_check(spec, j_max: int = RADIUS_POWERS) -> RadiusReport:
    """
    Нормы ||rho-bar^j|| в l2 коэффициентов

    :param spec: ModelSpec или BlockOperator
    :param j_max: максимальная степень
    """
    operator = spec.autocorrelation if isinstance(spec, ModelSpec) else spec
    matrix = operator.matrix
    power = matrix
    norms = []
    j0 = None
    for j in range(1, j_max + 1):
        norm = float(np.linalg.norm(power, 2))
        norms.append(norm)
        if j0 is None and norm < 1:
            j0 = j
        power = matrix @ power
    return RadiusReport(j0, tuple(norms))


def simulate(spec: ModelSpec, n: int, burn_in: int | None = None, rng_seed=None,
             discretization: float | None = None) -> Trajectory:
    """
    X_0 ~ N(0, C-bar), затем X_t = rho-bar(X_{t-1}) + eps_t; первые burn_in состояний отбрасываются

    :param spec: модель
    :param n: число сохраняемых состояний
    :param burn_in: разгон; None - spec.burn_in
    :param rng_seed: int, SeedSequence или Generator
    :param discretization: шаг сетки dh; None - 1 / (spec.grid_size - 1)
    """
    if n < 1:
        raise ConfigurationError(f"trajectory length must be >= 1, got {n}")
    burn_in = spec.burn_in if burn_in is None else burn_in
    if burn_in < 0:
        raise ConfigurationError(f"burn-in must be >= 0, got {burn_in}")
    report = spectral_radius_check(spec)
    if report.j0 is None:
        raise ModelError(f"autocorrelation is not stationary: ||rho^j|| >= 1 up to j={len(report.norms)}")
    if discretization is None:
        discretization = 1.0 / (spec.grid_size - 1)

    rng = np.random.default_rng(rng_seed)
    total = n + burn_in
    matrix = spec.autocorrelation.matrix
    shape = (spec.b + 1, spec.M)
    state = spec.state_covariance.draw(rng, 1)[0].ravel()
    innovations = spec.innovation_covariance.draw(rng, total - 1).reshape(total - 1, state.size)

    kept = np.empty((n, state.size))
    if burn_in == 0:
        kept[0] = state
    for t in range(1, total):
        state = matrix @ state + innovations[t - 1]
        if t >= burn_in:
            kept[t - burn_in] = state
    return Trajectory(kept.reshape(n, *shape), spec, discretization)


def _transfer_key(truncation: int, basis: WaveletBasis):
    return hashkey(truncation, basis)


@cached(CACHE_TRANSFER, key=_transfer_key, lock=lock)
def wavelet_transfer(truncation: int, basis: WaveletBasis) -> np.ndarray:
    """Вейвлет-коэффициенты phi_1..phi_M на сетке базиса, массив (M, P)"""
    return coefficients(sine_table(truncation, basis.grid_size), basis)


def trajectory_coefficients(trajectory: Trajectory, basis: WaveletBasis) -> np.ndarray:
    """Вейвлет-коэффициенты всех состояний, массив (n, b+1, P)"""
    if basis.grid_size != trajectory.grid_size:
        raise DimensionError(f"trajectory grid has {trajectory.grid_size} points, basis {basis.grid_size}")
    return trajectory.coefficients @ wavelet_transfer(trajectory.spec.M, basis)


def operator_in_wavelets(autocorrelation: BlockOperator, basis: WaveletBasis) -> np.ndarray:
    """
    rho-bar на вейвлет-коэффициентах (b+1)-набора: проекция МНК на синус-базис, действие, обратно.
    Матрица ((b+1)P, (b+1)P), новый вектор = матрица @ старый.
    """
    m = autocorrelation.truncation
    transfer = wavelet_transfer(m, basis)
    inverse = np.linalg.pinv(transfer)
    count = autocorrelation.components
    p = basis.size
    matrix = np.zeros((count * p, count * p))
    full = autocorrelation.matrix
    for r in range(count):
        for c in range(count):
            block = full[r * m:(r + 1) * m, c * m:(c + 1) * m]
            if np.any(block):
                matrix[r * p:(r + 1) * p, c * p:(c + 1) * p] = transfer.T @ block @ inverse.T
    return matrix
