"""
Кратномасштабный анализ: периодизированные вейвлеты Добеши на равномерной сетке [0, 1],
разложение кривых по базису и обратный синтез.

Коэффициенты считаются квадратурой трапеций по сохранённым функциям базиса,
поэтому кривая и базис могут жить на недиадической сетке (например, 31 точка на месяц).
"""
import logging
from dataclasses import dataclass, field
from functools import cached_property
from threading import Lock

import numpy as np
import pywt
from cachetools import LRUCache, cached
from scipy.integrate import trapezoid
from scipy.interpolate import CubicSpline

from config import CASCADE_ITERATIONS, DAUBECHIES_ORDER, GRID_LEVELS, LAST_LEVEL, PRIMARY_LEVEL
from errors import ConfigurationError, DimensionError

logger = logging.getLogger(__name__)

# Кэш построенных базисов: каскад и ортонормировка на 2^13 точках не бесплатны
CACHE_BASES = LRUCache(maxsize=8)
lock = Lock()


def uniform_grid(size: int) -> np.ndarray:
    """Равномерная сетка из size точек на [0, 1], концы включены"""
    return np.linspace(0.0, 1.0, size)


def trapezoid_weights(size: int) -> np.ndarray:
    """
    Веса квадратуры трапеций на равномерной сетке [0, 1]

    :param size: число точек сетки (>= 2)
    """
    if size < 2:
        raise ConfigurationError(f"grid needs at least 2 points, got {size}")
    step = 1.0 / (size - 1)
    weights = np.full(size, step)
    weights[0] = weights[-1] = step / 2
    return weights


@dataclass(frozen=True, eq=False)
class SampledCurve:
    """Вещественная функция, заданная значениями на равномерной сетке [0, 1]"""
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 1 or values.size < 2:
            raise DimensionError(f"a curve needs a 1-D array of at least 2 values, got shape {values.shape}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def grid_size(self) -> int:
        return self.values.size

    @property
    def grid(self) -> np.ndarray:
        return uniform_grid(self.values.size)

    def l2_norm(self) -> float:
        """Дискретная норма L2([0,1]) по формуле трапеций"""
        return float(np.sqrt(trapezoid(self.values ** 2, dx=1.0 / (self.grid_size - 1))))

    def __add__(self, other: "SampledCurve") -> "SampledCurve":
        if other.grid_size != self.grid_size:
            raise DimensionError(f"grids differ: {self.grid_size} vs {other.grid_size}")
        return SampledCurve(self.values + other.values)

    def __sub__(self, other: "SampledCurve") -> "SampledCurve":
        return self + other.scaled(-1.0)

    def scaled(self, factor: float) -> "SampledCurve":
        return SampledCurve(factor * self.values)


@dataclass(frozen=True, eq=False)
class WaveletDecomposition:
    """Масштабирующие коэффициенты alpha_{J,k} и детали beta_{j,k}, j = J..K, одной кривой"""
    alpha: np.ndarray
    beta: tuple
    primary_level: int

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=float)
        if alpha.shape != (2 ** self.primary_level,):
            raise DimensionError(f"alpha must hold {2 ** self.primary_level} values, got {alpha.shape}")
        beta = []
        for offset, detail in enumerate(self.beta):
            detail = np.array(detail, dtype=float)
            level = self.primary_level + offset
            if detail.shape != (2 ** level,):
                raise DimensionError(f"beta at level {level} must hold {2 ** level} values, got {detail.shape}")
            beta.append(detail)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", tuple(beta))

    @property
    def last_level(self) -> int:
        return self.primary_level + len(self.beta) - 1

    @property
    def size(self) -> int:
        return self.alpha.size + sum(detail.size for detail in self.beta)

    def vector(self) -> np.ndarray:
        """Все коэффициенты подряд: alpha, затем beta по уровням"""
        return np.concatenate([self.alpha, *self.beta])

    @classmethod
    def from_vector(cls, vector, primary_level: int, last_level: int) -> "WaveletDecomposition":
        vector = np.asarray(vector, dtype=float)
        expected = coefficient_count(primary_level, last_level)
        if vector.shape != (expected,):
            raise DimensionError(f"expected {expected} coefficients, got shape {vector.shape}")
        bounds = np.cumsum([2 ** primary_level] + [2 ** j for j in range(primary_level, last_level + 1)])
        parts = np.split(vector, bounds[:-1])
        return cls(parts[0], tuple(parts[1:]), primary_level)

    def scaled(self, factor: float) -> "WaveletDecomposition":
        return WaveletDecomposition.from_vector(factor * self.vector(), self.primary_level, self.last_level)


def coefficient_count(primary_level: int, last_level: int) -> int:
    """2^J + sum_{j=J..K} 2^j"""
    return 2 ** primary_level + sum(2 ** j for j in range(primary_level, last_level + 1))


@dataclass(frozen=True, eq=False)
class WaveletBasis:
    """
    Периодизированный базис Добеши на сетке.

    father - массив (2^J, N) функций phi_{J,k};
    mother - кортеж массивов (2^j, N) функций psi_{j,k}, j = J..K.
    """
    order: int
    grid_levels: int
    primary_level: int
    last_level: int
    father: np.ndarray
    mother: tuple = field(default=())

    def __post_init__(self):
        for table in (self.father, *self.mother):
            table.setflags(write=False)

    @property
    def grid_size(self) -> int:
        return self.father.shape[1]

    @property
    def grid(self) -> np.ndarray:
        return uniform_grid(self.grid_size)

    @property
    def levels(self) -> range:
        return range(self.primary_level, self.last_level + 1)

    @property
    def size(self) -> int:
        return coefficient_count(self.primary_level, self.last_level)

    @cached_property
    def matrix(self) -> np.ndarray:
        """Все функции базиса строками в порядке коэффициентов WaveletDecomposition.vector()"""
        stacked = np.vstack([self.father, *self.mother])
        stacked.setflags(write=False)
        return stacked

    @cached_property
    def weights(self) -> np.ndarray:
        return trapezoid_weights(self.grid_size)

    @cached_property
    def analysis(self) -> np.ndarray:
        """Матрица (N, P): значения на сетке -> коэффициенты"""
        table = (self.matrix * self.weights).T
        table.setflags(write=False)
        return table

    def gram(self) -> np.ndarray:
        """Дискретная матрица Грама базиса на его сетке"""
        return self.matrix @ self.analysis


def check_basis_params(order: int, grid_levels: int, primary_level: int, last_level: int) -> None:
    """Порядок N в [2, 20], 1 <= J <= K < L/2, сетка вмещает фильтр"""
    if not 2 <= order <= 20:
        raise ConfigurationError(f"Daubechies order must lie in [2, 20], got {order}")
    if primary_level < 1:
        raise ConfigurationError(f"primary level J must be at least 1, got {primary_level}")
    if last_level < primary_level:
        raise ConfigurationError(f"last level K={last_level} is below primary level J={primary_level}")
    if last_level >= grid_levels / 2:
        raise ConfigurationError(f"last level K={last_level} violates K < L/2 = {grid_levels / 2}")
    taps = 2 * order
    if 2 ** grid_levels < 2 * taps:
        raise ConfigurationError(f"grid of 2^{grid_levels} points is too coarse for {taps} filter taps")


def _periodized(table: np.ndarray, support: np.ndarray, level: int, shift: int, grid: np.ndarray) -> np.ndarray:
    """
    2^{j/2} sum_m f(2^j (x + m) - k), f задана таблицей каскада на support
    """
    period = 2 ** level
    start = np.mod(period * grid - shift, period)
    wraps = int(np.ceil(support[-1] / period)) + 1
    values = np.zeros_like(grid)
    for m in range(wraps):
        values += np.interp(start + m * period, support, table, left=0.0, right=0.0)
    return 2 ** (level / 2) * values


def _orthonormalize(functions: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Симметричная ортонормировка G^{-1/2} B в дискретном L2 с весами трапеций"""
    gram = (functions * weights) @ functions.T
    eigenvalues, vectors = np.linalg.eigh(gram)
    if eigenvalues[0] <= 1e-10 * eigenvalues[-1]:
        raise ConfigurationError("basis functions are linearly dependent on this grid")
    inverse_root = (vectors / np.sqrt(eigenvalues)) @ vectors.T
    return inverse_root @ functions


@cached(CACHE_BASES, lock=lock)
def build_basis(order: int = DAUBECHIES_ORDER, grid_levels: int = GRID_LEVELS,
                primary_level: int = PRIMARY_LEVEL, last_level: int = LAST_LEVEL) -> WaveletBasis:
    """
    Строит базис phi_{J,k}, psi_{j,k} каскадным алгоритмом из фильтров Добеши

    :param order: число нулевых моментов N (dbN)
    :param grid_levels: L, базис строится на 2^L точках [0, 1]
    :param primary_level: первичный уровень J
    :param last_level: последний уровень K (K < L/2)
    :return: WaveletBasis, ортонормированный на сетке
    """
    check_basis_params(order, grid_levels, primary_level, last_level)
    phi, psi, support = pywt.Wavelet(f"db{order}").wavefun(level=CASCADE_ITERATIONS)
    grid = uniform_grid(2 ** grid_levels)

    rows = [_periodized(phi, support, primary_level, k, grid) for k in range(2 ** primary_level)]
    for level in range(primary_level, last_level + 1):
        rows.extend(_periodized(psi, support, level, k, grid) for k in range(2 ** level))
    functions = _orthonormalize(np.array(rows), trapezoid_weights(grid.size))

    count = 2 ** primary_level
    father = functions[:count]
    mother = []
    for level in range(primary_level, last_level + 1):
        mother.append(functions[count:count + 2 ** level])
        count += 2 ** level
    logger.debug("built db%d basis on 2^%d points, J=%d, K=%d", order, grid_levels, primary_level, last_level)
    return WaveletBasis(order, grid_levels, primary_level, last_level, father, tuple(mother))


def coefficients(values, basis: WaveletBasis) -> np.ndarray:
    """
    Векторизованный анализ: (..., N) значений -> (..., P) коэффициентов

    :param values: значения кривых на сетке базиса
    :param basis: базис
    """
    values = np.asarray(values, dtype=float)
    if values.shape[-1] != basis.grid_size:
        raise DimensionError(f"curves have {values.shape[-1]} points but the basis grid has {basis.grid_size}; "
                             f"resample the basis first")
    return values @ basis.analysis


def synthesize(coeffs, basis: WaveletBasis) -> np.ndarray:
    """Векторизованный синтез: (..., P) коэффициентов -> (..., N) значений"""
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape[-1] != basis.size:
        raise DimensionError(f"expected {basis.size} coefficients, got {coeffs.shape[-1]}")
    return coeffs @ basis.matrix


def decompose(curve: SampledCurve, basis: WaveletBasis) -> WaveletDecomposition:
    """
    Коэффициенты alpha_{J,k} = <f, phi_{J,k}>, beta_{j,k} = <f, psi_{j,k}> (квадратура трапеций)

    :param curve: кривая на сетке базиса
    :param basis: базис
    """
    vector = coefficients(curve.values, basis)
    return WaveletDecomposition.from_vector(vector, basis.primary_level, basis.last_level)


def reconstruct(coeffs: WaveletDecomposition, basis: WaveletBasis) -> SampledCurve:
    """Сумма alpha phi + beta psi на сетке базиса"""
    if coeffs.primary_level != basis.primary_level or coeffs.last_level != basis.last_level:
        raise DimensionError(f"coefficients cover levels {coeffs.primary_level}..{coeffs.last_level}, "
                             f"basis covers {basis.primary_level}..{basis.last_level}")
    return SampledCurve(synthesize(coeffs.vector(), basis))


def resample_basis(basis: WaveletBasis, target_grid_size: int) -> WaveletBasis:
    """
    Переносит базис на другую равномерную сетку натуральным кубическим сплайном
    и заново нормирует каждую функцию в дискретном L2

    :param basis: исходный базис
    :param target_grid_size: число точек новой сетки (>= 2)
    """
    if target_grid_size < 2:
        raise ConfigurationError(f"target grid needs at least 2 points, got {target_grid_size}")
    if target_grid_size == basis.grid_size:
        functions = np.array(basis.matrix)
    else:
        spline = CubicSpline(basis.grid, basis.matrix, axis=1, bc_type="natural")
        functions = spline(uniform_grid(target_grid_size))
    weights = trapezoid_weights(target_grid_size)
    norms = np.sqrt((functions ** 2) @ weights)
    functions = functions / norms[:, None]

    count = 2 ** basis.primary_level
    father = functions[:count]
    mother = []
    for level in basis.levels:
        mother.append(functions[count:count + 2 ** level])
        count += 2 ** level
    return WaveletBasis(basis.order, basis.grid_levels, basis.primary_level, basis.last_level,
                        father, tuple(mother))
