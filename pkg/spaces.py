"""
Нормы Бесова/Соболева и скалярные произведения на вейвлет-коэффициентах,
их расширение на (b+1)-наборы кривых.

B = B^0_{inf,inf}, B* = B^0_{1,1}, H~ = B^{-beta}_{2,2}, H(X) = B^{gamma}_{2,2}.
Веса уровней: 2^{2 j s}, для блока alpha берётся уровень J.
"""
import math
from dataclasses import dataclass

import numpy as np

from config import BETA, REAL_DATA_EPSILON
from errors import ConfigurationError, DimensionError
from mra import SampledCurve, WaveletBasis, WaveletDecomposition, coefficients

GAMMA_FAMILIES = ("gamma1", "gamma2", "real_data")


def gamma_family(name: str, beta: float = BETA, count: int = 4,
                 epsilon: float = REAL_DATA_EPSILON) -> tuple[float, ...]:
    """
    Параметрические семейства gamma_i, i = 1..count

    :param name: gamma1 (2b + i/10), gamma2 (2b + log10(i+1)) или real_data (2b + epsilon)
    :param beta: индекс гладкости beta
    :param count: число компонент b+1
    :param epsilon: сдвиг для real_data
    """
    if name == "gamma1":
        return tuple(2 * beta + i / 10 for i in range(1, count + 1))
    if name == "gamma2":
        return tuple(2 * beta + math.log10(i + 1) for i in range(1, count + 1))
    if name == "real_data":
        return tuple(2 * beta + epsilon for _ in range(count))
    raise ConfigurationError(f"unknown gamma family {name!r}; expected one of {', '.join(GAMMA_FAMILIES)}")


@dataclass(frozen=True)
class SpaceParams:
    """Индекс beta пространства H~ и индексы gamma_i RKHS компонент"""
    beta: float
    gamma: tuple
    b: int

    def __post_init__(self):
        object.__setattr__(self, "gamma", tuple(float(g) for g in self.gamma))
        if self.b < 0:
            raise ConfigurationError(f"number of exogenous variables must be non-negative, got {self.b}")
        if len(self.gamma) != self.b + 1:
            raise ConfigurationError(f"gamma must hold b+1 = {self.b + 1} values, got {len(self.gamma)}")
        if not self.beta > 0.5:
            raise ConfigurationError("beta must exceed 1/2")
        for i, value in enumerate(self.gamma):
            if not value > 2 * self.beta:
                raise ConfigurationError(f"gamma[{i}] = {value} must exceed 2*beta = {2 * self.beta}")

    @classmethod
    def from_family(cls, name: str, beta: float = BETA, b: int = 3,
                    epsilon: float = REAL_DATA_EPSILON) -> "SpaceParams":
        return cls(beta, gamma_family(name, beta, b + 1, epsilon), b)


@dataclass(frozen=True, eq=False)
class ExtendedState:
    """
    X_n = (X_n, Z_{n+1,1}, ..., Z_{n+1,b}): первая компонента эндогенная,
    остальные - экзогенные со сдвигом вперёд на один шаг
    """
    components: tuple

    def __post_init__(self):
        components = tuple(c if isinstance(c, SampledCurve) else SampledCurve(c) for c in self.components)
        if not components:
            raise DimensionError("an extended state needs at least one component")
        sizes = {c.grid_size for c in components}
        if len(sizes) != 1:
            raise DimensionError(f"components live on different grids: {sorted(sizes)}")
        object.__setattr__(self, "components", components)

    @classmethod
    def from_array(cls, values) -> "ExtendedState":
        """Из массива (b+1, N)"""
        return cls(tuple(SampledCurve(row) for row in np.asarray(values, dtype=float)))

    @property
    def b(self) -> int:
        return len(self.components) - 1

    @property
    def grid_size(self) -> int:
        return self.components[0].grid_size

    def as_array(self) -> np.ndarray:
        return np.vstack([c.values for c in self.components])

    def __add__(self, other: "ExtendedState") -> "ExtendedState":
        _check_compatible(self, other)
        return ExtendedState.from_array(self.as_array() + other.as_array())

    def __sub__(self, other: "ExtendedState") -> "ExtendedState":
        _check_compatible(self, other)
        return ExtendedState.from_array(self.as_array() - other.as_array())

    def scaled(self, factor: float) -> "ExtendedState":
        return ExtendedState.from_array(factor * self.as_array())


def _check_compatible(x: ExtendedState, y: ExtendedState) -> None:
    if len(x.components) != len(y.components):
        raise DimensionError(f"states have {len(x.components)} and {len(y.components)} components")
    if x.grid_size != y.grid_size:
        raise DimensionError(f"states live on grids of {x.grid_size} and {y.grid_size} points")


def level_weights(primary_level: int, last_level: int, smoothness: float) -> np.ndarray:
    """
    Вес 2^{2 j s} для каждого коэффициента в порядке WaveletDecomposition.vector()

    :param smoothness: s = -beta для H~, s = gamma для H^gamma
    """
    levels = [primary_level] * 2 ** primary_level
    for level in range(primary_level, last_level + 1):
        levels.extend([level] * 2 ** level)
    return 2.0 ** (2 * np.array(levels, dtype=float) * smoothness)


def htilde_weights(basis: WaveletBasis, beta: float = BETA) -> np.ndarray:
    return level_weights(basis.primary_level, basis.last_level, -beta)


def embedding_constant(primary_level: int, last_level: int, beta: float = BETA) -> float:
    """sqrt(сумма весов H~): ||f||_H~ <= C ||f||_B"""
    return float(np.sqrt(level_weights(primary_level, last_level, -beta).sum()))


def b_sup_norm(f: WaveletDecomposition) -> float:
    """Норма B^0_{inf,inf}: sup |alpha|, |beta|"""
    vector = f.vector()
    return float(np.abs(vector).max()) if vector.size else 0.0


def b_star_norm(f: WaveletDecomposition) -> float:
    """Норма B^0_{1,1}: сумма модулей всех коэффициентов"""
    return float(np.abs(f.vector()).sum())


def _check_shapes(f: WaveletDecomposition, g: WaveletDecomposition) -> None:
    if f.primary_level != g.primary_level or f.last_level != g.last_level:
        raise DimensionError(f"decompositions cover levels {f.primary_level}..{f.last_level} "
                             f"and {g.primary_level}..{g.last_level}")


def htilde_inner(f: WaveletDecomposition, g: WaveletDecomposition, beta: float = BETA) -> float:
    """Скалярное произведение в B^{-beta}_{2,2}"""
    _check_shapes(f, g)
    weights = level_weights(f.primary_level, f.last_level, -beta)
    return float(np.sum(weights * f.vector() * g.vector()))


def sobolev_norm(f: WaveletDecomposition, gamma: float) -> float:
    """Норма H^gamma_2 = B^gamma_{2,2}"""
    weights = level_weights(f.primary_level, f.last_level, gamma)
    return float(np.sqrt(np.sum(weights * f.vector() ** 2)))


def state_coefficients(x: ExtendedState, basis: WaveletBasis) -> np.ndarray:
    """Коэффициенты всех компонент, массив (b+1, P)"""
    return coefficients(x.as_array(), basis)


def ext_sup_norm(x: ExtendedState, basis: WaveletBasis) -> float:
    """Норма B-bar: максимум b_sup_norm по компонентам"""
    return float(np.abs(state_coefficients(x, basis)).max())


def ext_star_norm(x: ExtendedState, basis: WaveletBasis) -> float:
    """Норма B-bar*: сумма b_star_norm по компонентам"""
    return float(np.abs(state_coefficients(x, basis)).sum())


def ext_inner(x: ExtendedState, y: ExtendedState, basis: WaveletBasis, beta: float = BETA) -> float:
    """Сумма покомпонентных скалярных произведений H~"""
    _check_compatible(x, y)
    weights = htilde_weights(basis, beta)
    return float(np.sum(weights * state_coefficients(x, basis) * state_coefficients(y, basis)))
