"""
Монте-Карло эксперименты: доля повторов, в которых ошибка прогноза превышает
верхнюю границу, по объёмам выборки и по шагам дискретизации, и диагностические ряды.
"""
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import wraps
from pathlib import Path
from time import time

import numpy as np
import pandas as pd

from config import (BETA, BURN_IN, DAUBECHIES_ORDER, EXOGENOUS, GRID_LEVELS, LAST_LEVEL, PRIMARY_LEVEL, SINE_TERMS,
                    SKIP_LIMIT, TRIAL_STATES, W, reject_unknown)
from errors import ConfigurationError, DegenerateGapError, ExperimentError, TruncationError
from estimator import (TRUNCATION_RULES, a3_series, apply_coefficients, consistency_ratio, eigendecompose,
                       empirical_autocovariance, error_upper_bound, estimate_rho, from_coefficients,
                       truncation_level)
from mra import WaveletBasis, build_basis, resample_basis
from procgen import (ModelSpec, build_model_spec, covariance_spectrum, grid_size_for, operator_in_wavelets,
                     simulate, trajectory_coefficients, wavelet_transfer)
from spaces import GAMMA_FAMILIES

logger = logging.getLogger(__name__)

EIGENVALUE_SOURCES = ("theoretical", "empirical")
TABLE_COLUMNS = ["n", "delta_h", "gamma_family", "exceed", "total", "pct"]


def time_score(func):
    """Декоратор для трекинга времени выполнения функции"""

    @wraps(func)
    def wrapper(*args, **kwargs):
        start = time()
        res = func(*args, **kwargs)
        logger.info("%s took %.2f seconds", func.__name__, time() - start)
        return res

    return wrapper


def discretization_steps(count: int) -> tuple[float, ...]:
    """dh_j = 3^{-(2+j)}, j = 1..count"""
    return tuple(3.0 ** -(2 + j) for j in range(1, count + 1))


@dataclass(frozen=True)
class ExperimentConfig:
    sample_sizes: tuple = (1500, 2500, 5000)
    replicates: int = 50
    gamma_families: tuple = ("gamma1",)
    discretization_steps: tuple = ()
    truncation_rule: str = "log_n"
    rng_seed: int = 0
    output_path: str = "table1.csv"
    b: int = EXOGENOUS
    beta: float = BETA
    W: float = W
    M: int = SINE_TERMS
    burn_in: int = BURN_IN
    eigenvalue_source: str = "theoretical"
    order: int = DAUBECHIES_ORDER
    grid_levels: int = GRID_LEVELS
    primary_level: int = PRIMARY_LEVEL
    last_level: int = LAST_LEVEL
    ks: tuple = ()
    trials: int = TRIAL_STATES
    threads: int | None = None

    def __post_init__(self):
        for name in ("sample_sizes", "gamma_families", "discretization_steps", "ks"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.replicates < 1:
            raise ConfigurationError(f"replicates must be >= 1, got {self.replicates}")
        if not self.sample_sizes or min(self.sample_sizes) < 10:
            raise ConfigurationError(f"sample sizes must be >= 10, got {list(self.sample_sizes)}")
        for step in self.discretization_steps:
            if not 0 < step < 0.5:
                raise ConfigurationError(f"discretization steps must lie in (0, 0.5), got {step}")
        if self.truncation_rule not in TRUNCATION_RULES:
            raise ConfigurationError(f"unknown truncation rule {self.truncation_rule!r}")
        if not self.gamma_families:
            raise ConfigurationError("at least one gamma family is needed")
        for family in self.gamma_families:
            if family not in GAMMA_FAMILIES:
                raise ConfigurationError(f"unknown gamma family {family!r}")
        if self.eigenvalue_source not in EIGENVALUE_SOURCES:
            raise ConfigurationError(f"eigenvalue source must be one of {', '.join(EIGENVALUE_SOURCES)}")
        if self.threads is not None and self.threads < 1:
            raise ConfigurationError(f"threads must be >= 1, got {self.threads}")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        if "gamma_family" in data:
            data["gamma_families"] = [data.pop("gamma_family")]
        reject_unknown(data, set(cls.__dataclass_fields__), "experiment")
        return cls(**data)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @property
    def workers(self) -> int:
        return self.threads or os.cpu_count() or 1

    def model(self, family: str, grid_size: int) -> ModelSpec:
        return build_model_spec(self.b, self.beta, family, W=self.W, M=self.M, grid_size=grid_size,
                                burn_in=self.burn_in)

    def basis(self) -> WaveletBasis:
        return build_basis(self.order, self.grid_levels, self.primary_level, self.last_level)


@dataclass(frozen=True)
class ExceedanceRow:
    n: int
    delta_h: float
    gamma_family: str
    exceed: int
    total: int
    skipped: int = 0

    @property
    def pct(self) -> float:
        return 100.0 * self.exceed / self.total


@dataclass
class ExceedanceTable:
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        records = [{"n": r.n, "delta_h": r.delta_h, "gamma_family": r.gamma_family, "exceed": r.exceed,
                    "total": r.total, "pct": r.pct} for r in self.rows]
        return pd.DataFrame(records, columns=TABLE_COLUMNS)

    def write(self, path: str | Path) -> Path:
        """CSV таблицы и JSON с метаданными рядом (<path>.meta.json)"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, lineterminator="\n")
        meta = path.with_name(path.name + ".meta.json")
        meta.write_text(json.dumps(self.metadata, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        logger.info("wrote %s and %s", path, meta)
        return path


@dataclass(frozen=True)
class ReplicateOutcome:
    error: float | None
    bound: float | None
    skipped: str | None = None

    @property
    def exceeded(self) -> bool:
        return self.skipped is None and self.error > self.bound


def replicate_seed(root: int, family_index: int, n: int, step_index: int, replicate: int) -> np.random.SeedSequence:
    """Независимый поток для каждой ячейки и повтора"""
    return np.random.SeedSequence(root, spawn_key=(family_index, n, step_index, replicate))


def run_replicate(spec: ModelSpec, n: int, basis: WaveletBasis, rule: str, seed,
                  eigenvalue_source: str = "theoretical") -> ReplicateOutcome:
    """
    Один повтор: траектория, оценка с k_n по правилу, ошибка ||rho(X_n) - X^_n||_B-bar и граница

    :param spec: модель; сетка траектории совпадает с сеткой basis
    :param basis: вейвлет-базис на сетке траектории
    """
    trajectory = simulate(spec, n, rng_seed=seed, discretization=1.0 / (basis.grid_size - 1))
    coeffs = trajectory_coefficients(trajectory, basis)
    sample = from_coefficients(coeffs, basis, spec.beta)
    k_n = truncation_level(n, rule)
    try:
        eigensystem = eigendecompose(empirical_autocovariance(sample))
        operator = estimate_rho(sample, k_n, eigensystem=eigensystem)
        if eigenvalue_source == "theoretical":
            eigenvalues = covariance_spectrum(spec.state_covariance)
        else:
            eigenvalues = eigensystem.eigenvalues
        bound = error_upper_bound(float(np.abs(coeffs[0]).max()), eigenvalues, n, k_n)
    except (DegenerateGapError, TruncationError) as ex:
        logger.debug("replicate skipped: %s", ex)
        return ReplicateOutcome(None, None, ex.category)

    # rho-bar(X_n) в синус-базисе, затем в вейвлеты той же матрицей перехода
    following = spec.autocorrelation.apply(trajectory.coefficients[-1])
    truth = following @ wavelet_transfer(spec.M, basis)
    prediction = apply_coefficients(operator, coeffs[-1])
    error = float(np.abs(truth - prediction).max())
    logger.debug("n=%d k_n=%d error=%.4g bound=%.4g", n, k_n, error, bound)
    return ReplicateOutcome(error, bound)


def run_cell(config: ExperimentConfig, spec: ModelSpec, basis: WaveletBasis, n: int, delta_h: float,
             family_index: int, step_index: int) -> ExceedanceRow:
    """Все повторы одной ячейки (n, dh, семейство); порядок слияния фиксирован"""
    seeds = [replicate_seed(config.rng_seed, family_index, n, step_index, r) for r in range(config.replicates)]
    with ThreadPoolExecutor(config.workers) as executor:
        outcomes = list(executor.map(
            lambda seed: run_replicate(spec, n, basis, config.truncation_rule, seed, config.eigenvalue_source),
            seeds))
    skipped = sum(1 for o in outcomes if o.skipped is not None)
    if skipped > SKIP_LIMIT * config.replicates:
        raise ExperimentError(f"cell n={n}, delta_h={delta_h:.4g}, {spec.gamma_family}: "
                              f"{skipped} of {config.replicates} replicates skipped")
    if skipped:
        logger.warning("cell n=%d, %s: %d replicates skipped", n, spec.gamma_family, skipped)
    exceed = sum(1 for o in outcomes if o.exceeded)
    row = ExceedanceRow(n, delta_h, spec.gamma_family, exceed, len(outcomes) - skipped, skipped)
    logger.info("cell n=%d delta_h=%.4g %s: %d/%d exceed (%.1f%%)", n, delta_h, spec.gamma_family,
                row.exceed, row.total, row.pct)
    return row


def _metadata(config: ExperimentConfig, cells: list) -> dict:
    return {"config": config.to_dict(), "cells": cells}


@time_score
def run_consistency_experiment(config: ExperimentConfig) -> ExceedanceTable:
    """Доля превышений границы по объёмам выборки; траектории на сетке базиса"""
    basis = config.basis()
    delta_h = 1.0 / (basis.grid_size - 1)
    table = ExceedanceTable()
    cells = []
    for family_index, family in enumerate(config.gamma_families):
        spec = config.model(family, basis.grid_size)
        for n in config.sample_sizes:
            row = run_cell(config, spec, basis, n, delta_h, family_index, 0)
            table.rows.append(row)
            cells.append({"n": n, "delta_h": delta_h, "gamma_family": family, "skipped": row.skipped,
                          "seed_key": [config.rng_seed, family_index, n, 0]})
    table.metadata = _metadata(config, cells)
    return table


@time_score
def run_discretization_sweep(config: ExperimentConfig) -> ExceedanceTable:
    """Доля превышений по шагам dh: траектории на floor(1/dh)+1 точках, базис пересэмплирован туда же"""
    if not config.discretization_steps:
        raise ConfigurationError("the discretization sweep needs discretization_steps")
    base = config.basis()
    table = ExceedanceTable()
    cells = []
    for step_index, step in enumerate(config.discretization_steps, start=1):
        basis = resample_basis(base, grid_size_for(step))
        for family_index, family in enumerate(config.gamma_families):
            spec = config.model(family, basis.grid_size)
            for n in config.sample_sizes:
                row = run_cell(config, spec, basis, n, step, family_index, step_index)
                table.rows.append(row)
                cells.append({"n": n, "delta_h": step, "gamma_family": family, "skipped": row.skipped,
                              "seed_key": [config.rng_seed, family_index, n, step_index]})
    table.metadata = _metadata(config, cells)
    return table


def emit_diagnostics(config: ExperimentConfig, out_dir: str | Path) -> list[Path]:
    """
    a3_series.csv: (k, l_k, l_k_htilde) для последнего n; consistency_ratio.csv: (n, k_n, ratio)

    :return: пути записанных файлов
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    basis = config.basis()
    spec = config.model(config.gamma_families[0], basis.grid_size)
    spectrum = covariance_spectrum(spec.state_covariance)

    n = config.sample_sizes[-1]
    trajectory = simulate(spec, n, rng_seed=replicate_seed(config.rng_seed, 0, n, 0, 0),
                          discretization=1.0 / (basis.grid_size - 1))
    sample = from_coefficients(trajectory_coefficients(trajectory, basis), basis, spec.beta)
    eigensystem = eigendecompose(empirical_autocovariance(sample))
    ks = config.ks or tuple(range(0, min(truncation_level(n, config.truncation_rule), eigensystem.rank) + 1))
    truth = operator_in_wavelets(spec.autocorrelation, basis)
    series = a3_series(truth, eigensystem, ks, config.trials, np.random.SeedSequence(config.rng_seed))
    a3_path = out_dir / "a3_series.csv"
    pd.DataFrame(series, columns=["k", "l_k", "l_k_htilde"]).to_csv(a3_path, index=False, lineterminator="\n")

    ratios = []
    for size in config.sample_sizes:
        k_n = truncation_level(size, config.truncation_rule)
        ratios.append((size, k_n, consistency_ratio(spectrum, size, k_n)))
    ratio_path = out_dir / "consistency_ratio.csv"
    pd.DataFrame(ratios, columns=["n", "k_n", "ratio"]).to_csv(ratio_path, index=False, lineterminator="\n")
    logger.info("wrote %s and %s", a3_path, ratio_path)
    return [a3_path, ratio_path]
