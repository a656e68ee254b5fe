"""
Реальные данные станции: чтение CSV, заполнение пропусков, месяцы по 31 точке,
удаление тренда и сезонности, LOOCV-прогноз ARBX(1) с b = 4 метеопеременными.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.interpolate import CubicSpline

from config import (BETA, DAUBECHIES_ORDER, DAYS_PER_MONTH, GRID_LEVELS, IMPUTATION_WINDOW, LAST_LEVEL,
                    PRIMARY_LEVEL, REAL_DATA_EPSILON, REAL_DATA_EXOGENOUS, SURROGATE_CYCLE, TRAINING_MONTHS,
                    TREND_DEGREE, reject_unknown)
from errors import ConfigurationError, DimensionError, ImputationError, IngestionError, NumericError
from estimator import (TRUNCATION_RULES, CoefficientSample, apply_coefficients, estimate_rho, from_coefficients,
                       truncation_level)
from mra import SampledCurve, WaveletBasis, build_basis, coefficients, resample_basis, synthesize, uniform_grid
from spaces import ExtendedState, SpaceParams

logger = logging.getLogger(__name__)

COLUMNS = ["pm10", "temp_mean", "pressure_mean", "wind_mean", "grad_temp_max"]
HEADER = ["date", *COLUMNS]
DATE_FORMAT = "%Y-%m-%d"


@dataclass(frozen=True, eq=False)
class StationSeries:
    """Суточный ряд станции: DataFrame с индексом-датой и столбцами COLUMNS, пропуски - NaN"""
    station_id: str
    frame: pd.DataFrame

    @property
    def dates(self) -> pd.DatetimeIndex:
        return self.frame.index

    @property
    def pm10(self) -> np.ndarray:
        return self.frame["pm10"].to_numpy()

    def column(self, name: str) -> np.ndarray:
        return self.frame[name].to_numpy()

    @property
    def missing(self) -> int:
        return int(self.frame.isna().sum().sum())


def load_station_csv(path: str | Path, station_id: str | None = None) -> StationSeries:
    """
    Читает CSV станции: date,pm10,temp_mean,pressure_mean,wind_mean,grad_temp_max

    :param path: путь к файлу (UTF-8, пустое поле - пропуск)
    :param station_id: идентификатор; по умолчанию имя файла без расширения
    """
    path = Path(path)
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except OSError as ex:
        raise IngestionError(f"cannot read {path}: {ex}") from ex
    except pd.errors.EmptyDataError as ex:
        raise IngestionError(f"{path} is empty", line=1) from ex
    except (pd.errors.ParserError, UnicodeDecodeError) as ex:
        raise IngestionError(f"{path}: {ex}") from ex

    if list(raw.columns) != HEADER:
        raise IngestionError(f"header must be {','.join(HEADER)}, got {','.join(map(str, raw.columns))}", line=1)
    raw = raw.fillna("")

    dates = pd.to_datetime(raw["date"].str.strip(), format=DATE_FORMAT, errors="coerce")
    if dates.isna().any():
        row = int(np.flatnonzero(dates.isna().to_numpy())[0])
        raise IngestionError(f"bad date {raw['date'].iloc[row]!r}", line=row + 2)

    frame = pd.DataFrame(index=pd.DatetimeIndex(dates, name="date"))
    for name in COLUMNS:
        text = raw[name].str.strip()
        values = pd.to_numeric(text.where(text != ""), errors="coerce")
        bad = values.isna().to_numpy() & (text != "").to_numpy()
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise IngestionError(f"bad {name} value {text.iloc[row]!r}", line=row + 2)
        frame[name] = values.to_numpy(dtype=float)

    steps = np.diff(frame.index.to_numpy()).astype("timedelta64[D]").astype(int)
    if steps.size:
        if (steps <= 0).any():
            row = int(np.flatnonzero(steps <= 0)[0]) + 1
            raise IngestionError(f"date {raw['date'].iloc[row]} is not after the previous one", line=row + 2)
        if (steps > 1).any():
            row = int(np.flatnonzero(steps > 1)[0]) + 1
            raise IngestionError(f"days missing before {raw['date'].iloc[row]}; the series must be daily",
                                 line=row + 2)
    logger.info("loaded %s: %d days, %d missing cells", path, len(frame), int(frame.isna().sum().sum()))
    return StationSeries(station_id or path.stem, frame)


def impute_missing(series: StationSeries, window: int = IMPUTATION_WINDOW) -> StationSeries:
    """
    Каждый пропуск - среднее до window ближайших наблюдений слева и справа.
    Окно берётся по наблюдённым значениям, поэтому одного прохода хватает и для длинных пропусков.
    """
    frame = series.frame.copy()
    for name in COLUMNS:
        values = frame[name].to_numpy(dtype=float, copy=True)
        missing = np.flatnonzero(np.isnan(values))
        if missing.size == 0:
            continue
        observed = np.flatnonzero(~np.isnan(values))
        if observed.size == 0:
            raise ImputationError(f"column {name} of station {series.station_id} has no observations")
        source = values.copy()
        for index in missing:
            pos = np.searchsorted(observed, index)
            neighbours = np.concatenate([observed[max(0, pos - window):pos], observed[pos:pos + window]])
            values[index] = source[neighbours].mean()
        frame[name] = values
        logger.debug("%s: filled %d missing %s values", series.station_id, missing.size, name)
    return StationSeries(series.station_id, frame)


def describe_station(series: StationSeries) -> pd.DataFrame:
    """min, mean, max, sd и процент пропусков по каждому столбцу"""
    frame = series.frame[COLUMNS]
    return pd.DataFrame({
        "min": frame.min(),
        "mean": frame.mean(),
        "max": frame.max(),
        "sd": frame.std(),
        "missing_pct": 100.0 * frame.isna().mean(),
    })


@dataclass(frozen=True, eq=False)
class MonthlyFunctionalSample:
    """
    Кривые по месяцам: curves (месяцы, 5, 31) без сдвига, labels - календарные месяцы.
    После detrend_deseasonalize хранит коэффициенты тренда (5, степень+1)
    и сезонный профиль (12, 5, 31) для обратного преобразования.
    """
    station_id: str
    curves: np.ndarray
    labels: tuple
    trend_coeffs: np.ndarray | None = None
    seasonal_profile: np.ndarray | None = None
    training_months: int | None = None

    @property
    def n_months(self) -> int:
        return self.curves.shape[0]

    @property
    def grid_size(self) -> int:
        return self.curves.shape[2]

    def state_array(self) -> np.ndarray:
        """
        Состояния (pm10_n, Z_{n+1,1..4}), массив (месяцы, 5, 31).
        Для последнего месяца Z следующего месяца неизвестен, берётся Z того же месяца.
        """
        states = np.array(self.curves)
        states[:-1, 1:] = self.curves[1:, 1:]
        return states

    @property
    def months(self) -> list[ExtendedState]:
        return [ExtendedState.from_array(state) for state in self.state_array()]

    def head(self, count: int) -> "MonthlyFunctionalSample":
        return replace(self, curves=self.curves[:count], labels=self.labels[:count])


def _to_grid(values: np.ndarray, points: int) -> np.ndarray:
    """Натуральный кубический сплайн по дням месяца -> points равноотстоящих точек [0, 1]"""
    spline = CubicSpline(uniform_grid(values.shape[0]), values, axis=0, bc_type="natural")
    return spline(uniform_grid(points))


def standardize_months(series: StationSeries, points: int = DAYS_PER_MONTH) -> MonthlyFunctionalSample:
    """
    Пересэмплирует каждый календарный месяц на points точек; неполные первый и последний месяцы отбрасываются
    """
    frame = series.frame[COLUMNS]
    if frame.isna().any().any():
        raise ImputationError(f"station {series.station_id} still has missing values; impute first")
    periods = frame.index.to_period("M")
    curves, labels, trimmed = [], [], []
    for period, chunk in frame.groupby(periods, sort=True):
        if len(chunk) != period.days_in_month:
            trimmed.append(str(period))
            continue
        curves.append(_to_grid(chunk.to_numpy(dtype=float), points).T)
        labels.append(period)
    if trimmed:
        logger.warning("station %s: partial months trimmed: %s", series.station_id, ", ".join(trimmed))
    if not curves:
        raise DimensionError(f"station {series.station_id} has no whole calendar month")
    return MonthlyFunctionalSample(series.station_id, np.array(curves), tuple(labels))


def _time_points(month_index, n_months: int, points: int) -> np.ndarray:
    """Глобальный индекс точек месяца, отмасштабированный так, что вся выборка лежит в [0, 1]"""
    month_index = np.atleast_1d(month_index)
    index = month_index[:, None] * points + np.arange(points)[None, :]
    return index / (n_months * points - 1)


def _fit_trend(t: np.ndarray, values: np.ndarray, degree: int) -> np.ndarray:
    design = np.vander(t.ravel(), degree + 1, increasing=True)
    if np.linalg.matrix_rank(design) < degree + 1:
        raise NumericError(f"trend design of degree {degree} is rank-deficient")
    coeffs, *_ = np.linalg.lstsq(design, values.ravel(), rcond=None)
    return coeffs


def _trend_values(coeffs: np.ndarray, t: np.ndarray) -> np.ndarray:
    """coeffs (переменные, степень+1), t (месяцы, точки) -> (месяцы, переменные, точки)"""
    powers = t[..., None] ** np.arange(coeffs.shape[1])
    return np.einsum("mpd,vd->mvp", powers, coeffs)


def detrend_deseasonalize(sample: MonthlyFunctionalSample, training_months: int = TRAINING_MONTHS,
                          degree: int = TREND_DEGREE) -> MonthlyFunctionalSample:
    """
    По каждой компоненте: полиномиальный тренд степени degree по глобальному индексу времени,
    подогнанный на первых training_months месяцах, затем вычитание средних кривых
    по календарным месяцам (тоже по обучающим месяцам)
    """
    n = sample.n_months
    if n < 13:
        raise DimensionError(f"detrending needs at least 13 months, got {n}")
    training = min(training_months, n)
    points = sample.grid_size
    t = _time_points(np.arange(n), n, points)
    trend_coeffs = np.vstack([_fit_trend(t[:training], sample.curves[:training, v], degree)
                              for v in range(sample.curves.shape[1])])
    residual = sample.curves - _trend_values(trend_coeffs, t)

    calendar = np.array([label.month - 1 for label in sample.labels])
    profile = np.zeros((12, *sample.curves.shape[1:]))
    for month in range(12):
        mask = calendar[:training] == month
        if mask.any():
            profile[month] = residual[:training][mask].mean(axis=0)
    detrended = residual - profile[calendar]
    return replace(sample, curves=detrended, trend_coeffs=trend_coeffs, seasonal_profile=profile,
                   training_months=training)


def select_trend_degree(sample: MonthlyFunctionalSample, max_degree: int = 4, tolerance: float = 0.05,
                        training_months: int = TRAINING_MONTHS) -> tuple[int, ...]:
    """
    Степень тренда по каждой переменной: наращивается, пока два соседних тренда
    различаются больше чем на tolerance (относительно в sup-норме)
    """
    n = sample.n_months
    training = min(training_months, n)
    t = _time_points(np.arange(n), n, sample.grid_size)
    degrees = []
    for v in range(sample.curves.shape[1]):
        chosen = max_degree
        previous = _fit_trend(t[:training], sample.curves[:training, v], 0)
        for degree in range(1, max_degree + 1):
            current = _fit_trend(t[:training], sample.curves[:training, v], degree)
            old = np.polynomial.polynomial.polyval(t, previous)
            new = np.polynomial.polynomial.polyval(t, current)
            scale = max(np.abs(old).max(), np.finfo(float).tiny)
            if np.abs(new - old).max() / scale < tolerance:
                chosen = degree - 1
                break
            previous = current
        degrees.append(chosen)
    return tuple(degrees)


def retrend(prediction, sample: MonthlyFunctionalSample, month_index: int, variable: int = 0) -> SampledCurve:
    """
    Возвращает кривую в исходные единицы: + тренд и сезонный профиль месяца month_index

    :param prediction: SampledCurve, ExtendedState (берётся компонента variable) или массив значений
    :param month_index: номер месяца от начала выборки, может быть за её концом
    """
    if sample.trend_coeffs is None or sample.seasonal_profile is None:
        raise ConfigurationError("sample has no stored trend and seasonal profile; detrend it first")
    if isinstance(prediction, ExtendedState):
        prediction = prediction.components[variable]
    values = prediction.values if isinstance(prediction, SampledCurve) else np.asarray(prediction, dtype=float)
    if values.shape != (sample.grid_size,):
        raise DimensionError(f"prediction must hold {sample.grid_size} values, got {values.shape}")
    t = _time_points(month_index, sample.n_months, sample.grid_size)
    trend = _trend_values(sample.trend_coeffs[variable:variable + 1], t)[0, 0]
    calendar = (sample.labels[0] + month_index).month - 1
    return SampledCurve(values + trend + sample.seasonal_profile[calendar, variable])


def pipeline_basis(order: int = DAUBECHIES_ORDER, grid_levels: int = GRID_LEVELS,
                   primary_level: int = PRIMARY_LEVEL, last_level: int = LAST_LEVEL,
                   points: int = DAYS_PER_MONTH) -> WaveletBasis:
    """Базис, перенесённый на сетку месяца"""
    return resample_basis(build_basis(order, grid_levels, primary_level, last_level), points)


def functional_coefficients(sample, basis: WaveletBasis | None = None, beta: float = BETA) -> CoefficientSample:
    """Вейвлет-коэффициенты состояний месяцев; CoefficientSample возвращается как есть"""
    if isinstance(sample, CoefficientSample):
        return sample
    basis = basis or pipeline_basis(points=sample.grid_size)
    return from_coefficients(coefficients(sample.state_array(), basis), basis, beta)


def _fold_prediction(sample: CoefficientSample, k_n: int, holdout: int, training: int) -> np.ndarray:
    last = training - 1
    if not 0 <= holdout < last:
        raise ConfigurationError(f"holdout must lie in 0..{last - 1}, got {holdout}")
    if sample.n <= training:
        raise DimensionError(f"LOOCV needs {training + 1} months, got {sample.n}")
    keep = [i for i in range(last) if i != holdout]
    fold = CoefficientSample(sample.coefficients[keep], sample.weights)
    if not np.any(fold.coefficients):
        return np.zeros_like(sample.coefficients[last])
    operator = estimate_rho(fold, k_n)
    return apply_coefficients(operator, sample.coefficients[last])


def loocv_predict(sample, k_n: int, holdout: int, basis: WaveletBasis | None = None, beta: float = BETA,
                  training_months: int = TRAINING_MONTHS) -> ExtendedState:
    """
    Прогноз X_50 по X_49 оценкой, построенной на месяцах 0..48 без месяца holdout
    (48 состояний: собственные значения с 1/48, перекрёстный член с 1/47)
    """
    basis = basis or pipeline_basis()
    coeffs = functional_coefficients(sample, basis, beta)
    return ExtendedState.from_array(synthesize(_fold_prediction(coeffs, k_n, holdout, training_months), basis))


def loocv_folds(sample, k_n: int, basis: WaveletBasis | None = None, beta: float = BETA,
                training_months: int = TRAINING_MONTHS, threads: int | None = None) -> np.ndarray:
    """Коэффициенты прогнозов всех фолдов h = 0..48, массив (фолды, 5, P), в порядке h"""
    coeffs = functional_coefficients(sample, basis, beta)
    with ThreadPoolExecutor(threads) as executor:
        folds = list(executor.map(lambda h: _fold_prediction(coeffs, k_n, h, training_months),
                                  range(training_months - 1)))
    logger.info("LOOCV: %d folds with k_n=%d", len(folds), k_n)
    return np.array(folds)


def cv_error(sample, k_n: int, basis: WaveletBasis | None = None, beta: float = BETA,
             training_months: int = TRAINING_MONTHS, threads: int | None = None) -> float:
    """E = среднее по фолдам ||X_50 - [X^_50]_h||_B-bar"""
    coeffs = functional_coefficients(sample, basis, beta)
    folds = loocv_folds(coeffs, k_n, training_months=training_months, threads=threads)
    target = coeffs.coefficients[training_months]
    return float(np.mean([np.abs(target - fold).max() for fold in folds]))


def baseline_error(sample, basis: WaveletBasis | None = None, beta: float = BETA,
                   training_months: int = TRAINING_MONTHS) -> float:
    """E нулевого прогноза: ||X_50||_B-bar"""
    coeffs = functional_coefficients(sample, basis, beta)
    return float(np.abs(coeffs.coefficients[training_months]).max())


@dataclass(frozen=True)
class ForecastConfig:
    rules: tuple = ("log2_sqrt", "ln_n_5_2")
    beta: float = BETA
    epsilon: float = REAL_DATA_EPSILON
    order: int = DAUBECHIES_ORDER
    grid_levels: int = GRID_LEVELS
    primary_level: int = PRIMARY_LEVEL
    last_level: int = LAST_LEVEL
    training_months: int = TRAINING_MONTHS
    trend_degree: int = TREND_DEGREE
    imputation_window: int = IMPUTATION_WINDOW
    threads: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "rules", tuple(self.rules))
        for rule in self.rules:
            if rule not in TRUNCATION_RULES:
                raise ConfigurationError(f"unknown truncation rule {rule!r}")
        SpaceParams.from_family("real_data", self.beta, REAL_DATA_EXOGENOUS, self.epsilon)
        if self.training_months < 13:
            raise ConfigurationError(f"training months must be >= 13, got {self.training_months}")
        if self.imputation_window < 1:
            raise ConfigurationError(f"imputation window must be >= 1, got {self.imputation_window}")

    @classmethod
    def from_dict(cls, data: dict) -> "ForecastConfig":
        reject_unknown(data, set(cls.__dataclass_fields__), "forecast")
        return cls(**data)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def basis(self) -> WaveletBasis:
        return pipeline_basis(self.order, self.grid_levels, self.primary_level, self.last_level)


@dataclass(frozen=True, eq=False)
class ForecastResult:
    """Ошибка LOOCV, ошибка нулевого прогноза и суточный прогноз PM10 целевого месяца"""
    station_id: str
    rule: str
    k_n: int
    error: float
    baseline: float
    predictions: pd.DataFrame


def prepare_sample(series: StationSeries, config: ForecastConfig) -> MonthlyFunctionalSample:
    """Заполнение пропусков, месяцы, первые training+1 месяцев, тренд и сезонность"""
    monthly = standardize_months(impute_missing(series, config.imputation_window))
    needed = config.training_months + 1
    if monthly.n_months < needed:
        raise DimensionError(f"station {series.station_id} has {monthly.n_months} whole months, need {needed}")
    return detrend_deseasonalize(monthly.head(needed), config.training_months, config.trend_degree)


def _daily_forecast(curve: SampledCurve, series: StationSeries, label: pd.Period) -> pd.DataFrame:
    days = pd.date_range(label.start_time, periods=label.days_in_month, freq="D")
    spline = CubicSpline(curve.grid, curve.values, bc_type="natural")
    predicted = spline(uniform_grid(days.size))
    observed = series.frame["pm10"].reindex(days).to_numpy()
    return pd.DataFrame({"date": days.strftime(DATE_FORMAT), "predicted": predicted, "observed": observed})


def run_forecast(path: str | Path, config: ForecastConfig | None = None,
                 rules=None) -> list[ForecastResult]:
    """
    Полный прогон одной станции по каждому правилу усечения.
    Прогноз целевого месяца - среднее прогнозов LOOCV-фолдов, в исходных единицах.
    """
    config = config or ForecastConfig()
    rules = tuple(rules or config.rules)
    series = load_station_csv(path)
    imputed = impute_missing(series, config.imputation_window)
    sample = prepare_sample(series, config)
    basis = config.basis()
    coeffs = functional_coefficients(sample, basis, config.beta)
    target = coeffs.coefficients[config.training_months]
    baseline = float(np.abs(target).max())

    results = []
    for rule in rules:
        k_n = truncation_level(config.training_months - 2, rule)
        folds = loocv_folds(coeffs, k_n, training_months=config.training_months, threads=config.threads)
        error = float(np.mean([np.abs(target - fold).max() for fold in folds]))
        mean_curve = SampledCurve(synthesize(folds.mean(axis=0)[0], basis))
        original = retrend(mean_curve, sample, config.training_months)
        label = sample.labels[config.training_months]
        results.append(ForecastResult(series.station_id, rule, k_n, error, baseline,
                                      _daily_forecast(original, imputed, label)))
        logger.info("station %s, rule %s (k_n=%d): E=%.4f, zero predictor E=%.4f",
                    series.station_id, rule, k_n, error, baseline)
    return results


def surrogate_cycle(days: pd.DatetimeIndex, first: pd.Period, months: int,
                    cycle_months: float = SURROGATE_CYCLE) -> np.ndarray:
    """
    Медленный цикл погоды cos(2 pi (t - t_last) / cycle_months) по дробному номеру месяца t;
    максимум приходится на середину последнего месяца
    """
    month_of_day = ((days.year - first.year) * 12 + days.month - first.month).to_numpy()
    elapsed = month_of_day + (days.day.to_numpy() - 0.5) / days.days_in_month.to_numpy()
    return np.cos(2 * math.pi * (elapsed - (months - 0.5)) / cycle_months)


def make_surrogate_station(seed: int = 0, start: str = "2007-01-01", months: int = 51,
                           missing_rate: float = 0.05, cycle_months: float = SURROGATE_CYCLE) -> pd.DataFrame:
    """
    Синтетическая станция в формате CSV: PM10 со средним около 19.6 и sd около 7.9.
    Давление и ветер следуют общему циклу с периодом cycle_months месяцев, PM10 растёт
    с давлением и падает с ветром того же месяца; суточный шум мал по сравнению с циклом,
    поэтому месяц X_n почти линейно определяет X_{n+1}
    """
    if months < 1:
        raise ConfigurationError(f"months must be >= 1, got {months}")
    if not 0 <= missing_rate < 1:
        raise ConfigurationError(f"missing rate must lie in [0, 1), got {missing_rate}")
    if cycle_months <= 1:
        raise ConfigurationError(f"cycle must be longer than a month, got {cycle_months}")
    rng = np.random.default_rng(seed)
    first = pd.Period(start, freq="M")
    days = pd.date_range(first.start_time, (first + months - 1).end_time.normalize(), freq="D")
    season = np.cos(2 * math.pi * (days.dayofyear.to_numpy() - 15) / 365.25)
    cycle = surrogate_cycle(days, first, months, cycle_months)

    size = days.size
    pm10 = 19.6 + 10.3 * cycle + 3.0 * season + _ar1(rng, size, 0.5, 2.0)
    frame = pd.DataFrame({
        "date": days.strftime(DATE_FORMAT),
        "pm10": np.round(np.clip(pm10, 6.0, 68.0), 1),
        "temp_mean": np.round(10.1 - 7.8 * season + _ar1(rng, size, 0.7, 1.2), 1),
        "pressure_mean": np.round(1016.25 + 10.0 * cycle + _ar1(rng, size, 0.6, 2.0), 1),
        "wind_mean": np.round(np.maximum(0.3, 4.13 - 1.2 * cycle + _ar1(rng, size, 0.5, 0.5)), 1),
        "grad_temp_max": np.round(1.0 + _ar1(rng, size, 0.4, 0.8), 2),
    })
    gaps = rng.random(size) < missing_rate
    frame["pm10"] = frame["pm10"].where(~gaps)
    return frame


def _ar1(rng: np.random.Generator, size: int, phi: float, sd: float) -> np.ndarray:
    """Стационарный AR(1) с маргинальным стандартным отклонением sd"""
    noise = rng.standard_normal(size) * sd * math.sqrt(1 - phi ** 2)
    values = np.empty(size)
    values[0] = rng.standard_normal() * sd
    for i in range(1, size):
        values[i] = phi * values[i - 1] + noise[i]
    return values


def write_station_csv(frame: pd.DataFrame, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame[HEADER].to_csv(path, index=False, na_rep="", lineterminator="\n", encoding="utf-8")
    return path
