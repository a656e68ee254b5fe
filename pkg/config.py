"""
Параметры сценария по умолчанию, настройка логирования и чтение JSON-конфигураций
"""
import json
import logging
import os
from pathlib import Path

from errors import ConfigurationError

VERSION = "0.3.0"

# Вейвлеты Добеши: порядок N, 2^L точек сетки, уровни J..K
DAUBECHIES_ORDER = 10
GRID_LEVELS = 13
PRIMARY_LEVEL = 2
LAST_LEVEL = 6
# Число итераций каскадного алгоритма
CASCADE_ITERATIONS = 10

# Пространства функций
BETA = 3 / 5
# Эпсилон для реальных данных: gamma = 2 * beta + epsilon
REAL_DATA_EPSILON = 0.01

# Симулируемая модель
EXOGENOUS = 3
W = 0.4
SINE_TERMS = 50
BURN_IN = 200
GRID_SIZE = 64
# Допуск на отрицательные собственные значения ковариаций
PSD_TOLERANCE = 1e-8
# Максимальная степень rho^j в проверке стационарности
RADIUS_POWERS = 20

# Оценка и диагностика
TRIAL_STATES = 200
GAP_TOLERANCE = 1e-12
SKIP_LIMIT = 0.10

# Реальные данные
REAL_DATA_EXOGENOUS = 4
IMPUTATION_WINDOW = 5
DAYS_PER_MONTH = 31
TRAINING_MONTHS = 50
TREND_DEGREE = 2
# Период цикла погоды синтетической станции, месяцев
SURROGATE_CYCLE = 20

# Переменная окружения с уровнем логирования
LOG_ENV = "ARBX_LOG"
LOG_FORMAT = "[%(levelname)s] %(name)s: %(message)s"


def setup_logging(level: str | int | None = None) -> None:
    """
    Настраивает корневой логгер один раз

    :param level: уровень; если None - берётся из ARBX_LOG, иначе WARNING
    """
    if level is None:
        level = os.environ.get(LOG_ENV, "WARNING")
    if isinstance(level, str):
        level = logging.getLevelName(level.strip().upper())
        if not isinstance(level, int):
            level = logging.WARNING
    root = logging.getLogger()
    if not root.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(handler)
    root.setLevel(level)


def load_json(path: str | Path) -> dict:
    """
    Читает JSON-конфигурацию

    :param path: путь к файлу
    :return: словарь верхнего уровня
    """
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as ex:
        raise ConfigurationError(f"cannot read config {path}: {ex}") from ex
    except json.JSONDecodeError as ex:
        raise ConfigurationError(f"config {path} is not valid JSON: {ex}") from ex
    if not isinstance(data, dict):
        raise ConfigurationError(f"config {path} must hold a JSON object")
    return data


def reject_unknown(data: dict, allowed: set[str], what: str) -> None:
    """Проверяет, что в словаре нет лишних ключей"""
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigurationError(f"unknown {what} keys: {', '.join(unknown)}")
