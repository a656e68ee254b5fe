"""
Исключения библиотеки.

У каждого класса есть category - короткая метка, которую CLI печатает
одной строкой при ошибке.
"""


class ArbxError(Exception):
    """Базовая ошибка библиотеки"""
    category = "arbx"


class ConfigurationError(ArbxError, ValueError):
    """Недопустимые параметры модели, базиса или конфигурации"""
    category = "configuration"


class DomainError(ArbxError, ValueError):
    """Аргумент вне области определения функции"""
    category = "domain"


class DimensionError(ArbxError, ValueError):
    """Несовпадение сеток или размерностей коэффициентов"""
    category = "dimension"


class ModelError(ArbxError):
    """Ковариация не PSD, модель нестационарна и т.п."""
    category = "model"


class NumericError(ArbxError):
    """Сбой численного метода"""
    category = "numeric"


class TruncationError(NumericError):
    """C_{n,k_n} <= 0: нужно уменьшить k_n"""
    category = "truncation"


class DegenerateGapError(NumericError):
    """Совпадающие собственные значения в спектральных зазорах"""
    category = "degenerate_gap"


class IngestionError(ArbxError):
    """Ошибка чтения CSV станции"""
    category = "ingestion"

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ImputationError(ArbxError):
    """Столбец не содержит ни одного наблюдения"""
    category = "imputation"


class ExperimentError(ArbxError):
    """Слишком много пропущенных повторов в ячейке эксперимента"""
    category = "experiment"
