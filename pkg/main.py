"""
Точка входа: python main.py <команда> [флаги]

Команды: simulate, experiment, sweep, diagnostics, forecast, validate, surrogate.
Рядом с каждым результатом пишется <out>.meta.json с разрешённой конфигурацией,
версией и зерном.
"""
import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from config import VERSION, load_json, reject_unknown, setup_logging
from errors import ArbxError, ConfigurationError, ModelError
from estimator import TRUNCATION_RULES
from experiments import (ExperimentConfig, discretization_steps, emit_diagnostics, run_consistency_experiment,
                         run_discretization_sweep)
from mra import check_basis_params
from pipeline import ForecastConfig, make_surrogate_station, run_forecast, write_station_csv
from procgen import model_spec_from_dict, model_spec_to_dict, simulate, spectral_radius_check

logger = logging.getLogger(__name__)

COMMANDS = ("simulate", "experiment", "sweep", "diagnostics", "forecast", "validate", "surrogate")


@dataclass(frozen=True)
class RunConfig:
    """Разрешённые параметры одного запуска"""
    command: str
    model: dict
    io: dict
    seed: int | None = None
    threads: int | None = None

    def echo(self) -> dict:
        return {"command": self.command, "config": self.model, "io": self.io, "seed": self.seed,
                "threads": self.threads, "version": VERSION}


def write_meta(run_config: RunConfig, out: str | Path) -> Path:
    meta = Path(f"{out}.meta.json")
    meta.parent.mkdir(parents=True, exist_ok=True)
    meta.write_text(json.dumps(run_config.echo(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return meta


def read_config(path: str | None) -> dict:
    """JSON-конфигурация; эхо из .meta.json тоже принимается (берётся его раздел config)"""
    if path is None:
        return {}
    data = load_json(path)
    if "version" in data and isinstance(data.get("config"), dict):
        return data["config"]
    return data


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="arbx", description="ARBX(1) simulation, estimation and forecasting")
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")
    commands = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub = commands.add_parser(name)
        sub.add_argument("--config", help="JSON configuration file")
        sub.add_argument("--seed", type=int, help="root random seed")
        sub.add_argument("--out", help="output path")
        sub.add_argument("--threads", type=int, help="worker threads (default: all cores)")
        if name in ("simulate", "experiment", "sweep", "diagnostics"):
            sub.add_argument("--n", type=int, help="sample size")
        if name == "forecast":
            sub.add_argument("--station", action="append", required=True, help="station CSV, may repeat")
            sub.add_argument("--rule", choices=TRUNCATION_RULES, help="truncation rule for k_n")
    return parser


def cmd_simulate(args) -> int:
    model = read_config(args.config)
    spec = model_spec_from_dict(model)
    n = args.n or 1000
    seed = 0 if args.seed is None else args.seed
    trajectory = simulate(spec, n, rng_seed=seed)
    values = trajectory.values()
    grid = np.linspace(0.0, 1.0, values.shape[2])
    index = pd.MultiIndex.from_product([range(n), range(spec.b + 1), range(grid.size)],
                                       names=["state", "component", "point"])
    frame = pd.DataFrame({"x": np.tile(grid, n * (spec.b + 1)), "value": values.ravel()}, index=index)
    out = Path(args.out or "trajectory.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    frame.reset_index().to_csv(out, index=False, lineterminator="\n")
    write_meta(RunConfig("simulate", model_spec_to_dict(spec), {"out": str(out), "n": n}, seed, args.threads), out)
    print(f"wrote {out}: {n} states, j0={spectral_radius_check(spec).j0}")
    return 0


def _experiment_config(args, sweep: bool = False) -> ExperimentConfig:
    config = ExperimentConfig.from_dict(read_config(args.config))
    if args.seed is not None:
        config = replace(config, rng_seed=args.seed)
    if args.threads is not None:
        config = replace(config, threads=args.threads)
    if args.n is not None:
        config = replace(config, sample_sizes=(args.n,))
    if sweep and not config.discretization_steps:
        config = replace(config, discretization_steps=discretization_steps(3))
    return config


def _run_table(args, command: str, runner, sweep: bool) -> int:
    config = _experiment_config(args, sweep)
    table = runner(config)
    out = Path(args.out or config.output_path)
    echo = RunConfig(command, config.to_dict(), {"out": str(out)}, config.rng_seed, config.threads).echo()
    table.metadata = {**echo, "cells": table.metadata.get("cells", [])}
    table.write(out)
    print(table.to_frame().to_string(index=False))
    return 0


def cmd_experiment(args) -> int:
    return _run_table(args, "experiment", run_consistency_experiment, sweep=False)


def cmd_sweep(args) -> int:
    return _run_table(args, "sweep", run_discretization_sweep, sweep=True)


def cmd_diagnostics(args) -> int:
    config = _experiment_config(args)
    out = Path(args.out or "diagnostics")
    paths = emit_diagnostics(config, out)
    write_meta(RunConfig("diagnostics", config.to_dict(), {"out": str(out)}, config.rng_seed, config.threads), out)
    for path in paths:
        print(f"wrote {path}")
    return 0


def cmd_forecast(args) -> int:
    config = ForecastConfig.from_dict(read_config(args.config))
    if args.rule is not None:
        config = replace(config, rules=(args.rule,))
    if args.threads is not None:
        config = replace(config, threads=args.threads)
    out = Path(args.out or "forecast.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    single = len(args.station) == 1 and len(config.rules) == 1

    errors = []
    for station in args.station:
        for result in run_forecast(station, config):
            target = out if single else out.with_name(f"{out.stem}_{result.station_id}_{result.rule}{out.suffix}")
            result.predictions.to_csv(target, index=False, lineterminator="\n")
            errors.append({"station": result.station_id, "truncation_rule": result.rule, "E": result.error,
                           "baseline_E": result.baseline, "k_n": result.k_n})
            print(f"{result.station_id} {result.rule} k_n={result.k_n} E={result.error:.6f} "
                  f"zero-predictor E={result.baseline:.6f}")

    errors_path = out.with_name(f"{out.stem}_errors.csv")
    pd.DataFrame(errors)[["station", "truncation_rule", "E"]].to_csv(errors_path, index=False, lineterminator="\n")
    io = {"out": str(out), "errors": str(errors_path), "stations": list(args.station), "results": errors}
    write_meta(RunConfig("forecast", config.to_dict(), io, args.seed, config.threads), out)
    return 0


def cmd_surrogate(args) -> int:
    options = read_config(args.config)
    reject_unknown(options, {"start", "months", "missing_rate", "cycle_months"}, "surrogate")
    seed = 0 if args.seed is None else args.seed
    out = write_station_csv(make_surrogate_station(seed, **options), args.out or "surrogate.csv")
    write_meta(RunConfig("surrogate", options, {"out": str(out)}, seed, args.threads), out)
    print(f"wrote {out}")
    return 0


@dataclass
class ValidationReport:
    path: str
    kind: str
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(ok for _, ok, _ in self.checks)

    def add(self, name: str, func) -> None:
        try:
            func()
        except ArbxError as ex:
            self.checks.append((name, False, str(ex)))
        else:
            self.checks.append((name, True, ""))

    def lines(self) -> list[str]:
        return [f"{'PASS' if ok else 'FAIL'} {name}" + (f": {message}" if message else "")
                for name, ok, message in self.checks]


def _config_kind(data: dict) -> str:
    if {"sample_sizes", "replicates", "gamma_families", "discretization_steps"} & set(data):
        return "experiment"
    if {"rules", "training_months", "epsilon", "imputation_window"} & set(data):
        return "forecast"
    return "model"


def validate_config(path: str | Path, stationarity: bool = True) -> ValidationReport:
    """
    Проверяет инварианты, достижимые из конфигурации, ничего не запуская

    :param path: путь к JSON
    :param stationarity: проверять ли ||rho^j|| < 1
    """
    data = read_config(str(path))
    kind = _config_kind(data)
    report = ValidationReport(str(path), kind)
    if kind == "model":
        report.add("model", lambda: model_spec_from_dict(data))
        if stationarity and report.passed:
            report.add("stationarity", lambda: _check_stationary(model_spec_from_dict(data)))
        return report
    if kind == "experiment":
        holder = {}
        report.add("experiment", lambda: holder.setdefault("config", ExperimentConfig.from_dict(data)))
        config = holder.get("config")
        if config is not None:
            report.add("basis", lambda: check_basis_params(config.order, config.grid_levels,
                                                           config.primary_level, config.last_level))
            for family in config.gamma_families:
                report.add(f"model[{family}]", lambda family=family: config.model(family, 2 ** config.grid_levels))
                if stationarity and report.checks[-1][1]:
                    report.add(f"stationarity[{family}]", lambda family=family: _check_stationary(
                        config.model(family, 2 ** config.grid_levels)))
        return report
    holder = {}
    report.add("forecast", lambda: holder.setdefault("config", ForecastConfig.from_dict(data)))
    config = holder.get("config")
    if config is not None:
        report.add("basis", lambda: check_basis_params(config.order, config.grid_levels,
                                                       config.primary_level, config.last_level))
    return report


def _check_stationary(spec) -> None:
    report = spectral_radius_check(spec)
    if report.j0 is None:
        raise ModelError(f"||rho^j|| >= 1 for j = 1..{len(report.norms)}")


def cmd_validate(args) -> int:
    if args.config is None:
        raise ConfigurationError("validate needs --config")
    report = validate_config(args.config)
    print(f"{report.path} ({report.kind})")
    for line in report.lines():
        print(f"  {line}")
    if not report.passed:
        failed = next(message for _, ok, message in report.checks if not ok)
        raise ConfigurationError(failed)
    return 0


HANDLERS = {
    "simulate": cmd_simulate,
    "experiment": cmd_experiment,
    "sweep": cmd_sweep,
    "diagnostics": cmd_diagnostics,
    "forecast": cmd_forecast,
    "validate": cmd_validate,
    "surrogate": cmd_surrogate,
}


def run(argv=None) -> int:
    """0 - успех, 1 - ошибка выполнения (error: <категория>: <сообщение>), 2 - ошибка флагов"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as ex:
        return ex.code if isinstance(ex.code, int) else 2
    setup_logging()
    try:
        return HANDLERS[args.command](args)
    except ArbxError as ex:
        print(f"error: {ex.category}: {ex}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(run())
