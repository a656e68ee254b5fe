import json
import math
import os
import tempfile
import unittest
from dataclasses import replace
from pathlib import Path
from unittest import mock

import numpy as np
import pandas as pd

from errors import ConfigurationError, ExperimentError
from experiments import (ExceedanceRow, ExceedanceTable, ExperimentConfig, ReplicateOutcome, discretization_steps,
                         emit_diagnostics, replicate_seed, run_consistency_experiment, run_discretization_sweep)

# Маленькая конфигурация: db4 на 2^8 точках, b = 1, M = 8
SMALL = dict(sample_sizes=(30,), replicates=3, b=1, M=8, burn_in=20, order=4, grid_levels=8,
             primary_level=2, last_level=3, trials=20, threads=2, rng_seed=123)


# Конфигурация экспериментов
class TestExperimentConfig(unittest.TestCase):

    def test_discretization_steps(self):
        np.testing.assert_allclose(discretization_steps(3), (1 / 27, 1 / 81, 1 / 243))

    def test_defaults(self):
        config = ExperimentConfig()
        self.assertEqual(config.sample_sizes, (1500, 2500, 5000))
        self.assertEqual(config.replicates, 50)
        self.assertEqual(config.truncation_rule, "log_n")

    def test_invalid(self):
        with self.assertRaises(ConfigurationError):
            ExperimentConfig(replicates=0)
        with self.assertRaises(ConfigurationError):
            ExperimentConfig(sample_sizes=(5,))
        with self.assertRaises(ConfigurationError):
            ExperimentConfig(discretization_steps=(0.6,))
        with self.assertRaises(ConfigurationError):
            ExperimentConfig(truncation_rule="sqrt")
        with self.assertRaises(ConfigurationError):
            ExperimentConfig(gamma_families=("gamma9",))

    def test_from_dict(self):
        config = ExperimentConfig.from_dict({"gamma_family": "gamma2", "sample_sizes": [100]})
        self.assertEqual(config.gamma_families, ("gamma2",))
        self.assertEqual(config.sample_sizes, (100,))
        self.assertEqual(ExperimentConfig.from_dict(config.to_dict()), config)
        with self.assertRaises(ConfigurationError):
            ExperimentConfig.from_dict({"samples": [100]})

    def test_seeds_differ_by_cell(self):
        first = replicate_seed(1, 0, 30, 0, 0).generate_state(2)
        second = replicate_seed(1, 0, 40, 0, 0).generate_state(2)
        self.assertFalse(np.array_equal(first, second))


# Таблица превышений
class TestExceedanceTable(unittest.TestCase):

    def test_pct(self):
        self.assertEqual(ExceedanceRow(1500, 1 / 8191, "gamma1", 3, 50).pct, 6.0)

    def test_outcome(self):
        self.assertTrue(ReplicateOutcome(2.0, 1.0).exceeded)
        self.assertFalse(ReplicateOutcome(None, None, "truncation").exceeded)

    def test_write(self):
        table = ExceedanceTable([ExceedanceRow(30, 0.1, "gamma1", 1, 4)], {"seed": 1})
        with tempfile.TemporaryDirectory() as tmp:
            path = table.write(Path(tmp) / "out" / "table.csv")
            lines = path.read_text(encoding="utf-8").splitlines()
            self.assertEqual(lines[0], "n,delta_h,gamma_family,exceed,total,pct")
            self.assertEqual(lines[1], "30,0.1,gamma1,1,4,25.0")
            meta = json.loads(Path(f"{path}.meta.json").read_text(encoding="utf-8"))
            self.assertEqual(meta, {"seed": 1})


# Эксперименты на малой конфигурации
class TestExperiments(unittest.TestCase):

    def setUp(self):
        self.config = ExperimentConfig(**SMALL)

    def test_consistency_experiment(self):
        with self.assertLogs("experiments", level="INFO") as logs:
            table = run_consistency_experiment(self.config)
        self.assertTrue(any("run_consistency_experiment took" in line for line in logs.output))
        frame = table.to_frame()
        self.assertEqual(list(frame.columns), ["n", "delta_h", "gamma_family", "exceed", "total", "pct"])
        self.assertEqual(len(frame), 1)
        row = table.rows[0]
        self.assertEqual(row.total + row.skipped, 3)
        self.assertTrue(0 <= row.pct <= 100)
        self.assertAlmostEqual(row.delta_h, 1 / 255)
        self.assertEqual(table.metadata["cells"][0]["seed_key"], [123, 0, 30, 0])

    def test_deterministic(self):
        first = run_consistency_experiment(self.config).to_frame()
        second = run_consistency_experiment(replace(self.config, threads=1)).to_frame()
        pd.testing.assert_frame_equal(first, second)

    def test_single_replicate(self):
        row = run_consistency_experiment(replace(self.config, replicates=1)).rows[0]
        self.assertIn(row.pct, (0.0, 100.0))

    def test_cells_are_independent(self):
        both = run_consistency_experiment(replace(self.config, sample_sizes=(30, 40))).rows
        alone = run_consistency_experiment(replace(self.config, sample_sizes=(40,))).rows
        self.assertEqual(both[1], alone[0])

    def test_discretization_sweep(self):
        config = replace(self.config, discretization_steps=(1 / 27,))
        table = run_discretization_sweep(config)
        self.assertEqual(len(table.rows), 1)
        self.assertAlmostEqual(table.rows[0].delta_h, 1 / 27)
        self.assertEqual(table.metadata["cells"][0]["seed_key"], [123, 0, 30, 1])
        with self.assertRaises(ConfigurationError):
            run_discretization_sweep(self.config)

    def test_too_many_skips(self):
        skipped = ReplicateOutcome(None, None, "degenerate_gap")
        with mock.patch("experiments.run_replicate", return_value=skipped):
            with self.assertRaises(ExperimentError):
                run_consistency_experiment(self.config)

    def test_diagnostics(self):
        config = replace(self.config, ks=(0, 1, 2))
        with tempfile.TemporaryDirectory() as tmp:
            a3_path, ratio_path = emit_diagnostics(config, tmp)
            a3 = pd.read_csv(a3_path)
            ratios = pd.read_csv(ratio_path)
        self.assertEqual(list(a3.columns), ["k", "l_k", "l_k_htilde"])
        self.assertEqual(list(a3["k"]), [0, 1, 2])
        values = list(a3["l_k_htilde"])
        self.assertTrue(all(a + 1e-12 >= b for a, b in zip(values, values[1:])))
        self.assertEqual(list(ratios.columns), ["n", "k_n", "ratio"])
        self.assertEqual(int(ratios["k_n"][0]), 3)
        self.assertTrue(math.isfinite(float(ratios["ratio"][0])))


# Приёмочные прогоны: 50 повторов на ячейку
@unittest.skipUnless(os.environ.get("ARBX_SLOW") == "1", "долгий прогон Монте-Карло")
class TestDeskExperiment(unittest.TestCase):

    def assert_non_increasing(self, rows):
        # доли сравниваются с запасом в две объединённые стандартные ошибки и один повтор
        total = sum(row.total for row in rows)
        pooled = sum(row.exceed for row in rows) / total
        for before, after in zip(rows, rows[1:]):
            se = 100.0 * math.sqrt(pooled * (1 - pooled) * (1 / before.total + 1 / after.total))
            self.assertLessEqual(after.pct, before.pct + 2 * se + 100.0 / after.total)

    def test_exceedance_by_sample_size(self):
        config = ExperimentConfig(sample_sizes=(1500, 2500, 5000), replicates=50, rng_seed=20240601)
        rows = run_consistency_experiment(config).rows
        self.assertEqual([row.n for row in rows], [1500, 2500, 5000])
        for row in rows:
            self.assertEqual(row.total + row.skipped, 50)
            self.assertTrue(0 <= row.pct <= 100)
        self.assert_non_increasing(rows)

    def test_exceedance_by_discretization(self):
        config = ExperimentConfig(sample_sizes=(5000,), discretization_steps=discretization_steps(3),
                                  replicates=50, rng_seed=20240602)
        rows = run_discretization_sweep(config).rows
        np.testing.assert_allclose([row.delta_h for row in rows], (1 / 27, 1 / 81, 1 / 243))
        for row in rows:
            self.assertEqual(row.n, 5000)
            self.assertEqual(row.total + row.skipped, 50)
        self.assert_non_increasing(rows)


if __name__ == "__main__":
    unittest.main()
