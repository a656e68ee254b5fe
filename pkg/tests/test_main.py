import io
import json
import tempfile
import unittest
from contextlib import redirect_stderr, redirect_stdout
from pathlib import Path

import pandas as pd

from main import run, validate_config

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

SMALL_MODEL = {"b": 1, "beta": 0.6, "gamma_family": "gamma1", "W": 0.4, "M": 5, "grid_size": 16, "burn_in": 5}


def _run(argv) -> tuple[int, str, str]:
    """Запускает CLI и возвращает код выхода, stdout и stderr"""
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = run(argv)
    return code, out.getvalue(), err.getvalue()


# Командная строка
class TestCli(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def _config(self, name: str, data: dict) -> str:
        path = self.dir / name
        path.write_text(json.dumps(data), encoding="utf-8")
        return str(path)

    def test_validate_shipped_configs(self):
        for name in ("model_default.json", "table1_desk.json", "table2_desk.json", "forecast_default.json"):
            code, out, err = _run(["validate", "--config", str(CONFIGS / name)])
            self.assertEqual(code, 0, err)
            self.assertIn("PASS", out)

    def test_validate_small_beta(self):
        code, _, err = _run(["validate", "--config", self._config("bad.json", {**SMALL_MODEL, "beta": 0.4})])
        self.assertEqual(code, 1)
        self.assertIn("error: configuration:", err)
        self.assertIn("beta must exceed 1/2", err)

    def test_validate_basis_levels(self):
        data = {"replicates": 5, "order": 10, "grid_levels": 13, "primary_level": 2, "last_level": 7}
        code, out, err = _run(["validate", "--config", self._config("levels.json", data)])
        self.assertEqual(code, 1)
        self.assertIn("FAIL basis", out)
        self.assertIn("K < L/2", err)

    def test_report_kind(self):
        report = validate_config(self._config("model.json", SMALL_MODEL))
        self.assertEqual(report.kind, "model")
        self.assertTrue(report.passed)

    def test_bad_flags(self):
        self.assertEqual(_run(["forecast"])[0], 2)
        self.assertEqual(_run(["nonsense"])[0], 2)
        self.assertEqual(_run(["simulate", "--n", "many"])[0], 2)

    def test_version(self):
        code, out, _ = _run(["--version"])
        self.assertEqual(code, 0)
        self.assertIn("0.3.0", out)

    def test_simulate_and_replay(self):
        config = self._config("model.json", SMALL_MODEL)
        out = self.dir / "traj.csv"
        code, _, err = _run(["simulate", "--config", config, "--n", "10", "--seed", "7", "--out", str(out)])
        self.assertEqual(code, 0, err)
        frame = pd.read_csv(out)
        self.assertEqual(list(frame.columns), ["state", "component", "point", "x", "value"])
        self.assertEqual(len(frame), 10 * 2 * 16)

        meta = json.loads(Path(f"{out}.meta.json").read_text(encoding="utf-8"))
        self.assertEqual(meta["seed"], 7)
        self.assertEqual(meta["version"], "0.3.0")
        replay = self.dir / "replay.csv"
        code, _, err = _run(["simulate", "--config", f"{out}.meta.json", "--n", "10", "--seed", "7",
                             "--out", str(replay)])
        self.assertEqual(code, 0, err)
        self.assertEqual(replay.read_bytes(), out.read_bytes())

    def test_experiment(self):
        data = {"sample_sizes": [30], "replicates": 2, "b": 1, "M": 8, "burn_in": 20, "order": 4,
                "grid_levels": 8, "primary_level": 2, "last_level": 3, "threads": 2,
                "output_path": str(self.dir / "table.csv")}
        code, _, err = _run(["experiment", "--config", self._config("experiment.json", data), "--seed", "3"])
        self.assertEqual(code, 0, err)
        lines = (self.dir / "table.csv").read_text(encoding="utf-8").splitlines()
        self.assertEqual(lines[0], "n,delta_h,gamma_family,exceed,total,pct")
        self.assertEqual(len(lines), 2)
        meta = json.loads((self.dir / "table.csv.meta.json").read_text(encoding="utf-8"))
        self.assertEqual(meta["seed"], 3)
        self.assertEqual(len(meta["cells"]), 1)

    def test_surrogate_and_forecast(self):
        station = self.dir / "S4.csv"
        code, _, err = _run(["surrogate", "--seed", "4", "--out", str(station)])
        self.assertEqual(code, 0, err)
        out = self.dir / "pred.csv"
        code, printed, err = _run(["forecast", "--station", str(station), "--rule", "log2_sqrt",
                                   "--out", str(out), "--threads", "2"])
        self.assertEqual(code, 0, err)
        self.assertIn("S4 log2_sqrt k_n=2", printed)
        self.assertEqual(list(pd.read_csv(out).columns), ["date", "predicted", "observed"])
        errors = pd.read_csv(self.dir / "pred_errors.csv")
        self.assertEqual(list(errors.columns), ["station", "truncation_rule", "E"])
        self.assertEqual(errors["station"][0], "S4")

    def test_missing_station(self):
        code, _, err = _run(["forecast", "--station", str(self.dir / "none.csv"), "--out",
                             str(self.dir / "pred.csv")])
        self.assertEqual(code, 1)
        self.assertIn("error: ingestion:", err)


if __name__ == "__main__":
    unittest.main()
