"""
Self-check of the run-directory contracts through the real CLI (subprocesses).
Run from repo root: python scripts/self_check.py  or  python -m unittest scripts.self_check
"""
import csv
import json
import subprocess
import sys
import tempfile
import unittest
from pathlib import Path

# Ensure repo root on path when run as script
_REPO_ROOT = Path(__file__).resolve().parent.parent
if str(_REPO_ROOT) not in sys.path:
    sys.path.insert(0, str(_REPO_ROOT))

from src.ode import UNIFORM_LOG_DENSITY

TINY = ["--ipf.L", "1", "--ipf.inner_steps", "5", "--ipf.batch", "16", "--grid.N", "5",
        "--net.width", "8", "--ipf.diag_samples", "50"]


def cli(*args: str) -> subprocess.CompletedProcess:
    return subprocess.run([sys.executable, "-m", "src.run", *args], cwd=_REPO_ROOT, capture_output=True, text=True)


class TestRunDirectoryContracts(unittest.TestCase):
    def setUp(self) -> None:
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self) -> None:
        self._tmp.cleanup()

    def _train(self, name: str, *extra: str) -> Path:
        run_dir = self.tmp / name
        p = cli("train", "--dataset", "fixtures/volcanoes.csv", *TINY, "--seed", "4",
                "--output-dir", str(run_dir), *extra)
        self.assertEqual(p.returncode, 0, p.stderr)
        return run_dir

    def test_rerun_is_bitwise(self) -> None:
        a, b = self._train("a"), self._train("b")
        for name in ("metrics.csv", "diagnostics.csv", "ipf_2_f.ckpt", "ipf_1_b.ckpt"):
            self.assertEqual((a / name).read_bytes(), (b / name).read_bytes(), name)

    def test_config_file_reproduces_run(self) -> None:
        a = self._train("a")
        b = self.tmp / "from_config"
        p = cli("train", "--config", str(a / "config.txt"), "--output-dir", str(b))
        self.assertEqual(p.returncode, 0, p.stderr)
        self.assertEqual((a / "metrics.csv").read_bytes(), (b / "metrics.csv").read_bytes())

    def test_untrained_run_likelihood_is_uniform(self) -> None:
        run_dir = self._train("zero", "--ipf.inner_steps", "0")
        p = cli("likelihood", str(run_dir), "--steps", "7")
        self.assertEqual(p.returncode, 0, p.stderr)
        with open(run_dir / "likelihood.csv", newline="") as f:
            values = [float(r["loglik_surface"]) for r in csv.DictReader(f)]
        self.assertEqual(len(values), 80)
        for v in values:
            self.assertAlmostEqual(v, UNIFORM_LOG_DENSITY, places=6)

    def test_error_line(self) -> None:
        p = cli("sample", str(self.tmp / "missing"))
        self.assertEqual(p.returncode, 1)
        lines = p.stderr.strip().splitlines()
        self.assertEqual(len(lines), 1)
        code, payload = lines[0].split(" ", 1)
        self.assertEqual(code, "error=missing_checkpoint")
        self.assertEqual(json.loads(payload)["error"], "missing_checkpoint")


if __name__ == "__main__":
    unittest.main()
