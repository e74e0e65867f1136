"""
End-to-end CLI: train a tiny synthetic run, then sample, likelihood, eval, simulate, interpolate.
Run from repo root: python -m pytest tests/test_cli.py -v
"""
import contextlib
import io
import json
import sys
import tempfile
import unittest
from pathlib import Path

_REPO_ROOT = Path(__file__).resolve().parent.parent
if str(_REPO_ROOT) not in sys.path:
    sys.path.insert(0, str(_REPO_ROOT))

from src import audit
from src.run import main

TINY = [
    "--ipf.L", "0", "--ipf.inner_steps", "2", "--ipf.batch", "8", "--grid.N", "4",
    "--net.width", "8", "--net.time_features", "2", "--ipf.diag_samples", "20",
]


def run_cli(argv):
    """(exit code, parsed stdout JSON or None, stderr text)."""
    out, err = io.StringIO(), io.StringIO()
    code = 0
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        try:
            main(argv)
        except SystemExit as exc:
            code = int(exc.code or 0)
    text = out.getvalue().strip()
    return code, (json.loads(text) if text else None), err.getvalue()


class TestCli(unittest.TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        cls._tmp = tempfile.TemporaryDirectory()
        cls.tmp = Path(cls._tmp.name)
        audit.set_event_log(cls.tmp / "events.jsonl")
        cls.run_dir = cls.tmp / "run"
        code, cls.train, err = run_cli(["train", "--synthetic", "vmf:60,10,20,1", *TINY,
                                        "--seed", "3", "--output-dir", str(cls.run_dir)])
        assert code == 0, err

    @classmethod
    def tearDownClass(cls) -> None:
        audit.set_event_log(None)
        cls._tmp.cleanup()

    def test_train_outputs(self) -> None:
        self.assertEqual(self.train["checkpoints"], ["ipf_0_b.ckpt", "ipf_0_f.ckpt", "ipf_1_f.ckpt"])
        self.assertEqual(self.train["final_pair"], {"f": 1, "b": 0})
        self.assertEqual(self.train["prior"], "uniform")
        for name in ("config.txt", "manifest.json", "metrics.csv", "diagnostics.csv", "events.jsonl"):
            self.assertTrue((self.run_dir / name).exists(), name)
        manifest = json.loads((self.run_dir / "manifest.json").read_text(encoding="utf-8"))
        self.assertEqual(manifest["seed"], 3)

    def test_retrain_resumes(self) -> None:
        before = (self.run_dir / "ipf_1_f.ckpt").read_bytes()
        code, payload, err = run_cli(["train", "--synthetic", "vmf:60,10,20,1", *TINY,
                                      "--seed", "3", "--output-dir", str(self.run_dir)])
        self.assertEqual(code, 0, err)
        self.assertEqual((self.run_dir / "ipf_1_f.ckpt").read_bytes(), before)

    def test_sample(self) -> None:
        out = self.tmp / "samples.csv"
        code, payload, err = run_cli(["sample", str(self.run_dir), "--count", "0", "--out", str(out)])
        self.assertEqual(code, 0, err)
        self.assertEqual(payload["count"], 0)
        self.assertEqual(out.read_text(encoding="utf-8").strip(), "lat_deg,lon_deg")

        out = self.tmp / "ode.geojson"
        code, payload, err = run_cli(["sample", str(self.run_dir), "--count", "5", "--mode", "ode", "--steps", "4",
                                      "--format", "geojson", "--out", str(out)])
        self.assertEqual(code, 0, err)
        self.assertEqual(len(json.loads(out.read_text(encoding="utf-8"))["features"]), 5)

    def test_likelihood(self) -> None:
        out = self.tmp / "ll.csv"
        code, payload, err = run_cli(["likelihood", str(self.run_dir), "--synthetic", "uniform", "--count", "3",
                                      "--steps", "4", "--out", str(out)])
        self.assertEqual(code, 0, err)
        self.assertEqual(payload["rows"], 3)
        self.assertIn("mmd_forward_terminal_to_prior", payload)
        lines = out.read_text(encoding="utf-8").strip().splitlines()
        self.assertEqual(lines[0], "lat,lon,loglik_surface,loglik_uniform_base")
        self.assertEqual(len(lines), 4)

    def test_eval(self) -> None:
        code, payload, err = run_cli(["eval", str(self.run_dir), "--count", "30"])
        self.assertEqual(code, 0, err)
        self.assertGreaterEqual(payload["mmd_data"], 0.0)
        self.assertIn("mmd_prior", payload)
        self.assertTrue((self.run_dir / "eval_report.json").exists())

    def test_simulate(self) -> None:
        dump = self.tmp / "walk.csv"
        code, payload, err = run_cli(["simulate", "--synthetic", "uniform", "--count", "4", "--grid.N", "3",
                                      "--constant-g2", "1.0", "--dump-trajectories", str(dump)])
        self.assertEqual(code, 0, err)
        self.assertEqual((payload["count"], payload["steps"]), (4, 3))
        self.assertEqual(len(dump.read_text(encoding="utf-8").strip().splitlines()), 1 + 4 * 4)

    def test_interpolate_frames(self) -> None:
        run_dir = self.tmp / "bridge"
        code, payload, err = run_cli(["interpolate", "--synthetic", "vmf:60,10,20,1", "--synthetic-b", "vmf:-60,10,20,1",
                                      *TINY, "--count", "6", "--output-dir", str(run_dir)])
        self.assertEqual(code, 0, err)
        self.assertEqual(payload["prior"], "empirical")
        self.assertEqual([f["t"] for f in payload["frames"]], [0.0, 0.25, 0.5, 0.75, 1.0])
        for frame in payload["frames"]:
            lines = Path(frame["file"]).read_text(encoding="utf-8").strip().splitlines()
            self.assertEqual(len(lines), 1 + 6)
        manifest = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
        self.assertEqual(manifest["command"], "interpolate")

    def test_simulate_with_run_dir_uses_run_config(self) -> None:
        # the trained run has L=0 and width 8; the simulate defaults (L=4, width 128) must not leak in
        for direction in ("forward", "backward"):
            code, payload, err = run_cli(["simulate", "--run-dir", str(self.run_dir), "--count", "5",
                                          "--direction", direction])
            self.assertEqual(code, 0, err)
            self.assertEqual((payload["count"], payload["steps"]), (5, 4))

    def test_simulate_with_run_dir_keeps_flag_overrides(self) -> None:
        code, payload, err = run_cli(["simulate", "--run-dir", str(self.run_dir), "--count", "3", "--grid.N", "6"])
        self.assertEqual(code, 0, err)
        self.assertEqual(payload["steps"], 6)
        code, _, err = run_cli(["simulate", "--run-dir", str(self.run_dir), "--net.width", "16"])
        self.assertEqual(code, 1)
        self.assertTrue(err.startswith("error=format_mismatch "))

    def test_interpolate_custom_times(self) -> None:
        run_dir = self.tmp / "bridge_times"
        code, payload, err = run_cli(["interpolate", "--synthetic", "vmf:60,10,20,1", "--synthetic-b", "vmf:-60,10,20,1",
                                      *TINY, "--count", "4", "--times", "0.1,0.6,1.0", "--output-dir", str(run_dir)])
        self.assertEqual(code, 0, err)
        self.assertEqual([f["t"] for f in payload["frames"]], [0.1, 0.6, 1.0])

    def test_interpolate_rejects_bad_times(self) -> None:
        for times in ("0.5,1.5", "half"):
            code, _, err = run_cli(["interpolate", "--synthetic", "vmf:60,10,20,1", "--synthetic-b", "uniform", *TINY,
                                    "--times", times, "--output-dir", str(self.tmp / "bad_times")])
            self.assertEqual(code, 2, times)
            self.assertIn("--times", err)
        self.assertFalse((self.tmp / "bad_times").exists())

    def test_sample_error_estimate(self) -> None:
        code, payload, err = run_cli(["sample", str(self.run_dir), "--count", "4", "--mode", "ode", "--steps", "4",
                                      "--error-estimate", "--out", str(self.tmp / "ode_err.csv")])
        self.assertEqual(code, 0, err)
        self.assertEqual(payload["error_estimate"]["steps"], 4)
        self.assertGreaterEqual(payload["error_estimate"]["endpoint_rad"], 0.0)
        code, _, err = run_cli(["sample", str(self.run_dir), "--count", "4", "--error-estimate"])
        self.assertEqual(code, 2)
        self.assertIn("--error-estimate", err)

    def test_likelihood_error_estimate(self) -> None:
        code, payload, err = run_cli(["likelihood", str(self.run_dir), "--synthetic", "uniform", "--count", "3",
                                      "--steps", "4", "--error-estimate", "--out", str(self.tmp / "ll_err.csv")])
        self.assertEqual(code, 0, err)
        estimate = payload["error_estimate"]
        self.assertEqual(set(estimate), {"endpoint_rad", "loglik_nats", "steps"})
        self.assertGreaterEqual(estimate["loglik_nats"], 0.0)
        self.assertNotIn("error_estimate", run_cli(["likelihood", str(self.run_dir), "--synthetic", "uniform",
                                                    "--count", "2", "--steps", "4",
                                                    "--out", str(self.tmp / "ll_plain.csv")])[1])

    def test_eval_compare_modes(self) -> None:
        code, payload, err = run_cli(["eval", str(self.run_dir), "--count", "30", "--steps", "4", "--compare-modes",
                                      "--out", str(self.tmp / "eval_cmp.json")])
        self.assertEqual(code, 0, err)
        self.assertGreaterEqual(payload["tv_sde_ode"], 0.0)
        self.assertLessEqual(payload["tv_sde_ode"], 1.0)

    def test_eval_rejects_empty_count(self) -> None:
        for count in ("0", "-3"):
            code, payload, err = run_cli(["eval", str(self.run_dir), "--count", count])
            self.assertEqual(code, 2)
            self.assertIsNone(payload)
            self.assertIn("--count", err)

    def test_malformed_synthetic_spec(self) -> None:
        code, _, err = run_cli(["simulate", "--synthetic", "harmonic:4", "--count", "2"])
        self.assertEqual(code, 2)
        self.assertTrue(err.startswith("error=config_error "))
        self.assertIn("data.synthetic", err)
        code, _, err = run_cli(["likelihood", str(self.run_dir), "--synthetic", "harmonic:4", "--count", "2"])
        self.assertEqual(code, 1)
        self.assertTrue(err.startswith("error=invalid_synthetic_spec "))
        self.assertNotIn("Traceback", err)

    def test_interpolate_needs_dataset_b(self) -> None:
        code, _, err = run_cli(["interpolate", "--synthetic", "uniform", *TINY, "--output-dir", str(self.tmp / "nob")])
        self.assertEqual(code, 2)
        self.assertIn("data.dataset_b", err)

    def test_config_error_exit_code(self) -> None:
        code, payload, err = run_cli(["train", "--synthetic", "uniform", "--ipf.L", "-1",
                                      "--output-dir", str(self.tmp / "bad")])
        self.assertEqual(code, 2)
        self.assertIsNone(payload)
        self.assertTrue(err.startswith("error=config_error "))

    def test_missing_run_dir(self) -> None:
        code, _, err = run_cli(["sample", str(self.tmp / "nowhere")])
        self.assertEqual(code, 1)
        self.assertTrue(err.startswith("error=missing_checkpoint "))

    def test_missing_data(self) -> None:
        code, _, err = run_cli(["train", *TINY, "--output-dir", str(self.tmp / "nodata")])
        self.assertEqual(code, 2)
        self.assertIn("data.dataset", err)


if __name__ == "__main__":
    unittest.main()
