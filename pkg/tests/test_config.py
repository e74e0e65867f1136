"""
Run configuration: key=value text form, overrides, validation, IPF mapping.
Run from repo root: python -m pytest tests/test_config.py -v
"""
import os
import sys
import tempfile
import unittest
from pathlib import Path
from unittest import mock

_REPO_ROOT = Path(__file__).resolve().parent.parent
if str(_REPO_ROOT) not in sys.path:
    sys.path.insert(0, str(_REPO_ROOT))

from src.config import (
    OUTPUT_ROOT_ENV,
    RunConfig,
    apply_overrides,
    default_output_root,
    load_config,
    full_scale,
    parse_text,
    to_ipf_config,
    to_text,
    validate,
    write_config,
)
from src.errors import ConfigError


class TestTextForm(unittest.TestCase):
    def test_round_trip(self) -> None:
        cfg = RunConfig()
        cfg.ipf.L = 2
        cfg.optimizer.clip = None
        cfg.data.synthetic = "vmf:30,40,20,0.5;-20,-100,20,0.5"
        cfg.schedule.g2_peak = 0.07
        back = apply_overrides(RunConfig(), parse_text(to_text(cfg)))
        self.assertEqual(back, cfg)

    def test_write_and_load(self) -> None:
        cfg = full_scale(RunConfig())
        with tempfile.TemporaryDirectory() as tmp:
            path = write_config(cfg, Path(tmp) / "run" / "config.txt")
            self.assertEqual(load_config(path), cfg)
            overridden = load_config(path, {"ipf.L": "1", "workers": "3"})
        self.assertEqual((overridden.ipf.L, overridden.workers), (1, 3))

    def test_comments_and_blank_lines(self) -> None:
        values = parse_text("# header\n\nipf.L = 3\n  # indented comment\nseed=5\n")
        self.assertEqual(values, {"ipf.L": "3", "seed": "5"})

    def test_malformed_line(self) -> None:
        with self.assertRaises(ConfigError) as ctx:
            parse_text("ipf.L=3\njust words\n")
        self.assertIn("line 2", ctx.exception.details["problems"][0])


class TestOverrides(unittest.TestCase):
    def test_types(self) -> None:
        cfg = apply_overrides(RunConfig(), {
            "ipf.warm_start": "false", "ipf.inner_steps": "10", "optimizer.lr": "1e-3",
            "optimizer.clip": "none", "data.dataset": "fixtures/quakes.csv",
        })
        self.assertIs(cfg.ipf.warm_start, False)
        self.assertEqual(cfg.ipf.inner_steps, 10)
        self.assertEqual(cfg.optimizer.lr, 1e-3)
        self.assertIsNone(cfg.optimizer.clip)
        self.assertEqual(cfg.data.dataset, "fixtures/quakes.csv")

    def test_problems_are_collected(self) -> None:
        with self.assertRaises(ConfigError) as ctx:
            apply_overrides(RunConfig(), {"ipf.L": "four", "net.depth": "3", "ipf": "x", "ipf.early_stop": "maybe"})
        problems = ctx.exception.details["problems"]
        self.assertEqual(len(problems), 4)
        self.assertTrue(any("net.depth" in p for p in problems))


class TestValidation(unittest.TestCase):
    def _problems(self, **values) -> list:
        cfg = apply_overrides(RunConfig(), {k.replace("__", "."): v for k, v in values.items()})
        with self.assertRaises(ConfigError) as ctx:
            validate(cfg)
        return ctx.exception.details["problems"]

    def test_defaults_valid(self) -> None:
        validate(RunConfig())

    def test_rejects(self) -> None:
        self.assertIn("schedule.T: must be > 0", self._problems(schedule__T="0"))
        self.assertIn("grid.N: must be >= 1", self._problems(grid__N="0"))
        self.assertTrue(self._problems(ipf__div_mode="finite_difference")[0].startswith("ipf.div_mode"))
        self.assertTrue(self._problems(ipf__div_mode="sliced")[0].startswith("ipf.div_mode"))
        self.assertTrue(self._problems(net__activation="relu")[0].startswith("net.activation"))
        self.assertTrue(self._problems(data__dataset="a.csv", data__synthetic="uniform")[0].startswith("data"))
        self.assertEqual(len(self._problems(workers="0", ipf__batch="0")), 2)

    def test_rejects_malformed_synthetic_specs(self) -> None:
        problems = self._problems(data__synthetic="harmonic:4", data__synthetic_b="vmf:0,0,5,0.5")
        self.assertEqual(len(problems), 2)
        self.assertTrue(problems[0].startswith("data.synthetic: "))
        self.assertTrue(problems[1].startswith("data.synthetic_b: "))

    def test_hutchinson_with_probes_is_valid(self) -> None:
        validate(apply_overrides(RunConfig(), {"ipf.div_mode": "hutchinson:16"}))


class TestMapping(unittest.TestCase):
    def test_to_ipf_config(self) -> None:
        cfg = full_scale(RunConfig())
        cfg.seed = 11
        ipf = to_ipf_config(cfg)
        self.assertEqual(ipf.width, 512)
        self.assertEqual(ipf.grid.N, 10)
        self.assertEqual(ipf.L, 4)
        self.assertEqual(ipf.seed, 11)
        self.assertAlmostEqual(ipf.schedule.g_squared(0.5), 0.05)

    def test_output_root_env(self) -> None:
        with mock.patch.dict(os.environ, {OUTPUT_ROOT_ENV: "/tmp/elsewhere"}):
            self.assertEqual(default_output_root(), Path("/tmp/elsewhere"))
        with mock.patch.dict(os.environ, {OUTPUT_ROOT_ENV: ""}):
            self.assertEqual(default_output_root(), Path("runs"))


if __name__ == "__main__":
    unittest.main()
