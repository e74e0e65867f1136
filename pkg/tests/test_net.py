"""
Drift networks: tangency, jvp/vjp, loss gradients, Adam, checkpoint files.
Run from repo root: python -m pytest tests/test_net.py -v
"""
import struct
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

_REPO_ROOT = Path(__file__).resolve().parent.parent
if str(_REPO_ROOT) not in sys.path:
    sys.path.insert(0, str(_REPO_ROOT))

from src.errors import CorruptFile, FormatMismatch, NonFiniteGradient, StaleTape
from src.loss import LossBatch, implicit_drift_loss
from src.manifold import exp_map, project_to_tangent, sample_uniform, tangent_basis
from src.net import (
    DriftModel,
    OptimizerState,
    ZeroDrift,
    layer_dims,
    load,
    optimizer_step,
    param_count,
    save,
)
from src.sde import NoiseSchedule


def random_model(seed: int, width: int = 16, k: int = 2, scale: float = 0.3, activation: str = "silu") -> DriftModel:
    rng = np.random.default_rng(seed)
    model = DriftModel(width=width, time_features_k=k, activation=activation)
    model.set_params(scale * rng.standard_normal(model.param_count))
    return model


class TestArchitecture(unittest.TestCase):
    def test_param_count_formula(self) -> None:
        for width, k in ((16, 2), (128, 8), (1, 0)):
            d_in = 3 + 2 * k
            expected = d_in * width + width + 3 * (width * width + width) + 3 * width + 3
            self.assertEqual(param_count(width, k), expected)
            self.assertEqual(len(layer_dims(width, k)), 5)

    def test_zero_params_give_zero_output(self) -> None:
        model = DriftModel(width=16, time_features_k=2)
        x = sample_uniform(np.random.default_rng(0), 10)
        assert_array_equal(model(0.3, x), np.zeros((10, 3)))

    def test_fresh_init_is_zero_drift(self) -> None:
        model = DriftModel.initialize(np.random.default_rng(0), width=32, time_features_k=4)
        x = sample_uniform(np.random.default_rng(1), 10)
        assert_array_equal(model(0.7, x), np.zeros((10, 3)))
        self.assertTrue(np.any(model.weights[0] != 0.0))

    def test_outputs_tangent(self) -> None:
        model = random_model(1, scale=1.0)
        rng = np.random.default_rng(2)
        x = sample_uniform(rng, 1000)
        t = rng.uniform(0.0, 1.0, 1000)
        out = model(t, x)
        assert_allclose(np.sum(out * x, axis=-1), 0.0, atol=1e-8)

    def test_single_point(self) -> None:
        model = random_model(3)
        x = np.array([0.0, 0.6, 0.8])
        self.assertEqual(model(0.5, x).shape, (3,))
        assert_allclose(model(0.5, x), model(0.5, x[None, :])[0])


class TestJvp(unittest.TestCase):
    def test_zero_direction(self) -> None:
        model = random_model(4)
        x = sample_uniform(np.random.default_rng(0), 5)
        _, d = model.forward_jvp(0.2, x, np.zeros((5, 3)))
        assert_array_equal(d, np.zeros((5, 3)))

    def test_matches_geodesic_finite_differences(self) -> None:
        model = random_model(5)
        rng = np.random.default_rng(1)
        x = sample_uniform(rng, 50)
        d = tangent_basis(x).e1
        h = 1e-4
        _, jvp = model.forward_jvp(0.4, x, d)
        # derivative of the tangent output along the geodesic, in ambient coordinates
        fd = (model(0.4, exp_map(x, h * d)) - model(0.4, exp_map(x, -h * d))) / (2 * h)
        assert_allclose(jvp, fd, atol=1e-4)

    def test_linear_model_closed_form(self) -> None:
        model = random_model(6, width=4, k=1, scale=0.5, activation="identity")
        m = model.weights[0]
        c = model.biases[0]
        for w, b in zip(model.weights[1:], model.biases[1:]):
            c = w @ c + b
            m = w @ m
        rng = np.random.default_rng(2)
        x = sample_uniform(rng, 20)
        d = project_to_tangent(x, rng.standard_normal((20, 3)))
        out, jvp = model.forward_jvp(0.3, x, d)
        y = model._inputs(0.3, x) @ m.T + c
        a_d = d @ m[:, :3].T
        expected = (a_d - (np.sum(a_d * x, -1) + np.sum(y * d, -1))[:, None] * x
                    - np.sum(y * x, -1)[:, None] * d)
        assert_allclose(jvp, expected, atol=1e-12)
        assert_allclose(out, y - np.sum(y * x, -1)[:, None] * x, atol=1e-12)

    def test_jvp_vjp_consistency(self) -> None:
        model = random_model(7)
        rng = np.random.default_rng(3)
        x = sample_uniform(rng, 30)
        d = rng.standard_normal((30, 3))
        a = rng.standard_normal((30, 3))
        _, jvp = model.forward_jvp(0.6, x, d)
        tape = model.trace(0.6, x)
        x_bar = model.backward(tape, a)
        model.zero_grad()
        assert_allclose(np.sum(jvp * a, -1), np.sum(d * x_bar, -1), atol=1e-8)


class TestBackward(unittest.TestCase):
    def test_zero_adjoint(self) -> None:
        model = random_model(8)
        x = sample_uniform(np.random.default_rng(0), 4)
        basis = tangent_basis(x)
        tape = model.trace(0.5, x, [basis.e1, basis.e2])
        model.backward(tape, np.zeros((4, 3)), [np.zeros((4, 3)), np.zeros((4, 3))])
        assert_array_equal(model.grad, np.zeros(model.param_count))

    def test_stale_tape(self) -> None:
        model = random_model(9)
        x = sample_uniform(np.random.default_rng(0), 4)
        tape = model.trace(0.5, x)
        model.set_params(model.params * 0.5)
        with self.assertRaises(StaleTape):
            model.backward(tape, np.ones((4, 3)))
        other = random_model(9)
        with self.assertRaises(StaleTape):
            other.backward(model.trace(0.5, x), np.ones((4, 3)))

    def test_full_loss_gradient_matches_finite_differences(self) -> None:
        """Quadratic + exact divergence term, 20 random parameters, width 16."""
        trainee = random_model(10)
        frozen = random_model(11)
        schedule = NoiseSchedule(g2_peak=0.5, g2_floor=0.1)
        rng = np.random.default_rng(4)
        batch = LossBatch(times=rng.uniform(0.05, 0.95, 8), points=sample_uniform(rng, 8), direction="forward")

        trainee.zero_grad()
        implicit_drift_loss(trainee, frozen, batch, schedule, "exact", compute_grad=True)
        analytic = trainee.grad.copy()
        trainee.zero_grad()
        self.assertTrue(np.all(frozen.grad == 0.0))

        idx = rng.choice(trainee.param_count, size=20, replace=False)
        eps = 1e-5
        numeric = []
        for i in idx:
            orig = trainee.params[i]
            trainee.params[i] = orig + eps
            up = implicit_drift_loss(trainee, frozen, batch, schedule, "exact", compute_grad=False).loss
            trainee.params[i] = orig - eps
            down = implicit_drift_loss(trainee, frozen, batch, schedule, "exact", compute_grad=False).loss
            trainee.params[i] = orig
            numeric.append((up - down) / (2 * eps))
        assert_allclose(analytic[idx], numeric, rtol=1e-3, atol=1e-7)

    def test_quadratic_term_on_toy_net(self) -> None:
        """Only the output bias matters for a zero-weight net: d/db 1/2|a + P b|^2 = P(a + P b)."""
        model = DriftModel(width=1, time_features_k=0)
        model.biases[-1][:] = [0.2, -0.1, 0.4]
        x = np.array([[0.0, 0.0, 1.0]])
        a = np.array([[0.5, 0.25, 0.0]])
        tape = model.trace(0.0, x)
        model.backward(tape, a + tape.out)
        r = project_to_tangent(x, model.biases[-1][None, :])
        assert_allclose(model.grad[-3:], project_to_tangent(x, a + r)[0], atol=1e-15)


class TestOptimizer(unittest.TestCase):
    def test_zero_gradient(self) -> None:
        model = random_model(12)
        before = model.params.copy()
        opt = OptimizerState.for_model(model)
        optimizer_step(model, opt)
        assert_array_equal(model.params, before)
        self.assertEqual(opt.step, 1)

    def test_first_step(self) -> None:
        model = random_model(13)
        before = model.params.copy()
        g = np.random.default_rng(0).standard_normal(model.param_count) * 0.01
        model.grad[:] = g
        opt = OptimizerState.for_model(model, lr=1e-3)
        norm = optimizer_step(model, opt)
        self.assertAlmostEqual(norm, float(np.linalg.norm(g)))
        assert_allclose(model.params - before, -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-9, atol=1e-15)
        assert_array_equal(model.grad, np.zeros(model.param_count))

    def test_clipping(self) -> None:
        model = random_model(14)
        g = np.zeros(model.param_count)
        g[0] = 100.0
        model.grad[:] = g
        opt = OptimizerState.for_model(model, clip=10.0)
        self.assertEqual(optimizer_step(model, opt), 100.0)
        self.assertAlmostEqual(float(opt.m[0]), 0.1 * 10.0)

    def test_non_finite_gradient(self) -> None:
        model = random_model(15)
        before = model.params.copy()
        model.grad[3] = np.nan
        opt = OptimizerState.for_model(model)
        with self.assertRaises(NonFiniteGradient) as ctx:
            optimizer_step(model, opt)
        self.assertEqual(ctx.exception.details["first_bad_index"], 3)
        assert_array_equal(model.params, before)
        self.assertEqual(opt.step, 0)

    def test_quadratic_objective_converges(self) -> None:
        model = DriftModel(width=1, time_features_k=0)
        target = np.linspace(-1.0, 1.0, model.param_count)
        opt = OptimizerState.for_model(model, lr=1e-2, clip=None)
        for _ in range(2000):
            model.grad[:] = model.params - target
            optimizer_step(model, opt)
        self.assertLess(float(np.max(np.abs(model.params - target))), 1e-4)


class TestCheckpoints(unittest.TestCase):
    def setUp(self) -> None:
        self._tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self._tmp.name)

    def tearDown(self) -> None:
        self._tmp.cleanup()

    def test_round_trip_bitwise(self) -> None:
        model = random_model(16)
        path = save(model, self.dir / "m.ckpt")
        loaded = load(path, width=16, time_features_k=2, T=1.0)
        assert_array_equal(loaded.params, model.params)
        x = sample_uniform(np.random.default_rng(0), 10)
        assert_array_equal(loaded(0.3, x), model(0.3, x))
        self.assertFalse((self.dir / "m.ckpt.tmp").exists())

    def test_wrong_width(self) -> None:
        path = save(random_model(17), self.dir / "m.ckpt")
        with self.assertRaises(FormatMismatch):
            load(path, width=32)

    def test_activation_is_stored(self) -> None:
        model = random_model(20, activation="identity")
        path = save(model, self.dir / "id.ckpt")
        loaded = load(path)
        self.assertEqual(loaded.activation, "identity")
        x = sample_uniform(np.random.default_rng(1), 6)
        assert_array_equal(loaded(0.7, x), model(0.7, x))
        with self.assertRaises(FormatMismatch):
            load(path, activation="silu")

    def test_unknown_activation_in_header(self) -> None:
        path = save(random_model(21), self.dir / "m.ckpt")
        raw = bytearray(path.read_bytes())
        struct.pack_into("<8s", raw, 32, b"relu")
        path.write_bytes(bytes(raw))
        with self.assertRaises(CorruptFile):
            load(path)

    def test_wrong_version(self) -> None:
        path = save(random_model(18), self.dir / "m.ckpt")
        raw = bytearray(path.read_bytes())
        struct.pack_into("<I", raw, 4, 99)
        path.write_bytes(bytes(raw))
        with self.assertRaises(FormatMismatch):
            load(path)

    def test_bad_magic_and_truncation(self) -> None:
        path = save(random_model(19), self.dir / "m.ckpt")
        raw = path.read_bytes()
        (self.dir / "bad.ckpt").write_bytes(b"XXXX" + raw[4:])
        with self.assertRaises(CorruptFile):
            load(self.dir / "bad.ckpt")
        (self.dir / "short.ckpt").write_bytes(raw[:-8])
        with self.assertRaises(CorruptFile):
            load(self.dir / "short.ckpt")
        (self.dir / "tiny.ckpt").write_bytes(raw[:10])
        with self.assertRaises(CorruptFile):
            load(self.dir / "tiny.ckpt")


class TestZeroDrift(unittest.TestCase):
    def test_zero(self) -> None:
        x = sample_uniform(np.random.default_rng(0), 3)
        z = ZeroDrift()
        assert_array_equal(z(0.5, x), np.zeros((3, 3)))
        _, d = z.forward_jvp(0.5, x, x)
        assert_array_equal(d, np.zeros((3, 3)))


if __name__ == "__main__":
    unittest.main()
