"""
Geometry primitives on S^2: projection, exp/log, distances, bases, divergence.
Run from repo root: python -m pytest tests/test_manifold.py -v  or  python -m unittest tests.test_manifold
"""
import sys
import unittest
from pathlib import Path

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

_REPO_ROOT = Path(__file__).resolve().parent.parent
if str(_REPO_ROOT) not in sys.path:
    sys.path.insert(0, str(_REPO_ROOT))

from src.errors import AntipodalPoints, DivergenceModeUnsupported
from src.loss import StaticField, divergence_estimate
from src.manifold import (
    ProjectedConstantField,
    ProjectedLinearField,
    Sphere2,
    divergence,
    dlog_map,
    exp_map,
    geodesic_distance,
    get_manifold,
    log_map,
    project_to_tangent,
    sample_uniform,
    tangent_basis,
)
from src.net import DriftModel


class TestProjection(unittest.TestCase):
    def test_examples(self) -> None:
        x = np.array([0.0, 0.0, 1.0])
        assert_array_equal(project_to_tangent(x, [0.0, 0.0, 1.0]), [0.0, 0.0, 0.0])
        assert_array_equal(project_to_tangent(x, [1.0, 0.0, 0.0]), [1.0, 0.0, 0.0])
        assert_array_equal(project_to_tangent(x, [1.0, 0.0, 1.0]), [1.0, 0.0, 0.0])

    def test_idempotent_and_orthogonal(self) -> None:
        rng = np.random.default_rng(0)
        x = sample_uniform(rng, 1000)
        v = rng.standard_normal((1000, 3))
        p = project_to_tangent(x, v)
        assert_allclose(np.sum(p * x, axis=-1), 0.0, atol=1e-12)
        assert_allclose(project_to_tangent(x, p), p, atol=1e-15)


class TestExpLog(unittest.TestCase):
    def test_exp_examples(self) -> None:
        x = np.array([0.0, 0.0, 1.0])
        assert_array_equal(exp_map(x, np.zeros(3)), x)
        assert_allclose(exp_map(x, [np.pi / 2, 0.0, 0.0]), [1.0, 0.0, 0.0], atol=1e-15)
        assert_allclose(exp_map(x, [np.pi, 0.0, 0.0]), [0.0, 0.0, -1.0], atol=1e-15)

    def test_round_trip_random_pairs(self) -> None:
        rng = np.random.default_rng(1)
        x = sample_uniform(rng, 10_000)
        y = sample_uniform(rng, 10_000)
        keep = np.sum(x * y, axis=-1) > -1.0 + 1e-6
        x, y = x[keep], y[keep]
        back = exp_map(x, log_map(x, y))
        self.assertLess(float(np.max(np.linalg.norm(back - y, axis=-1))), 1e-9)

    def test_exp_outputs_unit_norm(self) -> None:
        rng = np.random.default_rng(2)
        x = sample_uniform(rng, 10_000)
        v = project_to_tangent(x, 3.0 * rng.standard_normal((10_000, 3)))
        y = exp_map(x, v)
        assert_allclose(np.linalg.norm(y, axis=-1), 1.0, atol=1e-12)

    def test_log_of_self_is_zero(self) -> None:
        x = np.array([0.6, 0.0, 0.8])
        assert_allclose(log_map(x, x), np.zeros(3), atol=1e-15)

    def test_log_antipodal_raises(self) -> None:
        x = np.array([0.0, 0.0, 1.0])
        with self.assertRaises(AntipodalPoints):
            log_map(x, -x)

    def test_log_norm_is_distance(self) -> None:
        rng = np.random.default_rng(3)
        x = sample_uniform(rng, 500)
        y = sample_uniform(rng, 500)
        assert_allclose(np.linalg.norm(log_map(x, y), axis=-1), geodesic_distance(x, y), atol=1e-12)

    def test_dlog_matches_finite_difference(self) -> None:
        rng = np.random.default_rng(4)
        x = sample_uniform(rng, 200)
        v = project_to_tangent(x, rng.standard_normal((200, 3)))
        angles = np.concatenate([rng.uniform(0.01, 2.5, 196), [5e-5, 2e-4, 1e-3, 0.0]])
        v = v / np.linalg.norm(v, axis=-1, keepdims=True) * angles[:, None]
        y = exp_map(x, v)
        z = project_to_tangent(y, rng.standard_normal((200, 3)))
        eps = 1e-5
        numeric = (log_map(x, exp_map(y, eps * z)) - log_map(x, exp_map(y, -eps * z))) / (2.0 * eps)
        analytic = dlog_map(x, y, z)
        assert_allclose(analytic, numeric, atol=1e-7)
        assert_allclose(np.sum(analytic * x, axis=-1), 0.0, atol=1e-12)

    def test_dlog_at_base_point_is_projection(self) -> None:
        x = np.array([0.6, 0.0, 0.8])
        z = np.array([0.3, -1.0, 0.5])
        assert_allclose(dlog_map(x, x, z), project_to_tangent(x, z), atol=1e-15)


class TestDistance(unittest.TestCase):
    def test_examples(self) -> None:
        z = np.array([0.0, 0.0, 1.0])
        self.assertEqual(float(geodesic_distance(z, z)), 0.0)
        self.assertAlmostEqual(float(geodesic_distance(z, -z)), np.pi, places=15)
        self.assertAlmostEqual(float(geodesic_distance(z, [1.0, 0.0, 0.0])), np.pi / 2, places=15)

    def test_symmetric(self) -> None:
        rng = np.random.default_rng(4)
        x = sample_uniform(rng, 100)
        y = sample_uniform(rng, 100)
        assert_array_equal(geodesic_distance(x, y), geodesic_distance(y, x))


class TestUniformSampling(unittest.TestCase):
    def test_moments(self) -> None:
        x = sample_uniform(np.random.default_rng(5), 100_000)
        assert_allclose(np.linalg.norm(x, axis=-1), 1.0, atol=1e-12)
        assert_allclose(x.mean(axis=0), 0.0, atol=0.01)
        assert_allclose((x ** 2).mean(axis=0), 1.0 / 3.0, atol=0.01)

    def test_single_point_shape(self) -> None:
        self.assertEqual(sample_uniform(np.random.default_rng(0)).shape, (3,))


class TestTangentBasis(unittest.TestCase):
    def test_orthonormal(self) -> None:
        x = sample_uniform(np.random.default_rng(6), 1000)
        b = tangent_basis(x)
        for e in (b.e1, b.e2):
            assert_allclose(np.linalg.norm(e, axis=-1), 1.0, atol=1e-12)
            assert_allclose(np.sum(e * x, axis=-1), 0.0, atol=1e-12)
        assert_allclose(np.sum(b.e1 * b.e2, axis=-1), 0.0, atol=1e-12)

    def test_deterministic_and_pole_safe(self) -> None:
        x = np.array([0.0, 0.0, 1.0])
        b1, b2 = tangent_basis(x), tangent_basis(x.copy())
        assert_array_equal(b1.e1, b2.e1)
        assert_array_equal(b1.e2, b2.e2)
        self.assertTrue(np.all(np.isfinite(b1.e1)))


class TestDivergence(unittest.TestCase):
    def setUp(self) -> None:
        self.rng = np.random.default_rng(7)
        self.c = np.array([0.3, -1.2, 0.7])
        self.x = sample_uniform(self.rng, 1000)

    def test_exact_projected_constant(self) -> None:
        div = divergence(ProjectedConstantField(self.c), self.x, "exact")
        assert_allclose(div, -2.0 * self.x @ self.c, atol=1e-8)

    def test_finite_difference_projected_constant(self) -> None:
        div = divergence(ProjectedConstantField(self.c), self.x, ("finite_difference", 1e-4))
        assert_allclose(div, -2.0 * self.x @ self.c, atol=1e-3)

    def test_exact_projected_linear(self) -> None:
        a = self.rng.standard_normal((3, 3))
        div = divergence(ProjectedLinearField(a), self.x, "exact")
        expected = np.trace(a) - 3.0 * np.einsum("bi,ij,bj->b", self.x, a, self.x)
        assert_allclose(div, expected, atol=1e-10)

    def test_hutchinson_within_three_standard_errors(self) -> None:
        field = StaticField(ProjectedConstantField(self.c))
        est = divergence_estimate(field, 0.0, self.x, ("hutchinson", 1024), rng=self.rng)
        err = est - (-2.0 * self.x @ self.c)
        se = np.std(err, ddof=1) / np.sqrt(err.size)
        self.assertLess(abs(float(np.mean(err))), 3.0 * se + 1e-12)

    def test_exact_requires_jvp(self) -> None:
        with self.assertRaises(DivergenceModeUnsupported):
            divergence(lambda y: project_to_tangent(y, self.c), self.x, "exact")

    def test_network_exact_matches_finite_difference(self) -> None:
        rng = np.random.default_rng(8)
        model = DriftModel(width=16, time_features_k=2)
        model.set_params(0.3 * rng.standard_normal(model.param_count))
        field = model.at_time(0.4)
        x = self.x[:200]
        exact = divergence(field, x, "exact")
        fd = divergence(field, x, ("finite_difference", 1e-4))
        assert_allclose(exact, fd, atol=1e-6)


class TestDivergenceTheorem(unittest.TestCase):
    """Mean divergence over the uniform law vanishes for smooth tangent fields."""

    def _assert_null(self, div: np.ndarray) -> None:
        se = np.std(div, ddof=1) / np.sqrt(div.size)
        self.assertLess(abs(float(np.mean(div))), 3.0 * se)

    def test_three_fields(self) -> None:
        rng = np.random.default_rng(9)
        x = sample_uniform(rng, 100_000)
        self._assert_null(divergence(ProjectedConstantField([0.5, 1.0, -2.0]), x, "exact"))
        self._assert_null(divergence(ProjectedLinearField(rng.standard_normal((3, 3))), x, "exact"))
        model = DriftModel(width=16, time_features_k=2)
        model.set_params(0.3 * rng.standard_normal(model.param_count))
        self._assert_null(divergence(model.at_time(0.7), x, "exact"))


class TestRegistry(unittest.TestCase):
    def test_sphere2(self) -> None:
        m = get_manifold("sphere2")
        self.assertIsInstance(m, Sphere2)
        self.assertAlmostEqual(m.log_volume(), np.log(4 * np.pi))
        x = np.array([0.0, 0.0, 1.0])
        assert_allclose(m.exp(x, m.log(x, [1.0, 0.0, 0.0])), [1.0, 0.0, 0.0], atol=1e-15)

    def test_unknown(self) -> None:
        with self.assertRaises(ValueError):
            get_manifold("torus")


if __name__ == "__main__":
    unittest.main()
