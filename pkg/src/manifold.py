"""
Geometry of the unit sphere S^2 embedded in R^3.

Points are float64 arrays of shape (..., 3) with unit norm; tangent vectors at x
are arrays of the same shape orthogonal to x. Every function broadcasts over
leading batch dimensions.

Divergence of a tangent field r on the embedded sphere:
    div(r)(x) = sum_i <D_{e_i} r(x), e_i>
with (e_1, e_2) an orthonormal tangent basis at x and D the ambient directional
derivative. Fields passed to divergence() are callables x -> r(x); for
mode="exact" they must also expose jvp(x, d) -> (r(x), D_d r(x)).
"""

from abc import ABC, abstractmethod
from typing import Callable, Dict, NamedTuple, Optional, Tuple, Type, Union

import numpy as np

from .errors import AntipodalPoints, DivergenceModeUnsupported

ANTIPODAL_EPS = 1e-9
# Below this tangent norm exp/log use their Taylor limits.
_SMALL = 1e-12

Array = np.ndarray


class TangentBasis(NamedTuple):
    base: Array
    e1: Array
    e2: Array


def as_sphere_point(coords) -> Array:
    """Renormalize ambient coordinates onto S^2."""
    x = np.asarray(coords, dtype=np.float64)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def inner(u: Array, v: Array) -> Array:
    return np.sum(u * v, axis=-1)


def project_to_tangent(x: Array, v: Array) -> Array:
    """P(x)v = v - <v, x> x."""
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return v - inner(v, x)[..., None] * x


def exp_map(x: Array, v: Array) -> Array:
    """cos(|v|) x + sin(|v|) v / |v|, renormalized."""
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    safe = np.where(norm > _SMALL, norm, 1.0)
    sinc = np.where(norm > _SMALL, np.sin(norm) / safe, 1.0)
    y = np.cos(norm) * x + sinc * v
    return y / np.linalg.norm(y, axis=-1, keepdims=True)


def log_map(x: Array, y: Array, eps: float = ANTIPODAL_EPS) -> Array:
    """Inverse of exp_map; raises AntipodalPoints when <x, y> <= -1 + eps."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    cos = np.clip(inner(x, y), -1.0, 1.0)
    if np.any(cos <= -1.0 + eps):
        raise AntipodalPoints(
            "log_map undefined for (near-)antipodal points",
            min_inner=float(np.min(cos)),
            eps=eps,
        )
    u = y - cos[..., None] * x
    u_norm = np.linalg.norm(u, axis=-1, keepdims=True)
    # arctan2 keeps precision near theta = 0 where arccos does not
    theta = np.arctan2(u_norm[..., 0], cos)[..., None]
    scale = np.where(u_norm > _SMALL, theta / np.where(u_norm > _SMALL, u_norm, 1.0), 1.0)
    return scale * u


def dlog_map(x: Array, y: Array, z: Array) -> Array:
    """
    Differential of y -> log_x(y) applied to z (tangent at y). The result is
    tangent at x, and equals P(x) z when y = x.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    cos = np.clip(inner(x, y), -1.0, 1.0)
    u = y - cos[..., None] * x
    sin = np.linalg.norm(u, axis=-1)
    theta = np.arctan2(sin, cos)
    small = theta < 1e-4
    safe_sin = np.where(small, 1.0, sin)
    th2 = theta * theta
    ratio = np.where(small, 1.0 + th2 / 6.0, theta / safe_sin)
    alpha = np.where(small, -(1.0 / 3.0 + 2.0 * th2 / 15.0), -(sin - theta * cos) / safe_sin ** 3)
    xz = inner(x, z)
    return (alpha * xz)[..., None] * u + ratio[..., None] * (z - xz[..., None] * x)


def geodesic_distance(x: Array, y: Array) -> Array:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    cos = inner(x, y)
    sin = np.linalg.norm(np.cross(x, y), axis=-1)
    # atan2 of (|x cross y|, <x, y>) stays in [0, pi] and is exact at d(x, x) = 0
    return np.arctan2(sin, np.clip(cos, -1.0, 1.0))


def sample_uniform(rng: np.random.Generator, size: Optional[int] = None) -> Array:
    """Normalized standard Gaussian; shape (3,) when size is None else (size, 3)."""
    n = 1 if size is None else int(size)
    z = rng.standard_normal((n, 3))
    norms = np.linalg.norm(z, axis=-1)
    bad = norms < _SMALL
    while np.any(bad):
        z[bad] = rng.standard_normal((int(bad.sum()), 3))
        norms = np.linalg.norm(z, axis=-1)
        bad = norms < _SMALL
    out = z / norms[:, None]
    return out[0] if size is None else out


def tangent_basis(x: Array) -> TangentBasis:
    """
    Gram-Schmidt on the standard axis least aligned with x (ties -> lowest
    index), then e2 = x cross e1.
    """
    x = np.asarray(x, dtype=np.float64)
    axis_idx = np.argmin(np.abs(x), axis=-1)
    anchor = np.zeros(x.shape, dtype=np.float64)
    np.put_along_axis(anchor, np.asarray(axis_idx)[..., None], 1.0, axis=-1)
    e1 = project_to_tangent(x, anchor)
    e1 = e1 / np.linalg.norm(e1, axis=-1, keepdims=True)
    e2 = np.cross(x, e1)
    return TangentBasis(base=x, e1=e1, e2=e2)


def _transported_basis(x: Array, e: Array, h: float) -> Tuple[Array, Array, Array, Array]:
    """Points exp_x(+-h e) and e carried along that geodesic."""
    x_plus = exp_map(x, h * e)
    x_minus = exp_map(x, -h * e)
    e_plus = np.cos(h) * e - np.sin(h) * x
    e_minus = np.cos(h) * e + np.sin(h) * x
    return x_plus, x_minus, e_plus, e_minus


def divergence(field: Callable, x: Array, mode: Union[str, Tuple[str, float]] = "exact") -> Array:
    """
    Riemannian divergence of a tangent field at x (shape (..., 3) -> (...)).

    mode: "exact" (field.jvp required), ("finite_difference", h) or
    "finite_difference" (h = 1e-4). Finite differences are central along the
    geodesics through x in each basis direction.
    """
    x = np.asarray(x, dtype=np.float64)
    kind, h = _parse_mode(mode)
    basis = tangent_basis(x)
    total = np.zeros(x.shape[:-1], dtype=np.float64)
    for e in (basis.e1, basis.e2):
        if kind == "exact":
            jvp = getattr(field, "jvp", None)
            if jvp is None:
                raise DivergenceModeUnsupported("exact divergence needs a field with jvp(x, direction)")
            _, d_out = jvp(x, e)
            total = total + inner(d_out, e)
        else:
            x_plus, x_minus, e_plus, e_minus = _transported_basis(x, e, h)
            total = total + (inner(field(x_plus), e_plus) - inner(field(x_minus), e_minus)) / (2.0 * h)
    return total


def _parse_mode(mode) -> Tuple[str, float]:
    if isinstance(mode, tuple):
        kind, h = mode
        return str(kind), float(h)
    if mode == "exact":
        return "exact", 0.0
    if mode == "finite_difference":
        return "finite_difference", 1e-4
    raise ValueError(f"unknown divergence mode: {mode!r}")


class ProjectedConstantField:
    """r(x) = P(x) c; div r = -2 <c, x>. Analytic reference field."""

    def __init__(self, c) -> None:
        self.c = np.asarray(c, dtype=np.float64)

    def __call__(self, x: Array) -> Array:
        return project_to_tangent(x, np.broadcast_to(self.c, np.shape(x)))

    def jvp(self, x: Array, d: Array) -> Tuple[Array, Array]:
        c = np.broadcast_to(self.c, np.shape(x))
        # D_d (c - <c,x> x) = -<c,d> x - <c,x> d
        return self(x), -inner(c, d)[..., None] * x - inner(c, x)[..., None] * d


class ProjectedLinearField:
    """r(x) = P(x) A x for a fixed 3x3 matrix A."""

    def __init__(self, a) -> None:
        self.a = np.asarray(a, dtype=np.float64)

    def __call__(self, x: Array) -> Array:
        return project_to_tangent(x, x @ self.a.T)

    def jvp(self, x: Array, d: Array) -> Tuple[Array, Array]:
        ax = x @ self.a.T
        ad = d @ self.a.T
        d_out = ad - (inner(ad, x) + inner(ax, d))[..., None] * x - inner(ax, x)[..., None] * d
        return self(x), d_out


# ---------------------------
# Manifold abstraction
# ---------------------------

_MANIFOLDS: Dict[str, Type["Manifold"]] = {}


def register_manifold(name: str):
    def decorator(cls):
        _MANIFOLDS[name] = cls
        cls.name = name
        return cls
    return decorator


def get_manifold(name: str) -> "Manifold":
    key = name.lower()
    if key not in _MANIFOLDS:
        raise ValueError(f"Manifold '{name}' is not registered. Available: {sorted(_MANIFOLDS)}")
    return _MANIFOLDS[key]()


class Manifold(ABC):
    """Operations the simulators, losses and ODE need from a compact manifold."""

    name = ""
    ambient_dim = 0
    dim = 0

    @abstractmethod
    def project(self, x: Array, v: Array) -> Array: ...

    @abstractmethod
    def exp(self, x: Array, v: Array) -> Array: ...

    @abstractmethod
    def log(self, x: Array, y: Array) -> Array: ...

    @abstractmethod
    def distance(self, x: Array, y: Array) -> Array: ...

    @abstractmethod
    def sample_uniform(self, rng: np.random.Generator, size: int) -> Array: ...

    @abstractmethod
    def divergence(self, field: Callable, x: Array, mode="exact") -> Array: ...

    @abstractmethod
    def log_volume(self) -> float: ...


@register_manifold("sphere2")
class Sphere2(Manifold):
    ambient_dim = 3
    dim = 2

    def project(self, x, v):
        return project_to_tangent(x, v)

    def exp(self, x, v):
        return exp_map(x, v)

    def log(self, x, y):
        return log_map(x, y)

    def distance(self, x, y):
        return geodesic_distance(x, y)

    def sample_uniform(self, rng, size):
        return sample_uniform(rng, size)

    def divergence(self, field, x, mode="exact"):
        return divergence(field, x, mode)

    def log_volume(self) -> float:
        return float(np.log(4.0 * np.pi))

    def __repr__(self) -> str:
        return "Sphere2()"
