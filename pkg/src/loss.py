"""
Implicit drift-matching losses.

For a batch {(t_i, x_i)} drawn from the frozen model's process:
    loss = sum_i 1/2 |frozen(t_i, x_i) + trainee(t_i, x_i)|^2 + g^2(t_i) div(trainee(t_i, .))(x_i)
Backward-net training (trainee b, frozen f) runs on forward trajectories,
forward-net training (trainee f, frozen b) on backward trajectories; both use
forward time. The divergence is spatial at fixed t, and only the trainee is
differentiated.

Divergence modes: "exact" (tangent basis, 2 jvp passes), ("hutchinson", m)
with projected Gaussian probes (E[z z^T] = P(x), so no rescaling is needed),
("finite_difference", h) via manifold.divergence (value only, no gradient).
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np

from .errors import DivergenceModeUnsupported
from .manifold import divergence as manifold_divergence
from .manifold import project_to_tangent, tangent_basis
from .net import DriftModel
from .sde import TrajectoryBatch, worker_streams

DEFAULT_DIV_MODE = "exact"
DEFAULT_HUTCHINSON_PROBES = 64

DivMode = Union[str, Tuple[str, float]]


def parse_div_mode(mode: DivMode) -> Tuple[str, float]:
    """'exact' | 'hutchinson[:m]' | 'finite_difference[:h]' | (kind, param)."""
    if isinstance(mode, tuple):
        kind, param = mode
    elif ":" in str(mode):
        kind, raw = str(mode).split(":", 1)
        param = float(raw)
    else:
        kind, param = str(mode), None
    if kind == "exact":
        return "exact", 0.0
    if kind == "hutchinson":
        return "hutchinson", float(param if param is not None else DEFAULT_HUTCHINSON_PROBES)
    if kind == "finite_difference":
        return "finite_difference", float(param if param is not None else 1e-4)
    raise ValueError(f"unknown divergence mode: {mode!r}")


@dataclass
class LossBatch:
    times: np.ndarray   # (B,) forward times, all grid times
    points: np.ndarray  # (B, 3)
    direction: str

    @classmethod
    def from_trajectories(cls, traj: TrajectoryBatch, rng: np.random.Generator) -> "LossBatch":
        """One uniformly drawn grid index in {1..N} (simulation order) per trajectory."""
        B = traj.batch_size
        idx = rng.integers(1, traj.grid.N + 1, size=B)
        times = traj.forward_times()[idx]
        points = traj.states[np.arange(B), idx]
        return cls(times=times, points=points, direction=traj.direction)

    def __len__(self) -> int:
        return int(self.points.shape[0])


@dataclass
class LossResult:
    loss: float
    quadratic: float
    divergence_term: float
    batch_size: int


class StaticField:
    """Adapts a time-independent tangent field x -> r(x) to the (t, x) drift interface."""

    def __init__(self, field) -> None:
        self.field = field

    def __call__(self, t, x):
        return self.field(x)

    def forward_jvp(self, t, x, direction):
        jvp = getattr(self.field, "jvp", None)
        if jvp is None:
            raise DivergenceModeUnsupported("field has no jvp")
        return jvp(x, direction)


def _probe_directions(x: np.ndarray, kind: str, param: float, rng: Optional[np.random.Generator]) -> Tuple[List[np.ndarray], float]:
    if kind == "exact":
        basis = tangent_basis(x)
        return [basis.e1, basis.e2], 1.0
    m = int(param)
    if rng is None:
        raise ValueError("hutchinson divergence needs an rng")
    return [project_to_tangent(x, rng.standard_normal(x.shape)) for _ in range(m)], 1.0 / m


def divergence_estimate(trainee, t, x: np.ndarray, mode: DivMode = DEFAULT_DIV_MODE,
                        rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Spatial divergence of x -> trainee(t, x) at each row of x."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    kind, param = parse_div_mode(mode)
    if kind == "finite_difference":
        return manifold_divergence(lambda y: trainee(t, y), x, ("finite_difference", param))
    if isinstance(trainee, DriftModel):
        dirs, weight = _probe_directions(x, kind, param, rng)
        tape = trainee.trace(t, x, dirs)
        return weight * sum(np.sum(dout * d, axis=-1) for dout, d in zip(tape.douts, dirs))
    if not hasattr(trainee, "forward_jvp"):
        raise DivergenceModeUnsupported(f"{kind} divergence needs a trainee with forward_jvp")
    dirs, weight = _probe_directions(x, kind, param, rng)
    total = np.zeros(x.shape[0])
    for d in dirs:
        _, dout = trainee.forward_jvp(t, x, d)
        total += np.sum(dout * d, axis=-1)
    return weight * total


def _chunk_loss(trainee, frozen, times, points, g2, kind, param, rng, scale, compute_grad, grad):
    a = np.asarray(frozen(times, points), dtype=np.float64)
    if compute_grad:
        dirs, weight = _probe_directions(points, kind, param, rng)
        tape = trainee.trace(times, points, dirs)
        r = tape.out
        div = weight * sum(np.sum(dout * d, axis=-1) for dout, d in zip(tape.douts, dirs))
    else:
        r = np.asarray(trainee(times, points), dtype=np.float64)
        div = divergence_estimate(trainee, times, points, (kind, param), rng)
    resid = a + r
    quad = 0.5 * np.sum(resid * resid, axis=-1)
    div_term = g2 * div
    if compute_grad:
        out_bar = scale * resid
        dout_bars = [(scale * weight * g2)[:, None] * d for d in dirs]
        trainee.backward(tape, out_bar, dout_bars, grad=grad)
    return float(np.sum(quad)), float(np.sum(div_term))


def implicit_drift_loss(
    trainee,
    frozen,
    batch: LossBatch,
    schedule,
    div_mode: DivMode = DEFAULT_DIV_MODE,
    reduction: str = "mean",
    rng: Optional[np.random.Generator] = None,
    compute_grad: bool = True,
    workers: int = 1,
) -> LossResult:
    """
    Loss value, and (compute_grad) d(loss)/d(trainee params) accumulated into
    trainee.grad. reduction "sum" is the literal batch sum, "mean" divides by B.
    The frozen model is only evaluated.
    """
    kind, param = parse_div_mode(div_mode)
    if compute_grad:
        if not isinstance(trainee, DriftModel):
            raise DivergenceModeUnsupported("gradients need a DriftModel trainee")
        if kind == "finite_difference":
            raise DivergenceModeUnsupported("finite-difference divergence has no parameter gradient; use exact or hutchinson")
    elif kind != "finite_difference" and not (isinstance(trainee, DriftModel) or hasattr(trainee, "forward_jvp")):
        raise DivergenceModeUnsupported(f"{kind} divergence needs a trainee with forward_jvp")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    B = len(batch)
    if B == 0:
        return LossResult(0.0, 0.0, 0.0, 0)
    scale = 1.0 / B if reduction == "mean" else 1.0
    g2 = np.asarray(schedule.g_squared(batch.times), dtype=np.float64).reshape(B)

    if workers <= 1 or B < 2:
        quad, div_term = _chunk_loss(trainee, frozen, batch.times, batch.points, g2, kind, param,
                                     rng, scale, compute_grad, None)
    else:
        chunks = np.array_split(np.arange(B), workers)
        streams = _streams(rng, workers) if kind == "hutchinson" else [None] * workers
        buffers = [np.zeros_like(trainee.grad) for _ in chunks] if compute_grad else [None] * workers

        def run(j):
            idx = chunks[j]
            return _chunk_loss(trainee, frozen, batch.times[idx], batch.points[idx], g2[idx], kind, param,
                               streams[j], scale, compute_grad, buffers[j])

        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, range(len(chunks))))
        # serial reduce in chunk order
        quad = sum(p[0] for p in parts)
        div_term = sum(p[1] for p in parts)
        if compute_grad:
            for buf in buffers:
                trainee.grad += buf
    return LossResult(loss=scale * (quad + div_term), quadratic=scale * quad,
                      divergence_term=scale * div_term, batch_size=B)


def _streams(rng: Optional[np.random.Generator], workers: int):
    if rng is None:
        raise ValueError("hutchinson divergence needs an rng")
    return worker_streams(rng, workers)
