"""
Time-discretized diffusions on S^2: triangular noise schedule, geodesic random
walk, and forward/backward trajectory batches for training.

Time conventions:
  - forward trajectory: state k sits at forward time t_k = k * gamma, drift f(t_k, .)
  - backward trajectory: states are stored in simulation order (prior side
    first); state k sits at forward time T - t_k and step k uses b(T - t_k, .)
Drift networks always receive forward time.
"""

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Union

import numpy as np

from .data import xyz_to_latlon
from .errors import EmptyDataset, OutOfHorizon
from .manifold import exp_map, project_to_tangent

DEFAULT_T = 1.0
DEFAULT_G2_PEAK = 0.05
DEFAULT_G2_FLOOR = 0.001
DEFAULT_STEPS = 10

FORWARD = "forward"
BACKWARD = "backward"

Drift = Callable[[Union[float, np.ndarray], np.ndarray], np.ndarray]
Sampler = Callable[[int, np.random.Generator], np.ndarray]


@dataclass(frozen=True)
class NoiseSchedule:
    """g^2(t): g2_floor at 0 and T, linear up to g2_peak at T/2."""

    T: float = DEFAULT_T
    g2_peak: float = DEFAULT_G2_PEAK
    g2_floor: float = DEFAULT_G2_FLOOR

    def __post_init__(self) -> None:
        if not self.T > 0:
            raise ValueError(f"schedule.T must be > 0, got {self.T}")
        if not self.g2_floor > 0:
            raise ValueError(f"schedule.g2_floor must be > 0, got {self.g2_floor}")
        if self.g2_peak < self.g2_floor:
            raise ValueError(f"schedule.g2_peak ({self.g2_peak}) must be >= g2_floor ({self.g2_floor})")

    def g_squared(self, t):
        t_arr = np.asarray(t, dtype=np.float64)
        _check_horizon(t_arr, self.T)
        half = 0.5 * self.T
        frac = 1.0 - np.abs(t_arr - half) / half
        out = self.g2_floor + (self.g2_peak - self.g2_floor) * frac
        return float(out) if out.ndim == 0 else out

    def g(self, t):
        return np.sqrt(self.g_squared(t))


@dataclass(frozen=True)
class ConstantSchedule:
    """g^2(t) = g2 on [0, T]; g2 = 0 allowed (debug runs and tests)."""

    T: float = DEFAULT_T
    g2: float = 1.0

    def g_squared(self, t):
        t_arr = np.asarray(t, dtype=np.float64)
        _check_horizon(t_arr, self.T)
        out = np.full(t_arr.shape, float(self.g2))
        return float(out) if out.ndim == 0 else out

    def g(self, t):
        return np.sqrt(self.g_squared(t))


def _check_horizon(t: np.ndarray, T: float) -> None:
    # grid arithmetic can land a hair outside [0, T]
    tol = 1e-12 * max(1.0, T)
    if np.any(t < -tol) or np.any(t > T + tol):
        raise OutOfHorizon(f"time outside [0, {T}]", t_min=float(np.min(t)), t_max=float(np.max(t)))


def g_squared(schedule, t):
    return schedule.g_squared(t)


@dataclass(frozen=True)
class TimeGrid:
    T: float = DEFAULT_T
    N: int = DEFAULT_STEPS

    def __post_init__(self) -> None:
        if self.N < 1:
            raise ValueError(f"grid.N must be >= 1, got {self.N}")

    @property
    def gamma(self) -> float:
        return self.T / self.N

    @property
    def times(self) -> np.ndarray:
        t = np.arange(self.N + 1, dtype=np.float64) * self.gamma
        t[-1] = self.T
        return t

    def reverse(self, times: np.ndarray) -> np.ndarray:
        """Map simulation time to forward time (and back: an involution)."""
        return self.T - np.asarray(times, dtype=np.float64)


@dataclass
class TrajectoryBatch:
    grid: TimeGrid
    states: np.ndarray  # (B, N+1, 3)
    direction: str = FORWARD

    @property
    def batch_size(self) -> int:
        return int(self.states.shape[0])

    def forward_times(self) -> np.ndarray:
        """Forward time of each stored state index."""
        t = self.grid.times
        return t if self.direction == FORWARD else self.grid.reverse(t)

    def data_side(self) -> np.ndarray:
        return self.states[:, 0] if self.direction == FORWARD else self.states[:, -1]

    def prior_side(self) -> np.ndarray:
        return self.states[:, -1] if self.direction == FORWARD else self.states[:, 0]

    def terminal(self) -> np.ndarray:
        """Last simulated state."""
        return self.states[:, -1]


def geodesic_step(drift: Drift, schedule, x: np.ndarray, tau: float, step: float, z_bar: np.ndarray) -> np.ndarray:
    """One walk step of length `step` from x at drift time tau: exp_x(step * drift + sqrt(step) g(tau) P(x) z_bar)."""
    z = project_to_tangent(x, z_bar)
    g_k = float(np.sqrt(schedule.g_squared(tau)))
    w = step * drift(tau, x) + (np.sqrt(step) * g_k) * z
    return exp_map(x, w)


def geodesic_random_walk(
    drift: Drift,
    schedule,
    grid: TimeGrid,
    x0: np.ndarray,
    rng: Optional[np.random.Generator] = None,
    reverse_time: bool = False,
    noise: Optional[np.ndarray] = None,
) -> TrajectoryBatch:
    """
    X_{k+1} = exp_{X_k}(gamma * drift(tau_k, X_k) + sqrt(gamma) g(tau_k) P(X_k) Zbar_{k+1})
    with tau_k = t_k, or T - t_k when reverse_time. `noise` (N, B, 3) replaces
    the Gaussian draws when given.
    """
    x = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    B = x.shape[0]
    gamma = grid.gamma
    times = grid.times
    states = np.empty((B, grid.N + 1, 3), dtype=np.float64)
    states[:, 0] = x
    for k in range(grid.N):
        tau = grid.T - times[k] if reverse_time else times[k]
        if noise is not None:
            z_bar = noise[k]
        else:
            z_bar = rng.standard_normal((B, 3))
        x = geodesic_step(drift, schedule, x, tau, gamma, z_bar)
        states[:, k + 1] = x
    return TrajectoryBatch(grid=grid, states=states, direction=BACKWARD if reverse_time else FORWARD)


def worker_streams(rng: np.random.Generator, workers: int) -> List[np.random.Generator]:
    """Private per-worker generators drawn from rng (one draw per worker)."""
    seeds = rng.integers(0, 2**63 - 1, size=workers)
    return [np.random.default_rng([int(s), i]) for i, s in enumerate(seeds)]


def _parallel_walk(drift, schedule, grid, x0, rng, reverse_time, workers) -> TrajectoryBatch:
    if workers <= 1 or x0.shape[0] < 2:
        return geodesic_random_walk(drift, schedule, grid, x0, rng, reverse_time=reverse_time)
    chunks = np.array_split(np.arange(x0.shape[0]), workers)
    streams = worker_streams(rng, workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(
            lambda args: geodesic_random_walk(drift, schedule, grid, x0[args[0]], args[1], reverse_time=reverse_time),
            zip(chunks, streams),
        ))
    states = np.concatenate([p.states for p in parts], axis=0)
    return TrajectoryBatch(grid=grid, states=states, direction=parts[0].direction)


def simulate_forward(
    model_f: Drift,
    data_sampler: Sampler,
    batch: int,
    rng: np.random.Generator,
    schedule,
    grid: TimeGrid,
    workers: int = 1,
) -> TrajectoryBatch:
    """X_0 ~ data, forward walk with drift f(t, x)."""
    x0 = np.asarray(data_sampler(batch, rng), dtype=np.float64).reshape(-1, 3)
    if x0.shape[0] == 0 and batch > 0:
        raise EmptyDataset("data sampler returned no points")
    return _parallel_walk(model_f, schedule, grid, x0, rng, False, workers)


def simulate_backward(
    model_b: Drift,
    prior_sampler: Sampler,
    batch: int,
    rng: np.random.Generator,
    schedule,
    grid: TimeGrid,
    workers: int = 1,
) -> TrajectoryBatch:
    """Y_0 ~ prior (forward time T), backward walk with drift b(T - t, y)."""
    y0 = np.asarray(prior_sampler(batch, rng), dtype=np.float64).reshape(-1, 3)
    if y0.shape[0] == 0 and batch > 0:
        raise EmptyDataset("prior sampler returned no points")
    return _parallel_walk(model_b, schedule, grid, y0, rng, True, workers)


def dump_trajectories(traj: TrajectoryBatch, path: Path) -> Path:
    """Debug dump: one row per (trajectory, step) with lat/lon in degrees."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    times = traj.forward_times()
    lat, lon = xyz_to_latlon(traj.states.reshape(-1, 3))
    lat = lat.reshape(traj.states.shape[:2])
    lon = lon.reshape(traj.states.shape[:2])
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["trajectory", "step", "t", "direction", "lat_deg", "lon_deg"])
        for i in range(traj.batch_size):
            for k in range(traj.grid.N + 1):
                writer.writerow([i, k, repr(float(times[k])), traj.direction, repr(float(lat[i, k])), repr(float(lon[i, k]))])
    return path
