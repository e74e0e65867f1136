"""
Iterative proportional fitting for the Schrodinger bridge on S^2.

Iteration n trains the backward drift b^n on forward trajectories of the frozen
f^n (phase "b"), then the forward drift f^{n+1} on backward trajectories of the
frozen b^n (phase "f"). The loop starts from f^0 = 0 and, after L+1
iterations, returns the pair (f^{L+1}, b^L).

Run directory layout:
    ipf_{n}_b.ckpt        b^n after phase (n, b)
    ipf_{n}_f.ckpt        f^n (ipf_0_f.ckpt is the zero-initialized start)
    metrics.csv           one row per `metrics_every` inner steps + one diagnostics row per iteration
    diagnostics.csv       one row per completed iteration
    events.jsonl          phase/checkpoint/resume events (wall-clock lives here)

Every phase draws from its own stream default_rng([seed, n, 0|1]); diagnostics
use [seed, n, 2]. A phase therefore depends only on (seed, n, the checkpointed
models), which is what makes resume reproduce an uninterrupted run.
"""

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import audit
from .data import median_bandwidth, mmd, mmd_bootstrap_se
from .errors import MissingCheckpoint, NonFiniteGradient, OutOfHorizon, ShapeMismatch
from .loss import DEFAULT_DIV_MODE, LossBatch, implicit_drift_loss
from .net import (
    DEFAULT_ACTIVATION,
    DEFAULT_BETAS,
    DEFAULT_CLIP,
    DEFAULT_EPS,
    DEFAULT_LR,
    DEFAULT_TIME_FEATURES,
    DEFAULT_WIDTH,
    DriftModel,
    OptimizerState,
    ZeroDrift,
    load,
    optimizer_step,
    save,
)
from .sde import NoiseSchedule, TimeGrid, geodesic_step, simulate_backward, simulate_forward

PHASE_B = "b"
PHASE_F = "f"
PHASE_DIAG = "diagnostics"

METRICS_COLUMNS = ["n", "phase", "inner_step", "loss", "grad_norm", "mmd_prior", "mmd_data"]
DIAGNOSTICS_COLUMNS = ["n", "mmd_prior", "mmd_prior_se", "mmd_data", "mmd_data_se", "bandwidth"]

DEFAULT_INNER_STEPS = 5000
DEFAULT_BATCH = 256
DEFAULT_L = 4
PLATEAU_WINDOW = 200
PLATEAU_PATIENCE = 500
PLATEAU_TOL = 1e-3
DEFAULT_DIAG_SAMPLES = 1000
DEFAULT_BOOTSTRAP = 20

# stream tags within default_rng([seed, n, tag])
_STREAM_B = 0
_STREAM_F = 1
_STREAM_DIAG = 2
_STREAM_INIT_B = 3
_STREAM_INIT_F = 4
_STREAM_BANDWIDTH = 5


@dataclass
class IpfConfig:
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    grid: TimeGrid = field(default_factory=TimeGrid)
    L: int = DEFAULT_L
    inner_steps: int = DEFAULT_INNER_STEPS
    batch: int = DEFAULT_BATCH
    warm_start: bool = True
    skip_forward_phase: bool = False
    early_stop: bool = True
    plateau_window: int = PLATEAU_WINDOW
    plateau_patience: int = PLATEAU_PATIENCE
    plateau_tol: float = PLATEAU_TOL
    loss_reduction: str = "mean"
    div_mode: str = DEFAULT_DIV_MODE
    width: int = DEFAULT_WIDTH
    time_features_k: int = DEFAULT_TIME_FEATURES
    activation: str = DEFAULT_ACTIVATION
    lr: float = DEFAULT_LR
    beta1: float = DEFAULT_BETAS[0]
    beta2: float = DEFAULT_BETAS[1]
    eps: float = DEFAULT_EPS
    clip: Optional[float] = DEFAULT_CLIP
    diag_samples: int = DEFAULT_DIAG_SAMPLES
    bootstrap: int = DEFAULT_BOOTSTRAP
    diagnostics: bool = True
    metrics_every: int = 1
    record_wall_time: bool = False
    seed: int = 0
    workers: int = 1

    def __post_init__(self) -> None:
        if self.L < 0:
            raise ValueError(f"ipf.L must be >= 0, got {self.L}")
        if self.inner_steps < 0:
            raise ValueError(f"ipf.inner_steps must be >= 0, got {self.inner_steps}")
        if self.grid.T != self.schedule.T:
            raise ValueError(f"grid.T ({self.grid.T}) and schedule.T ({self.schedule.T}) differ")

    @property
    def T(self) -> float:
        return self.schedule.T

    def new_model(self, rng: np.random.Generator) -> DriftModel:
        return DriftModel.initialize(rng, self.width, self.time_features_k, self.T, self.activation)

    def new_optimizer(self, model: DriftModel) -> OptimizerState:
        return OptimizerState.for_model(model, self.lr, self.beta1, self.beta2, self.eps, self.clip)


@dataclass
class IpfState:
    n: int
    model_f: DriftModel
    model_b: DriftModel
    phase: str = PHASE_B
    inner_step: int = 0
    run_dir: Optional[Path] = None
    history: List[Dict] = field(default_factory=list)
    diagnostics: List[Dict] = field(default_factory=list)
    bandwidth: Optional[float] = None
    early_stopped: Dict[Tuple[int, str], bool] = field(default_factory=dict)

    @property
    def events_path(self) -> Optional[Path]:
        return None if self.run_dir is None else self.run_dir / "events.jsonl"


def phase_rng(seed: int, n: int, tag: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(n), int(tag)])


def checkpoint_path(run_dir: Path, n: int, phase: str) -> Path:
    return Path(run_dir) / f"ipf_{n}_{phase}.ckpt"


# ---------------------------
# phases
# ---------------------------


def warm_start(model_next: DriftModel, model_prev: DriftModel) -> DriftModel:
    """Copy the previous same-direction model's parameters into the next trainee."""
    if (model_next.width, model_next.time_features_k) != (model_prev.width, model_prev.time_features_k) \
            or model_next.param_count != model_prev.param_count:
        raise ShapeMismatch(
            "warm start between differently shaped models",
            next_width=model_next.width,
            prev_width=model_prev.width,
        )
    model_next.set_params(model_prev.params)
    return model_next


def plateaued(losses: Sequence[float], window: int, patience: int, tol: float) -> bool:
    """True when the `window`-step moving average improved by < tol (relative) over the last `patience` steps."""
    if len(losses) < window + patience:
        return False
    arr = np.asarray(losses, dtype=np.float64)
    now = float(np.mean(arr[-window:]))
    before = float(np.mean(arr[-window - patience:-patience]))
    return (before - now) < tol * max(abs(before), 1e-12)


def _train_phase(state: IpfState, trainee: DriftModel, frozen, simulate, sampler, config: IpfConfig,
                 rng: np.random.Generator, phase: str, writer=None) -> DriftModel:
    opt = config.new_optimizer(trainee)
    losses: List[float] = []
    started = time.perf_counter()
    audit.log_event("phase_start", path=state.events_path, n=state.n, phase=phase, inner_steps=config.inner_steps)
    state.phase = phase
    stopped = False
    step = 0
    for step in range(config.inner_steps):
        state.inner_step = step
        traj = simulate(frozen, sampler, config.batch, rng, config.schedule, config.grid, workers=config.workers)
        batch = LossBatch.from_trajectories(traj, rng)
        result = implicit_drift_loss(
            trainee, frozen, batch, config.schedule,
            div_mode=config.div_mode, reduction=config.loss_reduction, rng=rng,
            compute_grad=True, workers=config.workers,
        )
        try:
            grad_norm = optimizer_step(trainee, opt)
        except NonFiniteGradient as exc:
            raise exc.with_context(state.n, phase, step) from exc
        losses.append(result.loss)
        if step % config.metrics_every == 0 or step == config.inner_steps - 1:
            row = {"n": state.n, "phase": phase, "inner_step": step, "loss": result.loss,
                   "grad_norm": grad_norm, "mmd_prior": None, "mmd_data": None}
            if config.record_wall_time:
                row["wall_time"] = time.time()
            state.history.append(row)
            if writer is not None:
                writer(row)
        if config.early_stop and plateaued(losses, config.plateau_window, config.plateau_patience, config.plateau_tol):
            stopped = True
            break
    state.early_stopped[(state.n, phase)] = stopped
    audit.log_event(
        "phase_end", path=state.events_path, n=state.n, phase=phase,
        steps=len(losses), final_loss=losses[-1] if losses else None, early_stopped=stopped,
        latency_ms=int((time.perf_counter() - started) * 1000),
    )
    return trainee


def train_backward_phase(state: IpfState, data_sampler, config: IpfConfig, rng: np.random.Generator,
                         writer=None) -> DriftModel:
    """Fit b^n on forward trajectories of the frozen f^n started from the data."""
    return _train_phase(state, state.model_b, state.model_f, simulate_forward, data_sampler, config, rng, PHASE_B, writer)


def train_forward_phase(state: IpfState, prior_sampler, config: IpfConfig, rng: np.random.Generator,
                        writer=None) -> DriftModel:
    """Fit f^{n+1} on backward trajectories of the frozen b^n started from the prior."""
    return _train_phase(state, state.model_f, state.model_b, simulate_backward, prior_sampler, config, rng, PHASE_F, writer)


def train_rsgm(config: IpfConfig, data_sampler, run_dir: Optional[Path] = None) -> DriftModel:
    """
    Standalone implicit score matching against Brownian noising (frozen drift 0).
    Same streams as iteration n=0 of run_ipf, so the results agree bitwise.
    """
    model_b = config.new_model(phase_rng(config.seed, 0, _STREAM_INIT_B))
    state = IpfState(n=0, model_f=ZeroDrift(config.T), model_b=model_b, run_dir=run_dir)
    return _train_phase(state, model_b, state.model_f, simulate_forward, data_sampler, config,
                        phase_rng(config.seed, 0, _STREAM_B), PHASE_B)


# ---------------------------
# diagnostics
# ---------------------------


def compute_diagnostics(state: IpfState, data_sampler, prior_sampler, config: IpfConfig,
                        data_reference: Optional[np.ndarray] = None) -> Dict:
    """MMD(forward terminal, prior) for f^{n+1} and MMD(backward terminal, data) for b^n, with bootstrap SEs."""
    rng = phase_rng(config.seed, state.n, _STREAM_DIAG)
    m = config.diag_samples
    fwd = simulate_forward(state.model_f, data_sampler, m, rng, config.schedule, config.grid, workers=config.workers)
    bwd = simulate_backward(state.model_b, prior_sampler, m, rng, config.schedule, config.grid, workers=config.workers)
    prior_ref = prior_sampler(m, rng)
    data_ref = data_reference if data_reference is not None else data_sampler(m, rng)
    bw = state.bandwidth
    row = {
        "n": state.n,
        "mmd_prior": mmd(fwd.terminal(), prior_ref, bw),
        "mmd_prior_se": mmd_bootstrap_se(fwd.terminal(), prior_ref, bw, rng, config.bootstrap),
        "mmd_data": mmd(bwd.terminal(), data_ref, bw),
        "mmd_data_se": mmd_bootstrap_se(bwd.terminal(), data_ref, bw, rng, config.bootstrap),
        "bandwidth": bw,
    }
    audit.log_event("diagnostics", path=state.events_path, **row)
    return row


def run_bandwidth(config: IpfConfig, data_sampler, prior_sampler) -> float:
    rng = phase_rng(config.seed, 0, _STREAM_BANDWIDTH)
    m = min(config.diag_samples, 1000)
    return median_bandwidth(data_sampler(m, rng), prior_sampler(m, rng))


# ---------------------------
# CSV streams
# ---------------------------


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


class CsvStream:
    """Append-only CSV with a fixed header; rows are flushed as written."""

    def __init__(self, path: Path, columns: Sequence[str]) -> None:
        self.path = Path(path)
        self.columns = list(columns)
        if not self.path.exists():
            with open(self.path, "w", encoding="utf-8", newline="") as f:
                csv.writer(f).writerow(self.columns)

    def __call__(self, row: Dict) -> None:
        with open(self.path, "a", encoding="utf-8", newline="") as f:
            csv.writer(f).writerow([_fmt(row.get(c)) for c in self.columns])

    def read(self) -> List[Dict[str, str]]:
        with open(self.path, "r", encoding="utf-8", newline="") as f:
            return list(csv.DictReader(f))

    def truncate(self, keep) -> int:
        """Rewrite keeping rows where keep(row) holds; returns rows dropped."""
        rows = self.read()
        kept = [r for r in rows if keep(r)]
        tmp = self.path.with_suffix(self.path.suffix + ".tmp")
        with open(tmp, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(self.columns)
            for r in kept:
                writer.writerow([r.get(c, "") for c in self.columns])
        tmp.replace(self.path)
        return len(rows) - len(kept)


# ---------------------------
# resume
# ---------------------------


def _phase_sequence(config: IpfConfig) -> List[Tuple[int, str]]:
    seq: List[Tuple[int, str]] = []
    for n in range(config.L + 1):
        seq.append((n, PHASE_B))
        if not config.skip_forward_phase:
            seq.append((n, PHASE_F))
    return seq


def _phase_done(run_dir: Path, n: int, phase: str) -> bool:
    if phase == PHASE_B:
        return checkpoint_path(run_dir, n, PHASE_B).exists()
    return checkpoint_path(run_dir, n + 1, PHASE_F).exists()


def completed_phases(run_dir: Path, config: IpfConfig) -> List[Tuple[int, str]]:
    """Longest prefix of the phase sequence whose checkpoints are on disk."""
    done = []
    for n, phase in _phase_sequence(config):
        if not _phase_done(run_dir, n, phase):
            break
        done.append((n, phase))
    return done


def _load_model(path: Path, config: IpfConfig) -> DriftModel:
    if not path.exists():
        raise MissingCheckpoint(f"missing checkpoint {path}", path=str(path))
    return load(path, config.width, config.time_features_k, config.T, config.activation)


def load_final_pair(run_dir: Path, config: IpfConfig) -> Tuple[DriftModel, DriftModel]:
    """(f^{L+1}, b^L), or (f^0, b^L) when the forward phase was skipped."""
    run_dir = Path(run_dir)
    f_index = 0 if config.skip_forward_phase else config.L + 1
    return (_load_model(checkpoint_path(run_dir, f_index, PHASE_F), config),
            _load_model(checkpoint_path(run_dir, config.L, PHASE_B), config))


# ---------------------------
# outer loop
# ---------------------------


def run_ipf_state(
    config: IpfConfig,
    data_sampler,
    prior_sampler,
    run_dir: Optional[Path] = None,
    data_reference: Optional[np.ndarray] = None,
    resume: bool = True,
) -> IpfState:
    """Full IPF loop with checkpoints, metrics and diagnostics; resumes from run_dir when possible."""
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
    seed = config.seed
    state = IpfState(
        n=0,
        model_f=config.new_model(phase_rng(seed, 0, _STREAM_INIT_F)),
        model_b=config.new_model(phase_rng(seed, 0, _STREAM_INIT_B)),
        run_dir=run_dir,
    )
    if config.diagnostics:
        state.bandwidth = run_bandwidth(config, data_sampler, prior_sampler)

    metrics = diag_stream = None
    done: List[Tuple[int, str]] = []
    if run_dir is not None:
        columns = METRICS_COLUMNS + (["wall_time"] if config.record_wall_time else [])
        metrics = CsvStream(run_dir / "metrics.csv", columns)
        diag_stream = CsvStream(run_dir / "diagnostics.csv", DIAGNOSTICS_COLUMNS)
        if resume:
            done = completed_phases(run_dir, config)
        if done:
            _resume(state, run_dir, config, done, metrics, diag_stream)
        else:
            metrics.truncate(lambda r: False)
            diag_stream.truncate(lambda r: False)
            save(state.model_f, checkpoint_path(run_dir, 0, PHASE_F))
        audit.log_event("run_start", path=state.events_path, seed=seed, workers=config.workers,
                        L=config.L, resumed_phases=len(done), bandwidth=state.bandwidth)

    done_set = set(done)
    finished_iters = {int(d["n"]) for d in state.diagnostics}
    for n in range(config.L + 1):
        state.n = n
        if (n, PHASE_B) not in done_set:
            if n > 0:
                fresh = config.new_model(phase_rng(seed, n, _STREAM_INIT_B))
                state.model_b = warm_start(fresh, state.model_b) if config.warm_start else fresh
            train_backward_phase(state, data_sampler, config, phase_rng(seed, n, _STREAM_B), metrics)
            if run_dir is not None:
                _checkpoint(state, state.model_b, n, PHASE_B)
        if not config.skip_forward_phase and (n, PHASE_F) not in done_set:
            if n > 0:
                fresh = config.new_model(phase_rng(seed, n, _STREAM_INIT_F))
                state.model_f = warm_start(fresh, state.model_f) if config.warm_start else fresh
            train_forward_phase(state, prior_sampler, config, phase_rng(seed, n, _STREAM_F), metrics)
            if run_dir is not None:
                _checkpoint(state, state.model_f, n + 1, PHASE_F)
        if config.diagnostics and n not in finished_iters:
            _record_diagnostics(state, data_sampler, prior_sampler, config, data_reference, metrics, diag_stream)
    audit.log_event("run_end", path=state.events_path, n=config.L,
                    final_f=config.L + 1 if not config.skip_forward_phase else 0, final_b=config.L)
    return state


def run_ipf(
    config: IpfConfig,
    data_sampler,
    prior_sampler,
    rng: Optional[np.random.Generator] = None,
    run_dir: Optional[Path] = None,
    data_reference: Optional[np.ndarray] = None,
    resume: bool = True,
) -> Tuple[DriftModel, DriftModel]:
    """
    Returns (f^{L+1}, b^L). When rng is given, the run seed is drawn from it;
    otherwise config.seed is used.
    """
    if rng is not None:
        config = _with_seed(config, int(rng.integers(0, 2**31 - 1)))
    state = run_ipf_state(config, data_sampler, prior_sampler, run_dir, data_reference, resume)
    return state.model_f, state.model_b


def _with_seed(config: IpfConfig, seed: int) -> IpfConfig:
    return replace(config, seed=seed)


def _checkpoint(state: IpfState, model: DriftModel, index: int, phase: str) -> None:
    path = save(model, checkpoint_path(state.run_dir, index, phase))
    audit.log_event("checkpoint_written", path=state.events_path, file=path.name, n=state.n, phase=phase,
                    param_count=model.param_count)


def _record_diagnostics(state, data_sampler, prior_sampler, config, data_reference, metrics, diag_stream) -> None:
    row = compute_diagnostics(state, data_sampler, prior_sampler, config, data_reference)
    state.diagnostics.append(row)
    metric_row = {"n": state.n, "phase": PHASE_DIAG, "inner_step": None, "loss": None, "grad_norm": None,
                  "mmd_prior": row["mmd_prior"], "mmd_data": row["mmd_data"]}
    state.history.append(metric_row)
    if metrics is not None:
        metrics(metric_row)
    if diag_stream is not None:
        diag_stream(row)


def _resume(state: IpfState, run_dir: Path, config: IpfConfig, done: List[Tuple[int, str]],
            metrics: CsvStream, diag_stream: CsvStream) -> None:
    """Reload the newest completed models and drop CSV rows of phases that did not finish."""
    last_n, last_phase = done[-1]
    state.model_b = _load_model(checkpoint_path(run_dir, last_n, PHASE_B), config)
    f_index = 0 if config.skip_forward_phase else (last_n + 1 if last_phase == PHASE_F else last_n)
    state.model_f = _load_model(checkpoint_path(run_dir, f_index, PHASE_F), config)

    done_set = {(str(n), p) for n, p in done}
    # an iteration's diagnostics count only once all of its phases finished
    iter_done = {n for n, p in done if p == (PHASE_B if config.skip_forward_phase else PHASE_F)}

    def keep_metric(row: Dict[str, str]) -> bool:
        if row["phase"] == PHASE_DIAG:
            return int(row["n"]) in iter_done
        return (row["n"], row["phase"]) in done_set

    dropped = metrics.truncate(keep_metric)
    diag_stream.truncate(lambda r: int(r["n"]) in iter_done)
    for row in diag_stream.read():
        state.diagnostics.append({k: (int(v) if k == "n" else float(v)) for k, v in row.items()})
    # diagnostics are written right after an iteration's last checkpoint, so only
    # the newest finished iteration can be missing them; the main loop redoes it
    missing = sorted(iter_done - {int(d["n"]) for d in state.diagnostics})
    audit.log_event("resume", path=state.events_path, completed=[f"{n}{p}" for n, p in done],
                    dropped_metric_rows=dropped, rediagnose=missing)


FRAME_FRACTIONS = (0.0, 0.25, 0.5, 0.75, 1.0)


def frame_times(config: IpfConfig, fractions: Sequence[float] = FRAME_FRACTIONS) -> List[float]:
    return [float(frac) * config.T for frac in fractions]


def bridge_frames(model_f, data_sampler, n: int, rng: np.random.Generator, config: IpfConfig,
                  times: Optional[Sequence[float]] = None) -> List[Tuple[float, np.ndarray]]:
    """
    Marginal samples of the learned bridge at each forward time in `times`
    (default 0, T/4, T/2, 3T/4, T), read off one forward simulation from the
    data side. A time between t_k and t_{k+1} takes one partial walk step of
    length t - t_k from the states at t_k.
    """
    times = frame_times(config) if times is None else [float(t) for t in times]
    outside = [t for t in times if not 0.0 <= t <= config.T]
    if outside:
        raise OutOfHorizon(f"frame times outside [0, {config.T}]", times=outside, T=config.T)
    traj = simulate_forward(model_f, data_sampler, n, rng, config.schedule, config.grid, workers=config.workers)
    grid_times = traj.forward_times()
    tol = 1e-9 * config.T
    frames = []
    for t in times:
        k = int(np.argmin(np.abs(grid_times - t)))
        if abs(grid_times[k] - t) <= tol:
            frames.append((t, traj.states[:, k].copy()))
            continue
        k = int(np.searchsorted(grid_times, t, side="right")) - 1
        x = traj.states[:, k]
        z_bar = rng.standard_normal(x.shape)
        frames.append((t, geodesic_step(model_f, config.schedule, x, float(grid_times[k]), t - float(grid_times[k]), z_bar)))
    return frames
