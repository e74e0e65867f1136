"""
Run configuration: a tree of dataclasses with a flat `key=value` text form.

    # comment
    schedule.T=1.0
    ipf.L=4
    data.synthetic=vmf:30,40,20,0.5;-20,-100,20,0.5

CLI flags use the same dotted keys (`--ipf.L 4`) and override file values. The
resolved config is written to {run_dir}/config.txt; reading it back yields an
equal RunConfig.
"""

import os
import typing
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .data import check_synthetic_spec
from .errors import ConfigError, SphereDsbError
from .ipf import (
    DEFAULT_BATCH,
    DEFAULT_DIAG_SAMPLES,
    DEFAULT_INNER_STEPS,
    DEFAULT_L,
    PLATEAU_PATIENCE,
    PLATEAU_TOL,
    PLATEAU_WINDOW,
    IpfConfig,
)
from .loss import parse_div_mode
from .net import ACTIVATIONS, DEFAULT_BETAS, DEFAULT_CLIP, DEFAULT_EPS, DEFAULT_LR, DEFAULT_TIME_FEATURES, DEFAULT_WIDTH, FULL_WIDTH
from .sde import DEFAULT_G2_FLOOR, DEFAULT_G2_PEAK, DEFAULT_STEPS, DEFAULT_T, NoiseSchedule, TimeGrid

OUTPUT_ROOT_ENV = "SPHERE_DSB_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"
CONFIG_FILENAME = "config.txt"
MANIFOLDS = ("sphere2",)


@dataclass
class ScheduleSection:
    T: float = DEFAULT_T
    g2_peak: float = DEFAULT_G2_PEAK
    g2_floor: float = DEFAULT_G2_FLOOR


@dataclass
class GridSection:
    N: int = DEFAULT_STEPS


@dataclass
class NetSection:
    width: int = DEFAULT_WIDTH
    time_features: int = DEFAULT_TIME_FEATURES
    activation: str = "silu"


@dataclass
class OptimizerSection:
    lr: float = DEFAULT_LR
    beta1: float = DEFAULT_BETAS[0]
    beta2: float = DEFAULT_BETAS[1]
    eps: float = DEFAULT_EPS
    clip: Optional[float] = DEFAULT_CLIP


@dataclass
class IpfSection:
    L: int = DEFAULT_L
    inner_steps: int = DEFAULT_INNER_STEPS
    warm_start: bool = True
    batch: int = DEFAULT_BATCH
    skip_forward_phase: bool = False
    early_stop: bool = True
    plateau_window: int = PLATEAU_WINDOW
    plateau_patience: int = PLATEAU_PATIENCE
    plateau_tol: float = PLATEAU_TOL
    loss_reduction: str = "mean"
    div_mode: str = "exact"
    diag_samples: int = DEFAULT_DIAG_SAMPLES
    diagnostics: bool = True
    metrics_every: int = 1
    record_wall_time: bool = False


@dataclass
class DataSection:
    dataset: Optional[str] = None
    dataset_b: Optional[str] = None
    synthetic: Optional[str] = None
    synthetic_b: Optional[str] = None
    split_seed: int = 0
    held_out_fraction: float = 0.2


@dataclass
class RunConfig:
    manifold: str = "sphere2"
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    grid: GridSection = field(default_factory=GridSection)
    net: NetSection = field(default_factory=NetSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    ipf: IpfSection = field(default_factory=IpfSection)
    data: DataSection = field(default_factory=DataSection)
    seed: int = 0
    workers: int = 1
    output_dir: Optional[str] = None


def default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV) or DEFAULT_OUTPUT_ROOT)


# ---------------------------
# flat key=value form
# ---------------------------


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def flatten(cfg, prefix: str = "") -> Dict[str, str]:
    out: Dict[str, str] = {}
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        key = f"{prefix}{f.name}"
        if is_dataclass(value):
            out.update(flatten(value, key + "."))
        else:
            out[key] = _format_value(value)
    return out


def to_text(cfg: RunConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in flatten(cfg).items())


def parse_text(text: str) -> Dict[str, str]:
    """key=value lines; blank lines and lines starting with `#` are ignored."""
    values: Dict[str, str] = {}
    problems: List[str] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            problems.append(f"line {lineno}: expected key=value, got {raw.strip()!r}")
            continue
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    if problems:
        raise ConfigError(problems)
    return values


def _coerce(raw: str, tp, path: str) -> Tuple[object, Optional[str]]:
    optional = False
    if typing.get_origin(tp) is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        optional = True
        tp = args[0]
    text = raw.strip()
    if optional and text.lower() in ("", "none", "null"):
        return None, None
    try:
        if tp is bool:
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True, None
            if low in ("false", "0", "no", "off"):
                return False, None
            return None, f"{path}: expected a boolean, got {raw!r}"
        if tp is int:
            return int(text), None
        if tp is float:
            return float(text), None
        return text, None
    except ValueError:
        return None, f"{path}: expected {tp.__name__}, got {raw!r}"


def apply_overrides(cfg: RunConfig, values: Dict[str, str]) -> RunConfig:
    """Set dotted keys on cfg in place; unknown keys and bad values are collected into one ConfigError."""
    problems: List[str] = []
    for key, raw in values.items():
        parts = key.split(".")
        target = cfg
        for part in parts[:-1]:
            target = getattr(target, part, None)
            if target is None or not is_dataclass(target):
                break
        ftypes = {f.name: f.type for f in fields(target)} if is_dataclass(target) else {}
        leaf = parts[-1]
        if leaf not in ftypes or is_dataclass(getattr(target, leaf, None)):
            problems.append(f"{key}: unknown setting")
            continue
        value, problem = _coerce(raw, ftypes[leaf], key)
        if problem:
            problems.append(problem)
            continue
        setattr(target, leaf, value)
    if problems:
        raise ConfigError(problems)
    return cfg


def validate(cfg: RunConfig) -> RunConfig:
    problems: List[str] = []

    def need(ok: bool, message: str) -> None:
        if not ok:
            problems.append(message)

    need(cfg.manifold in MANIFOLDS, f"manifold: only {MANIFOLDS} supported, got {cfg.manifold!r}")
    need(cfg.schedule.T > 0, "schedule.T: must be > 0")
    need(cfg.schedule.g2_floor > 0, "schedule.g2_floor: must be > 0")
    need(cfg.schedule.g2_peak >= cfg.schedule.g2_floor, "schedule.g2_peak: must be >= schedule.g2_floor")
    need(cfg.grid.N >= 1, "grid.N: must be >= 1")
    need(cfg.net.width >= 1, "net.width: must be >= 1")
    need(cfg.net.time_features >= 0, "net.time_features: must be >= 0")
    need(cfg.net.activation in ACTIVATIONS, f"net.activation: choose from {sorted(ACTIVATIONS)}")
    need(cfg.optimizer.lr > 0, "optimizer.lr: must be > 0")
    need(0 <= cfg.optimizer.beta1 < 1, "optimizer.beta1: must be in [0, 1)")
    need(0 <= cfg.optimizer.beta2 < 1, "optimizer.beta2: must be in [0, 1)")
    need(cfg.optimizer.eps > 0, "optimizer.eps: must be > 0")
    need(cfg.optimizer.clip is None or cfg.optimizer.clip > 0, "optimizer.clip: must be > 0 or none")
    need(cfg.ipf.L >= 0, "ipf.L: must be >= 0")
    need(cfg.ipf.inner_steps >= 0, "ipf.inner_steps: must be >= 0")
    need(cfg.ipf.batch >= 1, "ipf.batch: must be >= 1")
    need(cfg.ipf.plateau_window >= 1, "ipf.plateau_window: must be >= 1")
    need(cfg.ipf.plateau_patience >= 1, "ipf.plateau_patience: must be >= 1")
    need(cfg.ipf.loss_reduction in ("mean", "sum"), "ipf.loss_reduction: must be mean or sum")
    need(cfg.ipf.diag_samples >= 2, "ipf.diag_samples: must be >= 2")
    need(cfg.ipf.metrics_every >= 1, "ipf.metrics_every: must be >= 1")
    try:
        parse_div_mode(cfg.ipf.div_mode)
        need(not cfg.ipf.div_mode.startswith("finite_difference"),
             "ipf.div_mode: finite_difference has no parameter gradient; use exact or hutchinson[:m]")
    except ValueError:
        problems.append(f"ipf.div_mode: unknown mode {cfg.ipf.div_mode!r}")
    need(0.0 < cfg.data.held_out_fraction < 1.0, "data.held_out_fraction: must be in (0, 1)")
    need(not (cfg.data.dataset and cfg.data.synthetic), "data: set only one of data.dataset and data.synthetic")
    need(not (cfg.data.dataset_b and cfg.data.synthetic_b), "data: set only one of data.dataset_b and data.synthetic_b")
    for key in ("synthetic", "synthetic_b"):
        spec = getattr(cfg.data, key)
        if spec:
            try:
                check_synthetic_spec(spec)
            except SphereDsbError as exc:
                problems.append(f"data.{key}: {exc}")
    need(cfg.workers >= 1, "workers: must be >= 1")
    if problems:
        raise ConfigError(problems)
    return cfg


def full_scale(cfg: RunConfig) -> RunConfig:
    """Full-size preset: width 512, N 10, g2 0.05/0.001 on [0, 1], L 4."""
    cfg.net.width = FULL_WIDTH
    cfg.grid.N = 10
    cfg.schedule.T = 1.0
    cfg.schedule.g2_peak = 0.05
    cfg.schedule.g2_floor = 0.001
    cfg.ipf.L = 4
    return cfg


def load_config(path: Path, overrides: Optional[Dict[str, str]] = None) -> RunConfig:
    cfg = RunConfig()
    apply_overrides(cfg, parse_text(Path(path).read_text(encoding="utf-8")))
    if overrides:
        apply_overrides(cfg, overrides)
    return validate(cfg)


def write_config(cfg: RunConfig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(to_text(cfg), encoding="utf-8")
    return path


def to_ipf_config(cfg: RunConfig) -> IpfConfig:
    schedule = NoiseSchedule(cfg.schedule.T, cfg.schedule.g2_peak, cfg.schedule.g2_floor)
    return IpfConfig(
        schedule=schedule,
        grid=TimeGrid(cfg.schedule.T, cfg.grid.N),
        L=cfg.ipf.L,
        inner_steps=cfg.ipf.inner_steps,
        batch=cfg.ipf.batch,
        warm_start=cfg.ipf.warm_start,
        skip_forward_phase=cfg.ipf.skip_forward_phase,
        early_stop=cfg.ipf.early_stop,
        plateau_window=cfg.ipf.plateau_window,
        plateau_patience=cfg.ipf.plateau_patience,
        plateau_tol=cfg.ipf.plateau_tol,
        loss_reduction=cfg.ipf.loss_reduction,
        div_mode=cfg.ipf.div_mode,
        width=cfg.net.width,
        time_features_k=cfg.net.time_features,
        activation=cfg.net.activation,
        lr=cfg.optimizer.lr,
        beta1=cfg.optimizer.beta1,
        beta2=cfg.optimizer.beta2,
        eps=cfg.optimizer.eps,
        clip=cfg.optimizer.clip,
        diag_samples=cfg.ipf.diag_samples,
        diagnostics=cfg.ipf.diagnostics,
        metrics_every=cfg.ipf.metrics_every,
        record_wall_time=cfg.ipf.record_wall_time,
        seed=cfg.seed,
        workers=cfg.workers,
    )
