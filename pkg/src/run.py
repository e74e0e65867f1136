#!/usr/bin/env python3
"""
Score-based generative modeling and Schrodinger bridges on the sphere.

Train (5 IPF iterations, 10 diffusion steps) on an event catalog:
  python -m src.run train --dataset fixtures/quakes.csv --ipf.L 4 --grid.N 10

RSGM baseline (first backward phase only):
  python -m src.run train --dataset fixtures/quakes.csv --ipf.L 0 --skip-forward-phase

Sample / likelihood / evaluate a finished run:
  python -m src.run sample runs/quakes-s0 --count 5000 --mode sde --out samples.csv
  python -m src.run likelihood runs/quakes-s0 --dataset fixtures/quakes.csv --out loglik.csv
  python -m src.run eval runs/quakes-s0

Bridge between two synthetic datasets:
  python -m src.run interpolate --synthetic harmonic:4,2 --synthetic-b harmonic:6,2 --ipf.L 2

Raw geodesic random walk (debugging):
  python -m src.run simulate --synthetic uniform --count 100 --dump-trajectories walk.csv

Every command prints one JSON document to stdout. Failures print a single line
`error=<code> {json}` to stderr and exit 2 (config errors) or 1.
"""

import argparse
import json
import platform
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from . import __version__, audit
from .config import (
    CONFIG_FILENAME,
    RunConfig,
    apply_overrides,
    default_output_root,
    flatten,
    load_config,
    full_scale,
    parse_text,
    to_ipf_config,
    validate,
    write_config,
)
from .data import (
    UniformSampler,
    export_samples,
    load_latlon_csv,
    parse_synthetic_spec,
    xyz_to_latlon,
)
from .errors import ConfigError, MissingCheckpoint, SphereDsbError, UnsupportedPrior, error_code
from .eval import evaluate_samples, summarize, write_report
from .ipf import IpfConfig, bridge_frames, load_final_pair, run_ipf_state
from .net import ZeroDrift
from .ode import DEFAULT_ODE_STEPS, UNIFORM_LOG_DENSITY, log_likelihood, sample_ode
from .sde import ConstantSchedule, TimeGrid, dump_trajectories, geodesic_random_walk, simulate_backward, simulate_forward

DEFAULT_SAMPLE_COUNT = 5000
# synthetic datasets have no file; this many draws stand in for the held-out split
SYNTHETIC_HELD_OUT = 2000


@dataclass
class DataBundle:
    name: str
    sampler: Any
    held_out: np.ndarray


def _exit_with_error(code: str, message: str, exit_code: int = 1, **details: Any) -> None:
    """Single machine-parsable line on stderr, then exit."""
    payload = {"error": code, "message": message, **details}
    print(f"error={code} {json.dumps(payload, default=str)}", file=sys.stderr)
    sys.exit(exit_code)


def _print(payload: Dict[str, Any]) -> None:
    print(json.dumps(payload, indent=2, default=float))


# ---------------------------
# configuration
# ---------------------------


def resolve_config(args: argparse.Namespace, base: Optional[RunConfig] = None) -> RunConfig:
    """Defaults (or `base`), then --config file, then --full-scale, then dotted flags."""
    cfg = base if base is not None else RunConfig()
    if getattr(args, "config", None):
        apply_overrides(cfg, parse_text(Path(args.config).read_text(encoding="utf-8")))
    if getattr(args, "full_scale", False):
        full_scale(cfg)
    overrides = {k: v for k, v in vars(args).items() if "." in k and v is not None}
    for flag, key in (("dataset", "data.dataset"), ("dataset_b", "data.dataset_b"),
                      ("synthetic", "data.synthetic"), ("synthetic_b", "data.synthetic_b")):
        if getattr(args, flag, None) is not None:
            overrides[key] = getattr(args, flag)
    if getattr(args, "skip_forward_phase", False):
        overrides["ipf.skip_forward_phase"] = "true"
    for key in ("seed", "workers", "output_dir"):
        if getattr(args, key, None) is not None:
            overrides[key] = str(getattr(args, key))
    apply_overrides(cfg, overrides)
    return validate(cfg)


def load_run_config(run_dir: Path) -> RunConfig:
    path = Path(run_dir) / CONFIG_FILENAME
    if not path.exists():
        raise MissingCheckpoint(f"{path} not found; not a run directory", run_dir=str(run_dir))
    return load_config(path)


def _frame_times(text: Optional[str], T: float) -> Optional[List[float]]:
    """Parse --times; None keeps the default frames."""
    if text is None:
        return None
    try:
        times = [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError([f"--times: expected comma-separated numbers, got {text!r}"]) from None
    problems = [f"--times: {t} is outside [0, {T}]" for t in times if not 0.0 <= t <= T]
    if not times:
        problems.append("--times: no times given")
    if problems:
        raise ConfigError(problems)
    return times


def _run_dir(cfg: RunConfig, label: str) -> Path:
    if cfg.output_dir:
        return Path(cfg.output_dir)
    return default_output_root() / f"{label}-s{cfg.seed}"


def _write_manifest(run_dir: Path, cfg: RunConfig, command: str) -> None:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "seed": cfg.seed,
        "workers": cfg.workers,
        "code_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "created": audit.utc_timestamp(),
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


# ---------------------------
# data
# ---------------------------


def build_data(cfg: RunConfig, side: str = "a") -> Optional[DataBundle]:
    """Training sampler and held-out points for dataset A (side 'a') or B (side 'b')."""
    path = cfg.data.dataset if side == "a" else cfg.data.dataset_b
    spec = cfg.data.synthetic if side == "a" else cfg.data.synthetic_b
    if path:
        dataset = load_latlon_csv(path)
        train, held = dataset.split(cfg.data.held_out_fraction, cfg.data.split_seed)
        return DataBundle(dataset.name, train.sampler(), held.points)
    if spec:
        sampler = parse_synthetic_spec(spec)
        tag = 1 if side == "a" else 2
        held = sampler(SYNTHETIC_HELD_OUT, np.random.default_rng([cfg.data.split_seed, tag]))
        return DataBundle(spec.split(":", 1)[0], sampler, held)
    return None


def _require_data(cfg: RunConfig, side: str = "a") -> DataBundle:
    bundle = build_data(cfg, side)
    if bundle is None:
        key = "data.dataset" if side == "a" else "data.dataset_b"
        raise ConfigError([f"{key}: set a CSV path or the matching synthetic spec"])
    return bundle


def _prior(cfg: RunConfig):
    bundle = build_data(cfg, "b")
    return (bundle.sampler, "empirical") if bundle is not None else (UniformSampler(), "uniform")


def _points_from_args(args: argparse.Namespace, cfg: RunConfig) -> np.ndarray:
    if getattr(args, "dataset", None):
        return load_latlon_csv(args.dataset).points
    if getattr(args, "synthetic", None):
        rng = np.random.default_rng(args.seed if args.seed is not None else cfg.seed)
        return parse_synthetic_spec(args.synthetic)(args.count, rng)
    return _require_data(cfg).held_out


# ---------------------------
# commands
# ---------------------------


def cmd_train(args: argparse.Namespace, command: str = "train") -> Dict[str, Any]:
    cfg = resolve_config(args)
    data = _require_data(cfg)
    prior_sampler, prior_kind = _prior(cfg)
    run_dir = _run_dir(cfg, data.name)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_config(cfg, run_dir / CONFIG_FILENAME)
    _write_manifest(run_dir, cfg, command)
    audit.set_event_log(run_dir / "events.jsonl")
    ipf_cfg = to_ipf_config(cfg)
    state = run_ipf_state(ipf_cfg, data.sampler, prior_sampler, run_dir,
                          data_reference=data.held_out, resume=not args.no_resume)
    return {
        "run_dir": str(run_dir),
        "dataset": data.name,
        "prior": prior_kind,
        "checkpoints": sorted(p.name for p in run_dir.glob("ipf_*.ckpt")),
        "final_pair": {"f": ipf_cfg.L + 1 if not ipf_cfg.skip_forward_phase else 0, "b": ipf_cfg.L},
        "bandwidth": state.bandwidth,
        "diagnostics": state.diagnostics,
    }


def _generate(cfg: RunConfig, ipf_cfg: IpfConfig, model_f, model_b, count: int, mode: str,
              rng: np.random.Generator, steps: int, error_estimate: bool = False):
    """Generated points, or (points, ODE endpoint error) with error_estimate (ode mode only)."""
    prior_sampler, _ = _prior(cfg)
    if mode == "ode":
        return sample_ode(model_f, model_b, prior_sampler, count, rng, steps, workers=cfg.workers,
                          error_estimate=error_estimate)
    if count == 0:
        return np.zeros((0, 3))
    traj = simulate_backward(model_b, prior_sampler, count, rng, ipf_cfg.schedule, ipf_cfg.grid, workers=cfg.workers)
    return traj.terminal()


def cmd_sample(args: argparse.Namespace) -> Dict[str, Any]:
    if args.error_estimate and args.mode != "ode":
        raise ConfigError(["--error-estimate: needs --mode ode"])
    run_dir = Path(args.run_dir)
    cfg = load_run_config(run_dir)
    ipf_cfg = to_ipf_config(cfg)
    model_f, model_b = load_final_pair(run_dir, ipf_cfg)
    rng = np.random.default_rng(args.seed)
    points = _generate(cfg, ipf_cfg, model_f, model_b, args.count, args.mode, rng, args.steps, args.error_estimate)
    error = None
    if args.error_estimate:
        points, error = points
    out = export_samples(points, args.out or run_dir / f"samples_{args.mode}.{args.format}", args.format)
    payload = {"run_dir": str(run_dir), "mode": args.mode, "count": int(points.shape[0]), "out": str(out)}
    if error is not None:
        payload["error_estimate"] = {"endpoint_rad": error, "steps": args.steps}
    return payload


def cmd_interpolate(args: argparse.Namespace) -> Dict[str, Any]:
    cfg = resolve_config(args)
    _require_data(cfg, "b")
    times = _frame_times(args.times, cfg.schedule.T)
    summary = cmd_train(args, command="interpolate")
    run_dir = Path(summary["run_dir"])
    ipf_cfg = to_ipf_config(cfg)
    model_f, _ = load_final_pair(run_dir, ipf_cfg)
    data = _require_data(cfg)
    rng = np.random.default_rng([cfg.seed, 7])
    frames = []
    for t, points in bridge_frames(model_f, data.sampler, args.count, rng, ipf_cfg, times):
        path = export_samples(points, run_dir / f"frame_t{t:.4f}.{args.format}", args.format)
        frames.append({"t": t, "file": str(path), "count": int(points.shape[0])})
    summary["frames"] = frames
    return summary


def cmd_likelihood(args: argparse.Namespace) -> Dict[str, Any]:
    run_dir = Path(args.run_dir)
    cfg = load_run_config(run_dir)
    ipf_cfg = to_ipf_config(cfg)
    if cfg.data.dataset_b or cfg.data.synthetic_b:
        raise UnsupportedPrior("likelihoods need a prior with a known density; this run bridges two datasets",
                               run_dir=str(run_dir))
    model_f, model_b = load_final_pair(run_dir, ipf_cfg)
    points = _points_from_args(args, cfg)
    error = None
    if not len(points):
        values = np.zeros(0)
    elif args.error_estimate:
        values, error = log_likelihood(model_f, model_b, points, args.steps, workers=cfg.workers, error_estimate=True)
    else:
        values = log_likelihood(model_f, model_b, points, args.steps, workers=cfg.workers)
    values = np.atleast_1d(values)
    lat, lon = xyz_to_latlon(points)
    out = Path(args.out or run_dir / "likelihood.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        f.write("lat,lon,loglik_surface,loglik_uniform_base\n")
        for la, lo, v in zip(lat, lon, values):
            f.write(f"{la!r},{lo!r},{float(v)!r},{float(v - UNIFORM_LOG_DENSITY)!r}\n")
    summary = summarize(values)
    payload = {
        "run_dir": str(run_dir),
        "out": str(out),
        "rows": int(values.size),
        "loglik_surface": summary,
        "loglik_uniform_base": {**summary, "mean": summary["mean"] - UNIFORM_LOG_DENSITY},
        "uniform_baseline": UNIFORM_LOG_DENSITY,
    }
    if args.error_estimate:
        payload["error_estimate"] = {**(error or {"endpoint_rad": 0.0, "loglik_nats": 0.0}), "steps": args.steps}
    diag_path = run_dir / "diagnostics.csv"
    if diag_path.exists():
        lines = diag_path.read_text(encoding="utf-8").strip().splitlines()
        if len(lines) > 1:
            header, last = lines[0].split(","), lines[-1].split(",")
            row = dict(zip(header, last))
            # the ODE likelihood assumes p_T = p_prior; report how far the noising got
            payload["mmd_forward_terminal_to_prior"] = float(row["mmd_prior"])
            payload["mmd_forward_terminal_to_prior_se"] = float(row["mmd_prior_se"])
    return payload


def cmd_eval(args: argparse.Namespace) -> Dict[str, Any]:
    if args.count < 1:
        raise ConfigError(["--count: must be >= 1"])
    run_dir = Path(args.run_dir)
    cfg = load_run_config(run_dir)
    ipf_cfg = to_ipf_config(cfg)
    model_f, model_b = load_final_pair(run_dir, ipf_cfg)
    held_out = _points_from_args(args, cfg) if (args.dataset or args.synthetic) else _require_data(cfg).held_out
    rng = np.random.default_rng(args.seed)
    generated = _generate(cfg, ipf_cfg, model_f, model_b, args.count, args.mode, rng, args.steps)
    data = _require_data(cfg)
    prior_sampler, _ = _prior(cfg)
    forward = simulate_forward(model_f, data.sampler, args.count, rng, ipf_cfg.schedule, ipf_cfg.grid,
                               workers=cfg.workers).terminal()
    other = None
    if args.compare_modes:
        other_mode = "sde" if args.mode == "ode" else "ode"
        other = _generate(cfg, ipf_cfg, model_f, model_b, args.count, other_mode, rng, args.steps)
    report = evaluate_samples(generated, held_out, rng, forward, prior_sampler(args.count, rng),
                              radius=args.radius, other_mode=other)
    report.update({"run_dir": str(run_dir), "mode": args.mode})
    out = write_report(report, args.out or run_dir / "eval_report.json")
    report["out"] = str(out)
    return report


def cmd_simulate(args: argparse.Namespace) -> Dict[str, Any]:
    # with --run-dir the drifts must be read with the run's own config; flags still apply on top
    cfg = resolve_config(args, load_run_config(Path(args.run_dir)) if args.run_dir else None)
    ipf_cfg = to_ipf_config(cfg)
    rng = np.random.default_rng(cfg.seed)
    schedule = ConstantSchedule(cfg.schedule.T, args.constant_g2) if args.constant_g2 is not None else ipf_cfg.schedule
    grid = TimeGrid(cfg.schedule.T, cfg.grid.N)
    drift = ZeroDrift(cfg.schedule.T)
    if args.run_dir:
        model_f, model_b = load_final_pair(Path(args.run_dir), ipf_cfg)
        drift = model_b if args.direction == "backward" else model_f
    if args.direction == "forward":
        start = _require_data(cfg).sampler(args.count, rng)
    else:
        start = _prior(cfg)[0](args.count, rng)
    traj = geodesic_random_walk(drift, schedule, grid, start, rng, reverse_time=args.direction == "backward")
    payload: Dict[str, Any] = {"direction": traj.direction, "count": traj.batch_size, "steps": grid.N,
                               "mean_terminal": np.mean(traj.terminal(), axis=0).tolist() if traj.batch_size else None}
    if args.dump_trajectories:
        payload["trajectories"] = str(dump_trajectories(traj, Path(args.dump_trajectories)))
    if args.out:
        payload["out"] = str(export_samples(traj.terminal(), args.out, args.format))
    return payload


# ---------------------------
# parser
# ---------------------------


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file (flags override it)")
    parser.add_argument("--full-scale", dest="full_scale", action="store_true",
                        help="width 512, N 10, g2 peak 0.05 / floor 0.001, L 4")
    parser.add_argument("--dataset", help="lat/lon CSV for dataset A (data.dataset)")
    parser.add_argument("--dataset-b", dest="dataset_b", help="lat/lon CSV used as the prior (data.dataset_b)")
    parser.add_argument("--synthetic", help="synthetic spec for dataset A, e.g. vmf:30,40,20,1")
    parser.add_argument("--synthetic-b", dest="synthetic_b", help="synthetic spec used as the prior")
    parser.add_argument("--skip-forward-phase", dest="skip_forward_phase", action="store_true",
                        help="train backward phases only (with --ipf.L 0: the RSGM baseline)")
    parser.add_argument("--no-resume", dest="no_resume", action="store_true",
                        help="ignore checkpoints already in the run directory")
    for key in flatten(RunConfig()):
        if "." in key:
            parser.add_argument(f"--{key}", dest=key, default=None, metavar="VALUE")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument("--output-dir", dest="output_dir", default=None,
                        help="run directory (default: $SPHERE_DSB_OUTPUT_ROOT/<dataset>-s<seed>)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="python -m src.run", description="Schrodinger bridges and score-based models on S^2")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run IPF and write checkpoints, metrics and diagnostics")
    _add_config_flags(p)

    p = sub.add_parser("interpolate", help="bridge dataset A to dataset B and export marginal frames (default 0, T/4, T/2, 3T/4, T)")
    _add_config_flags(p)
    p.add_argument("--count", type=int, default=DEFAULT_SAMPLE_COUNT, help="points per frame")
    p.add_argument("--times", help="comma-separated forward times in [0, T] (default 0, T/4, T/2, 3T/4, T)")
    p.add_argument("--format", choices=["csv", "geojson"], default="csv")

    p = sub.add_parser("sample", help="generate points from a trained run")
    p.add_argument("run_dir")
    p.add_argument("--count", type=int, default=DEFAULT_SAMPLE_COUNT)
    p.add_argument("--mode", choices=["sde", "ode"], default="sde")
    p.add_argument("--steps", type=int, default=DEFAULT_ODE_STEPS, help="ODE steps (mode ode)")
    p.add_argument("--error-estimate", dest="error_estimate", action="store_true",
                   help="rerun the ODE at 2*steps and report the endpoint error")
    p.add_argument("--out")
    p.add_argument("--format", choices=["csv", "geojson"], default="csv")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("likelihood", help="per-point log-likelihood via the probability-flow ODE")
    p.add_argument("run_dir")
    p.add_argument("--dataset", help="lat/lon CSV (default: the run's held-out split)")
    p.add_argument("--synthetic", help="synthetic spec to draw --count points from")
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--steps", type=int, default=DEFAULT_ODE_STEPS)
    p.add_argument("--error-estimate", dest="error_estimate", action="store_true",
                   help="rerun the ODE at 2*steps and report endpoint and log-likelihood errors")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("eval", help="MMD and outlier report for a trained run")
    p.add_argument("run_dir")
    p.add_argument("--dataset", help="reference CSV (default: the run's held-out split)")
    p.add_argument("--synthetic")
    p.add_argument("--count", type=int, default=DEFAULT_SAMPLE_COUNT)
    p.add_argument("--mode", choices=["sde", "ode"], default="sde")
    p.add_argument("--steps", type=int, default=DEFAULT_ODE_STEPS)
    p.add_argument("--radius", type=float, default=0.2, help="outlier radius in radians")
    p.add_argument("--compare-modes", dest="compare_modes", action="store_true",
                   help="also draw with the other generator and report SDE vs ODE binned TV")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("simulate", help="raw geodesic random walk (zero drift unless --run-dir)")
    _add_config_flags(p)
    p.add_argument("--run-dir", dest="run_dir", help="use this run's final drifts")
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--direction", choices=["forward", "backward"], default="forward")
    p.add_argument("--constant-g2", dest="constant_g2", type=float, default=None, help="use g^2(t) = VALUE")
    p.add_argument("--dump-trajectories", dest="dump_trajectories", help="CSV of every step of every path")
    p.add_argument("--out")
    p.add_argument("--format", choices=["csv", "geojson"], default="csv")
    return parser


COMMANDS = {
    "train": cmd_train,
    "interpolate": cmd_interpolate,
    "sample": cmd_sample,
    "likelihood": cmd_likelihood,
    "eval": cmd_eval,
    "simulate": cmd_simulate,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    previous_log = audit.active_event_log()
    try:
        payload = COMMANDS[args.command](args)
    except ConfigError as exc:
        _exit_with_error(exc.code, str(exc), 2, problems=exc.details.get("problems", []))
    except SphereDsbError as exc:
        _exit_with_error(exc.code, str(exc), 1, **exc.details)
    except (OSError, ValueError) as exc:
        _exit_with_error(error_code(exc, "io_error" if isinstance(exc, OSError) else "invalid_argument"), str(exc), 1)
    finally:
        audit.set_event_log(previous_log)
    _print(payload)
    return 0


if __name__ == "__main__":
    main()
