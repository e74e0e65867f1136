#!/usr/bin/env python3
"""
RSGM vs RDSB evaluation on a two-component vMF mixture.

What it measures:
  - RSGM (L=0, backward phase only): MMD^2 of 5000 generated points to the
    held-out split vs the same statistic for a uniform sampler (want >= 5x smaller).
  - RDSB (L=4): MMD(forward terminal, prior) at the last iteration vs the first
    (want last <= first + 2 SE), and outlier fraction at r=0.2 vs RSGM (want <=).
  - Likelihood normalization of the RDSB pair: 4*pi * mean exp(loglik) over
    uniform points (want 1 +- 0.05).

When to use: after changing the loss, the networks or the IPF loop.
Runs `python -m src.run train/eval` as subprocesses (like a user would).
Outputs: workflows/eval_rdsb_results.csv, workflows/eval_rdsb_report.md.
Use --quick for a few-minute smoke version (thresholds are then not meaningful).
"""

import argparse
import csv
import json
import subprocess
import sys
from pathlib import Path
from typing import Any, Dict, List

import numpy as np

REPO_ROOT = Path(__file__).resolve().parent.parent
if str(REPO_ROOT) not in sys.path:
    sys.path.insert(0, str(REPO_ROOT))

from src.config import to_ipf_config  # noqa: E402
from src.data import mmd  # noqa: E402
from src.ipf import load_final_pair  # noqa: E402
from src.manifold import sample_uniform  # noqa: E402
from src.ode import log_likelihood  # noqa: E402
from src.run import build_data, load_run_config  # noqa: E402

OUT_CSV = REPO_ROOT / "workflows" / "eval_rdsb_results.csv"
OUT_MD = REPO_ROOT / "workflows" / "eval_rdsb_report.md"
RUNS_DIR = REPO_ROOT / "runs" / "eval_rdsb"
MIXTURE = "vmf:35,-40,20,0.5;-25,70,20,0.5"
SAMPLE_COUNT = 5000
NORMALIZATION_POINTS = 10_000


def run_cli(*args: str) -> Dict[str, Any]:
    """Run one src.run command; return its parsed JSON."""
    cmd = [sys.executable, "-m", "src.run", *args]
    p = subprocess.run(cmd, cwd=REPO_ROOT, capture_output=True, text=True)
    if p.returncode != 0:
        raise RuntimeError(f"{' '.join(args[:2])} failed: {p.stderr.strip()}")
    return json.loads(p.stdout)


def train(label: str, L: int, inner_steps: int, seed: int, extra: List[str]) -> Path:
    run_dir = RUNS_DIR / label
    run_cli(
        "train", "--synthetic", MIXTURE, "--ipf.L", str(L), "--grid.N", "10", "--net.width", "128",
        "--ipf.inner_steps", str(inner_steps), "--seed", str(seed), "--output-dir", str(run_dir), *extra,
    )
    return run_dir


def read_diagnostics(run_dir: Path) -> List[Dict[str, float]]:
    with open(run_dir / "diagnostics.csv", "r", encoding="utf-8", newline="") as f:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(f)]


def uniform_baseline(run_dir: Path, bandwidth: float, count: int, seed: int) -> float:
    held_out = build_data(load_run_config(run_dir)).held_out
    return mmd(sample_uniform(np.random.default_rng(seed), count), held_out, bandwidth)


def normalization(run_dir: Path, points: int, steps: int, seed: int) -> float:
    cfg = load_run_config(run_dir)
    model_f, model_b = load_final_pair(run_dir, to_ipf_config(cfg))
    x = sample_uniform(np.random.default_rng(seed), points)
    ll = log_likelihood(model_f, model_b, x, steps, workers=cfg.workers)
    return float(4.0 * np.pi * np.mean(np.exp(ll)))


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[1])
    parser.add_argument("--quick", action="store_true", help="200 inner steps, 1000 samples, 1000 likelihood points")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    inner = 200 if args.quick else 5000
    count = 1000 if args.quick else SAMPLE_COUNT
    norm_points = 1000 if args.quick else NORMALIZATION_POINTS
    OUT_CSV.parent.mkdir(parents=True, exist_ok=True)

    rsgm_dir = train("rsgm", 0, inner, args.seed, ["--skip-forward-phase"])
    rdsb_dir = train("rdsb", 4, inner, args.seed, [])
    rsgm = run_cli("eval", str(rsgm_dir), "--count", str(count), "--seed", str(args.seed))
    rdsb = run_cli("eval", str(rdsb_dir), "--count", str(count), "--seed", str(args.seed))
    baseline = uniform_baseline(rsgm_dir, rsgm["bandwidth"], count, args.seed + 1)
    diag = read_diagnostics(rdsb_dir)
    first, last = diag[0], diag[-1]
    norm = normalization(rdsb_dir, norm_points, 200, args.seed + 2)

    rows = [
        {"check": "rsgm_mmd_vs_uniform", "value": rsgm["mmd_data"], "threshold": baseline / 5.0,
         "passed": rsgm["mmd_data"] * 5.0 <= baseline, "note": f"uniform baseline {baseline:.4g}"},
        {"check": "rdsb_prior_mmd_last_vs_first", "value": last["mmd_prior"],
         "threshold": first["mmd_prior"] + 2.0 * first["mmd_prior_se"],
         "passed": last["mmd_prior"] <= first["mmd_prior"] + 2.0 * first["mmd_prior_se"],
         "note": f"iterations {int(first['n'])} -> {int(last['n'])}"},
        {"check": "rdsb_outliers_vs_rsgm", "value": rdsb["outlier_fraction"], "threshold": rsgm["outlier_fraction"],
         "passed": rdsb["outlier_fraction"] <= rsgm["outlier_fraction"], "note": "r=0.2 rad"},
        {"check": "rdsb_likelihood_normalization", "value": norm, "threshold": 0.05,
         "passed": abs(norm - 1.0) <= 0.05, "note": f"{norm_points} uniform points, 200 ODE steps"},
    ]
    with open(OUT_CSV, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["check", "value", "threshold", "passed", "note"])
        writer.writeheader()
        writer.writerows(rows)

    report_lines = [
        "# RSGM vs RDSB Eval Report",
        "",
        f"Data: `{MIXTURE}` | inner_steps: {inner} | samples: {count} | seed: {args.seed}" + (" | QUICK" if args.quick else ""),
        "",
        "| Check | Value | Threshold | Pass |",
        "|-------|-------|-----------|------|",
    ]
    for r in rows:
        report_lines.append(f"| {r['check']} | {r['value']:.4g} | {r['threshold']:.4g} | {'yes' if r['passed'] else 'no'} |")
    report_lines.extend([
        "",
        "## Outlier sensitivity",
        "",
        "| Radius | RSGM | RDSB |",
        "|--------|------|------|",
    ])
    for key in rsgm["outlier_sensitivity"]:
        report_lines.append(f"| {key} | {rsgm['outlier_sensitivity'][key]:.4f} | {rdsb['outlier_sensitivity'][key]:.4f} |")
    report_lines.extend(["", "## Output", "", f"- `{OUT_CSV}`", f"- `{rsgm_dir}`", f"- `{rdsb_dir}`", ""])
    with open(OUT_MD, "w", encoding="utf-8") as f:
        f.write("\n".join(report_lines))

    print(f"Wrote {OUT_CSV}")
    print(f"Wrote {OUT_MD}")
    for r in rows:
        print(f"  {r['check']}: {r['value']:.4g} (threshold {r['threshold']:.4g}) {'PASS' if r['passed'] else 'FAIL'}")


if __name__ == "__main__":
    main()
