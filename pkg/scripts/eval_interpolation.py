#!/usr/bin/env python3
"""
Interpolation evaluation: bridge between two spherical-harmonic datasets.

What it measures:
  - Endpoint pinning: MMD^2 of the t=0 frame to dataset A and of the t=T frame
    to dataset B, each against 3x the permutation-null 99th percentile.
  - With --symmetric (A = B): every frame's MMD^2 to A against 2x that threshold.

When to use: after changing the IPF loop or the bridge frame extraction.
Outputs: workflows/eval_interpolation_results.csv, workflows/eval_interpolation_report.md.
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

from src.data import load_samples_csv, median_bandwidth, mmd, mmd_permutation_threshold, parse_synthetic_spec  # noqa: E402

OUT_CSV = REPO_ROOT / "workflows" / "eval_interpolation_results.csv"
OUT_MD = REPO_ROOT / "workflows" / "eval_interpolation_report.md"
RUNS_DIR = REPO_ROOT / "runs" / "eval_interpolation"
DATA_A = "harmonic:4,2"
DATA_B = "harmonic:6,2"
FRAME_COUNT = 1000


def run_interpolate(spec_a: str, spec_b: str, run_dir: Path, inner_steps: int, seed: int) -> Dict[str, Any]:
    cmd = [
        sys.executable, "-m", "src.run", "interpolate",
        "--synthetic", spec_a, "--synthetic-b", spec_b,
        "--ipf.L", "2", "--grid.N", "10", "--ipf.inner_steps", str(inner_steps),
        "--count", str(FRAME_COUNT), "--seed", str(seed), "--output-dir", str(run_dir),
    ]
    p = subprocess.run(cmd, cwd=REPO_ROOT, capture_output=True, text=True)
    if p.returncode != 0:
        raise RuntimeError(f"interpolate failed: {p.stderr.strip()}")
    return json.loads(p.stdout)


def frame_rows(label: str, frames: List[Dict[str, Any]], refs: Dict[float, np.ndarray], scale: float,
               rng: np.random.Generator) -> List[Dict[str, Any]]:
    rows = []
    for frame in frames:
        if frame["t"] not in refs:
            continue
        points = load_samples_csv(frame["file"])
        ref = refs[frame["t"]]
        bw = median_bandwidth(points, ref)
        value = mmd(points, ref, bw)
        threshold = scale * mmd_permutation_threshold(points, ref, bw, rng)
        rows.append({"run": label, "t": frame["t"], "mmd": value, "threshold": threshold,
                     "passed": value <= threshold, "bandwidth": bw})
    return rows


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[1])
    parser.add_argument("--quick", action="store_true", help="200 inner steps per phase")
    parser.add_argument("--symmetric", action="store_true", help="also run A -> A")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    inner = 200 if args.quick else 5000
    rng = np.random.default_rng([args.seed, 99])
    OUT_CSV.parent.mkdir(parents=True, exist_ok=True)

    ref_a = parse_synthetic_spec(DATA_A)(FRAME_COUNT, rng)
    ref_b = parse_synthetic_spec(DATA_B)(FRAME_COUNT, rng)
    summary = run_interpolate(DATA_A, DATA_B, RUNS_DIR / "a_to_b", inner, args.seed)
    frames = summary["frames"]
    T = frames[-1]["t"]
    rows = frame_rows("a_to_b", frames, {0.0: ref_a, T: ref_b}, 3.0, rng)
    n_frames = len(frames)

    if args.symmetric:
        sym = run_interpolate(DATA_A, DATA_A, RUNS_DIR / "a_to_a", inner, args.seed)
        rows += frame_rows("a_to_a", sym["frames"], {f["t"]: ref_a for f in sym["frames"]}, 2.0 * 3.0, rng)

    with open(OUT_CSV, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["run", "t", "mmd", "threshold", "passed", "bandwidth"])
        writer.writeheader()
        writer.writerows(rows)

    report_lines = [
        "# Interpolation Eval Report",
        "",
        f"A: `{DATA_A}` | B: `{DATA_B}` | L: 2 | inner_steps: {inner} | frames: {n_frames}"
        + (" | QUICK" if args.quick else ""),
        "",
        "| Run | t | MMD^2 | Threshold | Pass |",
        "|-----|---|-------|-----------|------|",
    ]
    for r in rows:
        report_lines.append(f"| {r['run']} | {r['t']:.3f} | {r['mmd']:.4g} | {r['threshold']:.4g} | {'yes' if r['passed'] else 'no'} |")
    report_lines.extend(["", "## Output", "", f"- `{OUT_CSV}`", f"- `{summary['run_dir']}`", ""])
    with open(OUT_MD, "w", encoding="utf-8") as f:
        f.write("\n".join(report_lines))

    print(f"Wrote {OUT_CSV}")
    print(f"Wrote {OUT_MD}")
    print(f"  frames written: {n_frames} (want 5)")
    for r in rows:
        print(f"  {r['run']} t={r['t']:.3f}: mmd={r['mmd']:.4g} threshold={r['threshold']:.4g} {'PASS' if r['passed'] else 'FAIL'}")


if __name__ == "__main__":
    main()
