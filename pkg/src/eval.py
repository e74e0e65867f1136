"""
Sample-quality evaluation for trained runs (used by `python -m src.run eval`).

What it measures:
  - MMD^2 (geodesic Gaussian kernel) of generated samples to held-out data.
  - MMD^2 of forward-terminal samples to the prior, i.e. how well the noising
    process reached p_prior.
  - Outlier fraction: share of generated points farther than r (radians) from
    every held-out point, at r in OUTLIER_RADII.
  - Binned total-variation distance between two samples (SDE vs ODE checks).
"""

import json
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np
from sklearn.neighbors import NearestNeighbors

from .data import median_bandwidth, mmd, mmd_bootstrap_se, xyz_to_latlon

OUTLIER_RADIUS = 0.2
OUTLIER_RADII = (0.1, 0.2, 0.3)
TV_BINS = (18, 36)


def _latlon_radians(points: np.ndarray) -> np.ndarray:
    lat, lon = xyz_to_latlon(np.reshape(points, (-1, 3)))
    return np.radians(np.stack([lat, lon], axis=-1))


def nearest_distance(generated: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Great-circle distance (radians) from each generated point to its nearest reference point."""
    if np.size(generated) == 0:
        return np.zeros(0)
    index = NearestNeighbors(n_neighbors=1, metric="haversine").fit(_latlon_radians(reference))
    dist, _ = index.kneighbors(_latlon_radians(generated))
    return dist[:, 0]


def outlier_fraction(generated: np.ndarray, reference: np.ndarray, radius: float = OUTLIER_RADIUS) -> float:
    d = nearest_distance(generated, reference)
    return float(np.mean(d > radius)) if d.size else 0.0


def outlier_sensitivity(generated: np.ndarray, reference: np.ndarray,
                        radii: Sequence[float] = OUTLIER_RADII) -> Dict[str, float]:
    d = nearest_distance(generated, reference)
    return {f"r={r:g}": (float(np.mean(d > r)) if d.size else 0.0) for r in radii}


def binned_tv(sample_a: np.ndarray, sample_b: np.ndarray, bins=TV_BINS) -> float:
    """Total variation between lat/lon histograms with equal-area latitude bands (bins over sin(lat))."""
    edges = (np.linspace(-1.0, 1.0, bins[0] + 1), np.linspace(-180.0, 180.0, bins[1] + 1))

    def hist(points):
        lat, lon = xyz_to_latlon(np.reshape(points, (-1, 3)))
        h, _, _ = np.histogram2d(np.sin(np.radians(lat)), lon, bins=edges)
        return h / max(h.sum(), 1.0)

    return 0.5 * float(np.abs(hist(sample_a) - hist(sample_b)).sum())


def evaluate_samples(
    generated: np.ndarray,
    held_out: np.ndarray,
    rng: np.random.Generator,
    forward_terminal: Optional[np.ndarray] = None,
    prior_sample: Optional[np.ndarray] = None,
    bandwidth: Optional[float] = None,
    radius: float = OUTLIER_RADIUS,
    bootstrap: int = 20,
    other_mode: Optional[np.ndarray] = None,
) -> Dict:
    """
    Report for `generated`. other_mode, when given, holds samples drawn with
    the other generator (SDE vs ODE) and adds their binned TV and MMD^2.
    """
    if bandwidth is None:
        bandwidth = median_bandwidth(held_out, generated)
    report: Dict = {
        "bandwidth": bandwidth,
        "n_generated": int(np.shape(generated)[0]),
        "n_held_out": int(np.shape(held_out)[0]),
        "mmd_data": mmd(generated, held_out, bandwidth),
        "mmd_data_se": mmd_bootstrap_se(generated, held_out, bandwidth, rng, bootstrap),
        "outlier_radius": radius,
        "outlier_fraction": outlier_fraction(generated, held_out, radius),
        "outlier_sensitivity": outlier_sensitivity(generated, held_out),
    }
    if forward_terminal is not None and prior_sample is not None:
        report["mmd_prior"] = mmd(forward_terminal, prior_sample, bandwidth)
        report["mmd_prior_se"] = mmd_bootstrap_se(forward_terminal, prior_sample, bandwidth, rng, bootstrap)
    if other_mode is not None:
        report["tv_sde_ode"] = binned_tv(generated, other_mode)
        report["mmd_sde_ode"] = mmd(generated, other_mode, bandwidth)
    return report


def summarize(values: np.ndarray) -> Dict[str, float]:
    """Mean and standard error."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return {"count": 0, "mean": float("nan"), "se": float("nan")}
    se = float(np.std(v, ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return {"count": int(v.size), "mean": float(np.mean(v)), "se": se}


def write_report(report: Dict, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, default=float) + "\n", encoding="utf-8")
    return path
