"""
Datasets on S^2: lat/lon catalogs, synthetic samplers (spherical-harmonic and
vMF-mixture densities), the geodesic-Gaussian MMD, and sample export.

Coordinate convention: latitude lat, longitude lon (degrees) map to
    x = (cos lat cos lon, cos lat sin lon, sin lat).
At the poles the exported longitude is 0.

Input CSV: header row with `lat`,`lon` columns (degrees); extra columns ignored.
Output CSV: `lat_deg,lon_deg`. GeoJSON: FeatureCollection of Points, [lon, lat].
"""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.special import gammaln, lpmv

from . import audit
from .errors import (
    BadWeights,
    BoundViolation,
    EmptyAfterFiltering,
    EmptyDataset,
    InvalidHarmonic,
    InvalidSyntheticSpec,
    MissingColumns,
    SampleExportError,
)
from .manifold import geodesic_distance, sample_uniform, tangent_basis

# lat/lon grid for the harmonic bound: 0.25 degree spacing
BOUND_GRID = (721, 1441)
BOUND_INFLATION = 1.05
MAX_BOUND_RETRIES = 5
MMD_BLOCK = 1024
MEDIAN_HEURISTIC_POINTS = 2000

HARMONIC_MODES = ("abs", "positive")


# ---------------------------
# coordinates
# ---------------------------


def latlon_to_xyz(lat_deg, lon_deg) -> np.ndarray:
    lat = np.radians(np.asarray(lat_deg, dtype=np.float64))
    lon = np.radians(np.asarray(lon_deg, dtype=np.float64))
    return np.stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)], axis=-1)


def xyz_to_latlon(points) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(points, dtype=np.float64)
    rho = np.hypot(p[..., 0], p[..., 1])
    lat = np.degrees(np.arctan2(p[..., 2], rho))
    lon = np.where(rho > 1e-12, np.degrees(np.arctan2(p[..., 1], p[..., 0])), 0.0)
    return lat, lon


# ---------------------------
# datasets
# ---------------------------


@dataclass
class GeoDataset:
    points: np.ndarray
    name: str = ""
    source: str = ""
    split_seed: Optional[int] = None
    skipped_rows: int = 0

    def __len__(self) -> int:
        return int(self.points.shape[0])

    def split(self, held_out_fraction: float = 0.2, seed: int = 0) -> Tuple["GeoDataset", "GeoDataset"]:
        """Disjoint train/held-out partition; a pure function of (data, fraction, seed)."""
        n = len(self)
        perm = np.random.default_rng(seed).permutation(n)
        n_held = int(round(held_out_fraction * n))
        if n > 1:
            n_held = min(max(n_held, 1), n - 1)
        held_idx = np.sort(perm[:n_held])
        train_idx = np.sort(perm[n_held:])
        return (
            GeoDataset(self.points[train_idx], f"{self.name}:train", self.source, seed),
            GeoDataset(self.points[held_idx], f"{self.name}:held_out", self.source, seed),
        )

    def sampler(self) -> "EmpiricalSampler":
        return EmpiricalSampler(self.points)


def load_latlon_csv(path, name: Optional[str] = None) -> GeoDataset:
    """Rows with missing or out-of-range lat/lon are skipped and counted."""
    path = Path(path)
    lats: List[float] = []
    lons: List[float] = []
    skipped = 0
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        header = {h.strip().lower(): h for h in (reader.fieldnames or [])}
        missing = [c for c in ("lat", "lon") if c not in header]
        if missing:
            raise MissingColumns(f"{path}: missing column(s) {missing}", path=str(path), missing=missing)
        for row in reader:
            try:
                lat = float((row.get(header["lat"]) or "").strip())
                lon = float((row.get(header["lon"]) or "").strip())
            except ValueError:
                skipped += 1
                continue
            if not (np.isfinite(lat) and np.isfinite(lon)) or abs(lat) > 90.0 or abs(lon) > 180.0:
                skipped += 1
                continue
            lats.append(lat)
            lons.append(lon)
    if skipped:
        audit.log_event("latlon_rows_skipped", path=str(path), skipped=skipped, kept=len(lats))
    if not lats:
        raise EmptyAfterFiltering(f"{path}: no valid rows", path=str(path), skipped=skipped)
    return GeoDataset(latlon_to_xyz(lats, lons), name or path.stem, str(path), skipped_rows=skipped)


class EmpiricalSampler:
    """Draws dataset points uniformly with replacement."""

    def __init__(self, points: np.ndarray) -> None:
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if self.points.shape[0] == 0:
            raise EmptyDataset("empirical sampler over an empty dataset")

    def __call__(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.points[rng.integers(0, self.points.shape[0], size=n)]


class UniformSampler:
    def __call__(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return sample_uniform(rng, n)

    @staticmethod
    def log_density(x: np.ndarray) -> np.ndarray:
        return np.full(np.shape(x)[:-1], -np.log(4.0 * np.pi))


# ---------------------------
# spherical harmonics
# ---------------------------


def real_harmonic(l: int, m: int, points: np.ndarray) -> np.ndarray:
    """Re Y_l^m at points, fully normalized (Condon-Shortley phase, as scipy.special.lpmv)."""
    p = np.asarray(points, dtype=np.float64)
    cos_theta = np.clip(p[..., 2], -1.0, 1.0)
    phi = np.arctan2(p[..., 1], p[..., 0])
    am = abs(m)
    log_norm = 0.5 * (np.log(2 * l + 1) - np.log(4 * np.pi) + gammaln(l - am + 1) - gammaln(l + am + 1))
    value = np.exp(log_norm) * lpmv(am, l, cos_theta) * np.cos(am * phi)
    if m < 0:
        # Y_l^{-m} = (-1)^m conj(Y_l^m)
        value = value * (-1.0) ** am
    return value


def _check_harmonic(l: int, m: int, mode: str) -> None:
    if l < 0 or abs(m) > l:
        raise InvalidHarmonic(f"need |m| <= l and l >= 0, got l={l}, m={m}", l=l, m=m)
    if mode not in HARMONIC_MODES:
        raise InvalidHarmonic(f"mode must be one of {HARMONIC_MODES}, got {mode!r}")


@dataclass
class HarmonicDensity:
    """Unnormalized density |Re Y_l^m| (mode "abs") or max(Re Y_l^m, 0) (mode "positive")."""

    l: int
    m: int
    mode: str = "abs"
    bound: float = 0.0
    inflations: int = field(default=0, compare=False)
    # running acceptance totals over every sample_harmonic call
    calls: int = field(default=0, compare=False)
    accepted: int = field(default=0, compare=False)
    proposed: int = field(default=0, compare=False)
    convention_logged: bool = field(default=False, compare=False)

    @classmethod
    def create(cls, l: int, m: int, mode: str = "abs", grid: Tuple[int, int] = BOUND_GRID) -> "HarmonicDensity":
        _check_harmonic(l, m, mode)
        density = cls(l=l, m=m, mode=mode)
        lat = np.linspace(-90.0, 90.0, grid[0])
        lon = np.linspace(-180.0, 180.0, grid[1])
        lat_g, lon_g = np.meshgrid(lat, lon, indexing="ij")
        density.bound = float(np.max(density(latlon_to_xyz(lat_g, lon_g))))
        if density.bound <= 0.0:
            raise InvalidHarmonic(f"density identically zero for l={l}, m={m}, mode={mode}")
        return density

    def __call__(self, points: np.ndarray) -> np.ndarray:
        value = real_harmonic(self.l, self.m, points)
        return np.abs(value) if self.mode == "abs" else np.maximum(value, 0.0)

    def check_bound(self, values: np.ndarray) -> None:
        worst = float(np.max(values)) if np.size(values) else 0.0
        if worst > self.bound:
            raise BoundViolation(f"density {worst} exceeds bound {self.bound}", value=worst, bound=self.bound)

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else float("nan")


def _log_acceptance(density: HarmonicDensity) -> None:
    # calls 1, 2, 4, 8, ...: the log grows with log2 of the call count
    if density.calls & (density.calls - 1) == 0:
        audit.log_event("harmonic_acceptance", l=density.l, m=density.m, calls=density.calls,
                        proposed=density.proposed, acceptance_rate=density.acceptance_rate)


def sample_harmonic(density: HarmonicDensity, n: int, rng: np.random.Generator, return_stats: bool = False):
    """
    Rejection sampling: uniform proposals accepted with probability density / bound.
    A proposal above the bound inflates the bound, logs the event, and restarts.
    The density convention is logged once per density; acceptance is logged as a
    running aggregate.
    """
    if density.mode == "abs" and not density.convention_logged:
        audit.log_event("density_convention", l=density.l, m=density.m, mode="abs",
                        note="probability proportional to |Re Y_l^m|")
        density.convention_logged = True
    for _ in range(MAX_BOUND_RETRIES + 1):
        accepted: List[np.ndarray] = []
        count = 0
        proposed = 0
        try:
            while count < n:
                batch = max(1024, 2 * (n - count))
                x = sample_uniform(rng, batch)
                values = density(x)
                density.check_bound(values)
                keep = rng.uniform(size=batch) * density.bound < values
                proposed += batch
                accepted.append(x[keep])
                count += int(keep.sum())
        except BoundViolation as exc:
            density.bound = BOUND_INFLATION * exc.details["value"]
            density.inflations += 1
            audit.log_event("harmonic_bound_inflated", l=density.l, m=density.m, new_bound=density.bound)
            continue
        points = np.concatenate(accepted, axis=0)[:n] if accepted else np.zeros((0, 3))
        rate = count / proposed if proposed else float("nan")
        density.calls += 1
        density.accepted += count
        density.proposed += proposed
        _log_acceptance(density)
        if return_stats:
            return points, {"acceptance_rate": rate, "bound": density.bound, "proposed": proposed}
        return points
    raise BoundViolation(f"bound still violated after {MAX_BOUND_RETRIES} inflations", bound=density.bound)


class HarmonicSampler:
    def __init__(self, density: HarmonicDensity) -> None:
        self.density = density

    def __call__(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return sample_harmonic(self.density, n, rng)


# ---------------------------
# von Mises-Fisher mixtures
# ---------------------------


class VmfComponent(NamedTuple):
    mean: np.ndarray
    kappa: float
    weight: float


def _sample_vmf_cosines(kappa: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Inverse CDF of w = <x, mu> on S^2: density proportional to exp(kappa w) on [-1, 1]."""
    u = rng.uniform(size=n)
    if kappa < 1e-8:
        return 2.0 * u - 1.0
    # w = 1 + log(u + (1 - u) e^{-2 kappa}) / kappa, stable for large kappa
    return 1.0 + np.log(u + (1.0 - u) * np.exp(-2.0 * kappa)) / kappa


def sample_vmf(mean, kappa: float, n: int, rng: np.random.Generator) -> np.ndarray:
    mu = np.asarray(mean, dtype=np.float64)
    mu = mu / np.linalg.norm(mu)
    w = np.clip(_sample_vmf_cosines(kappa, n, rng), -1.0, 1.0)
    psi = rng.uniform(0.0, 2.0 * np.pi, size=n)
    basis = tangent_basis(mu)
    v = np.cos(psi)[:, None] * basis.e1 + np.sin(psi)[:, None] * basis.e2
    x = w[:, None] * mu + np.sqrt(1.0 - w * w)[:, None] * v
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def sample_vmf_mixture(params: Sequence, n: int, rng: np.random.Generator) -> np.ndarray:
    comps = [VmfComponent(np.asarray(p[0], dtype=np.float64), float(p[1]), float(p[2])) for p in params]
    if not comps:
        raise BadWeights("mixture needs at least one component")
    weights = np.array([c.weight for c in comps])
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-8:
        raise BadWeights(f"weights must be nonnegative and sum to 1, got {weights.tolist()}")
    if any(c.kappa < 0 for c in comps):
        raise BadWeights("concentrations must be >= 0")
    labels = rng.choice(len(comps), size=n, p=weights)
    out = np.empty((n, 3))
    for j, c in enumerate(comps):
        idx = np.flatnonzero(labels == j)
        if idx.size:
            out[idx] = sample_vmf(c.mean, c.kappa, idx.size, rng)
    return out


class VmfMixtureSampler:
    def __init__(self, params: Sequence) -> None:
        self.params = list(params)

    def __call__(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return sample_vmf_mixture(self.params, n, rng)


def _numbers(values: Sequence[str], kind, spec: str) -> list:
    try:
        return [kind(v.strip()) for v in values]
    except ValueError:
        raise InvalidSyntheticSpec(f"non-numeric field in synthetic spec {spec!r}", spec=spec) from None


def check_synthetic_spec(spec: str) -> Tuple[str, tuple]:
    """
    Parse and validate a synthetic spec without building its sampler:
    ('uniform', ()), ('vmf', components) or ('harmonic', (l, m, mode)).
    """
    kind, _, rest = spec.partition(":")
    kind = kind.strip().lower()
    if kind == "uniform":
        if rest.strip():
            raise InvalidSyntheticSpec(f"'uniform' takes no parameters, got {spec!r}", spec=spec)
        return kind, ()
    if kind == "vmf":
        comps = []
        for part in filter(None, (p.strip() for p in rest.split(";"))):
            values = part.split(",")
            if len(values) != 4:
                raise InvalidSyntheticSpec(f"vmf component needs lat,lon,kappa,weight, got {part!r}", spec=spec)
            lat, lon, kappa, weight = _numbers(values, float, spec)
            comps.append((latlon_to_xyz(lat, lon), kappa, weight))
        sample_vmf_mixture(comps, 0, np.random.default_rng(0))  # validates weights
        return kind, tuple(comps)
    if kind == "harmonic":
        fields = [v.strip() for v in rest.split(",")]
        if len(fields) not in (2, 3):
            raise InvalidSyntheticSpec(f"harmonic spec needs l,m[,abs|positive], got {spec!r}", spec=spec)
        l, m = _numbers(fields[:2], int, spec)
        mode = fields[2] if len(fields) == 3 else "abs"
        _check_harmonic(l, m, mode)
        return kind, (l, m, mode)
    raise InvalidSyntheticSpec(f"unknown synthetic dataset spec: {spec!r}", spec=spec)


def parse_synthetic_spec(spec: str) -> Callable[[int, np.random.Generator], np.ndarray]:
    """
    'uniform' | 'vmf:lat,lon,kappa,weight;lat,lon,kappa,weight' |
    'harmonic:l,m[,abs|positive]'.
    """
    kind, args = check_synthetic_spec(spec)
    if kind == "uniform":
        return UniformSampler()
    if kind == "vmf":
        return VmfMixtureSampler(args)
    return HarmonicSampler(HarmonicDensity.create(*args))


# ---------------------------
# MMD
# ---------------------------


def geodesic_gaussian_kernel(a: np.ndarray, b: np.ndarray, bandwidth: float) -> np.ndarray:
    d = geodesic_distance(a[:, None, :], b[None, :, :])
    return np.exp(-(d * d) / (2.0 * bandwidth * bandwidth))


def _kernel_sum(a: np.ndarray, b: np.ndarray, bandwidth: float, block: int) -> float:
    """Blockwise sum of k(a_i, b_j), reduced in a fixed block order."""
    total = 0.0
    for i in range(0, a.shape[0], block):
        for j in range(0, b.shape[0], block):
            total += float(np.sum(geodesic_gaussian_kernel(a[i:i + block], b[j:j + block], bandwidth)))
    return total


def mmd(sample_a: np.ndarray, sample_b: np.ndarray, bandwidth: float, block: int = MMD_BLOCK) -> float:
    """Biased (V-statistic) MMD^2 with k(x, y) = exp(-d_geo(x, y)^2 / (2 bandwidth^2)); clamped at 0."""
    a = np.asarray(sample_a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(sample_b, dtype=np.float64).reshape(-1, 3)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise EmptyDataset("mmd needs nonempty samples")
    kaa = _kernel_sum(a, a, bandwidth, block) / a.shape[0] ** 2
    kbb = _kernel_sum(b, b, bandwidth, block) / b.shape[0] ** 2
    kab = _kernel_sum(a, b, bandwidth, block) / (a.shape[0] * b.shape[0])
    return max(kaa + kbb - 2.0 * kab, 0.0)


def median_bandwidth(sample_a: np.ndarray, sample_b: np.ndarray, max_points: int = MEDIAN_HEURISTIC_POINTS) -> float:
    """Median pairwise geodesic distance over the pooled samples (deterministic thinning)."""
    pooled = np.concatenate([np.reshape(sample_a, (-1, 3)), np.reshape(sample_b, (-1, 3))], axis=0)
    if pooled.shape[0] > max_points:
        pooled = pooled[np.linspace(0, pooled.shape[0] - 1, max_points).astype(int)]
    d = geodesic_distance(pooled[:, None, :], pooled[None, :, :])
    iu = np.triu_indices(pooled.shape[0], k=1)
    med = float(np.median(d[iu])) if iu[0].size else 1.0
    return med if med > 0 else 1.0


def mmd_permutation_threshold(
    sample_a: np.ndarray,
    sample_b: np.ndarray,
    bandwidth: float,
    rng: np.random.Generator,
    n_permutations: int = 200,
    quantile: float = 0.99,
) -> float:
    """Null quantile of MMD^2 under random relabelling of the pooled samples."""
    a = np.reshape(sample_a, (-1, 3))
    b = np.reshape(sample_b, (-1, 3))
    pooled = np.concatenate([a, b], axis=0)
    # one kernel matrix, permuted index sums
    k = geodesic_gaussian_kernel(pooled, pooled, bandwidth)
    n_a = a.shape[0]
    n_b = b.shape[0]
    stats = np.empty(n_permutations)
    for i in range(n_permutations):
        perm = rng.permutation(pooled.shape[0])
        ia, ib = perm[:n_a], perm[n_a:]
        stats[i] = (k[np.ix_(ia, ia)].sum() / n_a ** 2 + k[np.ix_(ib, ib)].sum() / n_b ** 2
                    - 2.0 * k[np.ix_(ia, ib)].sum() / (n_a * n_b))
    return float(np.quantile(stats, quantile))


def mmd_bootstrap_se(
    sample_a: np.ndarray,
    sample_b: np.ndarray,
    bandwidth: float,
    rng: np.random.Generator,
    n_boot: int = 20,
) -> float:
    a = np.reshape(sample_a, (-1, 3))
    b = np.reshape(sample_b, (-1, 3))
    stats = [
        mmd(a[rng.integers(0, a.shape[0], a.shape[0])], b[rng.integers(0, b.shape[0], b.shape[0])], bandwidth)
        for _ in range(n_boot)
    ]
    return float(np.std(stats, ddof=1)) if n_boot > 1 else 0.0


# ---------------------------
# export
# ---------------------------


def export_samples(points: np.ndarray, path, fmt: str = "csv") -> Path:
    path = Path(path)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lat, lon = xyz_to_latlon(pts)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if fmt == "csv":
            with open(path, "w", encoding="utf-8", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(["lat_deg", "lon_deg"])
                for la, lo in zip(lat, lon):
                    writer.writerow([repr(float(la)), repr(float(lo))])
        elif fmt == "geojson":
            doc = {
                "type": "FeatureCollection",
                "features": [
                    {
                        "type": "Feature",
                        "geometry": {"type": "Point", "coordinates": [float(lo), float(la)]},
                        "properties": {},
                    }
                    for la, lo in zip(lat, lon)
                ],
            }
            with open(path, "w", encoding="utf-8") as f:
                json.dump(doc, f)
        else:
            raise ValueError(f"unknown export format {fmt!r}; use csv or geojson")
    except OSError as exc:
        raise SampleExportError(f"could not write {path}: {exc}", path=str(path)) from exc
    return path


def load_samples_csv(path) -> np.ndarray:
    """Inverse of export_samples(fmt='csv')."""
    with open(path, "r", encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        return np.zeros((0, 3))
    return latlon_to_xyz([float(r["lat_deg"]) for r in rows], [float(r["lon_deg"]) for r in rows])
