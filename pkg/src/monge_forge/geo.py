"""Spherical coordinates, land point clouds and the map-to-land snap.

Points are (theta, phi) pairs: theta is the azimuth in [0, 2*pi), phi the
polar angle in [0, pi] measured from the north pole.  Land is a point cloud
of cells; membership is "within one cell spacing of some cell".
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

TWO_PI = 2 * np.pi
PHI_TOL = 1e-9
DEFAULT_ANCHORS = 2000
DATA_DIR = Path(__file__).parent / "data"


@dataclass(frozen=True)
class SpherePoint:
    theta: float
    phi: float

    def __post_init__(self):
        if not (-PHI_TOL <= self.phi <= np.pi + PHI_TOL):
            raise ValueError(f"phi={self.phi!r} outside [0, pi]")
        object.__setattr__(self, "theta", float(wrap_theta(self.theta)))
        object.__setattr__(self, "phi", float(np.clip(self.phi, 0.0, np.pi)))

    def as_array(self) -> np.ndarray:
        return np.array([self.theta, self.phi])


def wrap_theta(theta):
    """Azimuth into [0, 2*pi); mod alone can round tiny negatives up to 2*pi."""
    t = np.mod(theta, TWO_PI)
    return np.where(t >= TWO_PI, 0.0, t)


def to_cartesian(points, radius: float = 1.0) -> np.ndarray:
    """(..., 2) array of (theta, phi) -> (..., 3) Cartesian coordinates."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    if isinstance(points, SpherePoint):
        points = points.as_array()
    p = np.asarray(points, dtype=np.float64)
    theta, phi = p[..., 0], p[..., 1]
    s = np.sin(phi)
    return radius * np.stack([np.cos(theta) * s, np.sin(theta) * s, np.cos(phi)], axis=-1)


def from_cartesian(xyz) -> np.ndarray:
    """(..., 3) nonzero vectors -> (..., 2) canonical (theta, phi)."""
    v = np.asarray(xyz, dtype=np.float64)
    r = np.linalg.norm(v, axis=-1)
    if np.any(r == 0):
        raise ValueError("the origin has no spherical direction")
    phi = np.arctan2(np.hypot(v[..., 0], v[..., 1]), v[..., 2])
    theta = wrap_theta(np.arctan2(v[..., 1], v[..., 0]))
    return np.stack([theta, phi], axis=-1)


def canonicalize(points) -> np.ndarray:
    """Map arbitrary (theta, phi) reals to the same sphere point in canonical range.

    Points already in range are returned unchanged, so the map is exactly
    idempotent.
    """
    p = np.asarray(points.as_array() if isinstance(points, SpherePoint) else points, dtype=np.float64)
    out = from_cartesian(to_cartesian(p))
    ok = (p[..., 0] >= 0) & (p[..., 0] < TWO_PI) & (p[..., 1] >= 0) & (p[..., 1] <= np.pi)
    return np.where(ok[..., None], p, out)


def latlon_to_sphere(lat, lon) -> np.ndarray:
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    return np.stack([wrap_theta(np.deg2rad(lon)), np.deg2rad(90.0 - lat)], axis=-1)


def geodesic(p1, p2, radius: float = 1.0) -> np.ndarray:
    """Great-circle distance via the Cartesian embedding."""
    ip = np.sum(to_cartesian(p1) * to_cartesian(p2), axis=-1)
    return radius * np.arccos(np.clip(ip, -1.0, 1.0))


# --- point-cloud files ----------------------------------------------------


def _read_angle_csv(path, extra=()) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Read ``lat,lon`` (degrees) or ``theta,phi`` (radians) rows plus extra columns."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        cols = [h.strip().lower() for h in header]
        if cols[:2] == ["lat", "lon"]:
            degrees = True
        elif cols[:2] == ["theta", "phi"]:
            degrees = False
        else:
            raise ValueError(f"{path}:1: header must start with lat,lon or theta,phi (got {header})")
        missing = [c for c in extra if c not in cols]
        if missing:
            raise ValueError(f"{path}:1: missing columns {missing}")
        idx = [cols.index(c) for c in extra]
        rows, extras = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                if len(row) != len(cols):
                    raise ValueError(f"expected {len(cols)} fields")
                a, b = float(row[0]), float(row[1])
                ex = [float(row[i]) for i in idx]
            except ValueError as err:
                raise ValueError(f"{path}:{lineno}: malformed row {row}: {err}") from None
            if not (np.isfinite(a) and np.isfinite(b) and all(np.isfinite(ex))):
                raise ValueError(f"{path}:{lineno}: non-finite value in {row}")
            if degrees and not (-90 <= a <= 90):
                raise ValueError(f"{path}:{lineno}: latitude {a} outside [-90, 90]")
            if not degrees and not (-PHI_TOL <= b <= np.pi + PHI_TOL):
                raise ValueError(f"{path}:{lineno}: phi {b} outside [0, pi]")
            rows.append((a, b))
            extras.append(ex)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    arr = np.array(rows)
    pts = latlon_to_sphere(arr[:, 0], arr[:, 1]) if degrees else np.stack(
        [wrap_theta(arr[:, 0]), np.clip(arr[:, 1], 0, np.pi)], axis=-1)
    ex_arr = np.array(extras).reshape(len(rows), len(extra))
    return pts, {c: ex_arr[:, k] for k, c in enumerate(extra)}


def _cell_spacing(xyz: np.ndarray) -> float:
    if len(xyz) < 2:
        return 0.05
    d, _ = cKDTree(xyz).query(xyz, k=2)
    return float(np.percentile(d[:, 1], 90))


class LandSet:
    """Immutable land point cloud with a fixed anchor subset."""

    def __init__(self, points: np.ndarray, n_anchors: int = DEFAULT_ANCHORS, seed: int = 0,
                 spacing: float | None = None):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        if len(pts) == 0:
            raise ValueError("land set is empty")
        pts = np.unique(pts, axis=0)
        self.points = pts
        self.points.setflags(write=False)
        self._xyz = to_cartesian(pts)
        self._tree = cKDTree(self._xyz)
        # chord distance between neighbouring cells; also used as angular jitter
        self.spacing = float(spacing) if spacing is not None else _cell_spacing(self._xyz)
        k = min(n_anchors, len(pts))
        rng = np.random.default_rng(seed)
        self.anchor_index = np.sort(rng.choice(len(pts), size=k, replace=False))
        self.anchors = pts[self.anchor_index]
        self.anchors.setflags(write=False)

    @property
    def n_anchors(self) -> int:
        return len(self.anchors)

    def __len__(self) -> int:
        return len(self.points)

    def distance_to_land(self, points) -> np.ndarray:
        d, _ = self._tree.query(to_cartesian(np.asarray(points, dtype=np.float64).reshape(-1, 2)))
        return d

    def contains(self, points, threshold: float | None = None) -> np.ndarray:
        """Land membership: within ``threshold`` (default one cell spacing) of a cell."""
        thr = self.spacing if threshold is None else threshold
        return self.distance_to_land(points) <= thr + 1e-12


def load_land(path, n_anchors: int = DEFAULT_ANCHORS, seed: int = 0) -> LandSet:
    pts, _ = _read_angle_csv(path)
    return LandSet(pts, n_anchors, seed)


def land_test(land: LandSet, threshold: float | None = None):
    """Membership predicate over (theta, phi) arrays."""
    return lambda points: land.contains(points, threshold)


def nearest_anchor(points, anchors) -> np.ndarray:
    """Index of the nearest anchor in raw (theta, phi); ties go to the lowest index."""
    P = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    A = np.asarray(anchors, dtype=np.float64).reshape(-1, 2)
    if len(A) == 0:
        raise ValueError("no anchors")
    out = np.empty(len(P), dtype=np.int64)
    for s in range(0, len(P), 1024):
        d = np.sum((P[s:s + 1024, None, :] - A[None, :, :]) ** 2, axis=-1)
        out[s:s + 1024] = np.argmin(d, axis=1)
    return out


def tau_many(points, land: LandSet, test=None) -> tuple[np.ndarray, np.ndarray]:
    """Snap sea points to the nearest land anchor; returns (points, moved)."""
    test = test or land_test(land)
    P = canonicalize(np.asarray(points, dtype=np.float64).reshape(-1, 2))
    on_land = np.asarray(test(P), dtype=bool)
    out = P.copy()
    moved = ~on_land
    if np.any(moved):
        out[moved] = land.anchors[nearest_anchor(P[moved], land.anchors)]
    return out, moved


def tau(p, land: LandSet, test=None) -> SpherePoint:
    pt = p.as_array() if isinstance(p, SpherePoint) else np.asarray(p, dtype=np.float64)
    out, _ = tau_many(pt[None, :], land, test)
    return SpherePoint(*out[0])


def _jitter(points, rng, jitter):
    if jitter <= 0:
        return canonicalize(points)
    return canonicalize(points + rng.uniform(-jitter / 2, jitter / 2, size=points.shape))


def sample_uniform_land(land: LandSet, n: int, seed, jitter: float | None = None) -> np.ndarray:
    """Uniform draw over land cells with a uniform jitter box of side ``jitter``.

    ``jitter`` defaults to the cell spacing, i.e. each coordinate moves by at
    most half a spacing.  ``seed`` may be an int or a Generator.
    """
    if len(land) == 0:
        raise ValueError("land set is empty")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = rng.integers(0, len(land), size=n)
    return _jitter(land.points[idx], rng, land.spacing if jitter is None else jitter)


@dataclass(frozen=True)
class PopulationSet:
    points: np.ndarray
    weights: np.ndarray
    spacing: float

    def sample(self, n: int, rng: np.random.Generator, jitter: float | None = None) -> np.ndarray:
        p = self.weights / self.weights.sum()
        idx = rng.choice(len(self.points), size=n, p=p)
        return _jitter(self.points[idx], rng, self.spacing if jitter is None else jitter)


def load_population(path) -> PopulationSet:
    """Weighted point CSV: ``lat,lon,weight`` or ``theta,phi,weight``."""
    pts, ex = _read_angle_csv(path, extra=("weight",))
    w = ex["weight"]
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError(f"{path}: weights must be nonnegative with a positive sum")
    return PopulationSet(pts, w, _cell_spacing(to_cartesian(pts)))


# --- bundled synthetic world ----------------------------------------------


def fibonacci_sphere(n: int) -> np.ndarray:
    """Near-uniform (theta, phi) lattice of n points."""
    k = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * k / n)
    theta = np.mod(np.pi * (1 + 5**0.5) * k, TWO_PI)
    return np.stack([theta, phi], axis=-1)


def synthetic_world(n_cells: int = 12000, seed: int = 7) -> tuple[np.ndarray, np.ndarray]:
    """Blob continents on a Fibonacci lattice; returns (land_latlon, population rows).

    Population rows are ``(lat, lon, weight)`` on land cells, weighted by a
    few concentrated centres.
    """
    rng = np.random.default_rng(seed)
    cells = fibonacci_sphere(n_cells)
    xyz = to_cartesian(cells)
    centres = to_cartesian(canonicalize(np.stack([rng.uniform(0, TWO_PI, 9), rng.uniform(0.35, 2.8, 9)], -1)))
    kappa = rng.uniform(6, 14, 9)
    field = np.max(np.exp(kappa * (xyz @ centres.T - 1)), axis=1)
    land = field > 0.35
    cities = centres[rng.choice(9, 5, replace=False)]
    weight = np.sum(np.exp(30 * (xyz[land] @ cities.T - 1)), axis=1) + 0.02
    lat = 90 - np.rad2deg(cells[land, 1])
    lon = np.rad2deg(cells[land, 0])
    lon = np.where(lon >= 180, lon - 360, lon)
    latlon = np.round(np.stack([lat, lon], -1), 4)
    return latlon, np.column_stack([latlon, np.round(weight / weight.max(), 6)])


def write_synthetic_world(directory=DATA_DIR) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    latlon, pop = synthetic_world()
    land_path, pop_path = directory / "land.csv", directory / "population.csv"
    with open(land_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lat", "lon"])
        w.writerows(latlon.tolist())
    with open(pop_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lat", "lon", "weight"])
        w.writerows(pop.tolist())
    return land_path, pop_path
