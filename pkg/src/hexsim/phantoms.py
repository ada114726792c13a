"""Ground-truth emitter clouds."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CSV_HEADER = ("x_nm", "y_nm", "z_nm", "intensity")

# header aliases seen in SMLM benchmark files
_AXIS_ALIASES = {
    "x": ("x_nm", "x", "xnano", "xnm", "x [nm]", "x (nm)", "x_pos", "position_x"),
    "y": ("y_nm", "y", "ynano", "ynm", "y [nm]", "y (nm)", "y_pos", "position_y"),
    "z": ("z_nm", "z", "znano", "znm", "z [nm]", "z (nm)", "z_pos", "position_z"),
}
_INTENSITY_ALIASES = ("intensity", "photons", "amplitude", "i")


@dataclass(frozen=True)
class PointCloud:
    """Emitters in nm. ``positions`` is ``(n, 3)`` as x, y, z; ``bounds`` is ``(lo, hi)``."""

    positions: np.ndarray
    intensities: np.ndarray
    bounds: tuple[np.ndarray, np.ndarray]

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        amp = np.asarray(self.intensities, dtype=np.float64).reshape(-1)
        lo, hi = (np.asarray(b, dtype=np.float64).reshape(3) for b in self.bounds)
        if len(pos) != len(amp):
            raise ValueError("positions and intensities differ in length")
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(amp))):
            raise ValueError("emitter coordinates and intensities must be finite")
        if np.any(amp < 0):
            raise ValueError("intensities must be nonnegative")
        if np.any(hi < lo):
            raise ValueError("bounds upper corner below lower corner")
        if len(pos) and (np.any(pos < lo - 1e-6) or np.any(pos > hi + 1e-6)):
            raise ValueError("emitters outside declared bounds")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "intensities", amp)
        object.__setattr__(self, "bounds", (lo, hi))

    def __len__(self):
        return len(self.positions)

    @classmethod
    def from_points(cls, positions, intensities=None) -> PointCloud:
        pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        amp = np.ones(len(pos)) if intensities is None else intensities
        if len(pos):
            bounds = (pos.min(axis=0), pos.max(axis=0))
        else:
            bounds = (np.zeros(3), np.zeros(3))
        return cls(pos, amp, bounds)

    def translated(self, offset) -> PointCloud:
        offset = np.asarray(offset, dtype=np.float64)
        lo, hi = self.bounds
        return PointCloud(self.positions + offset, self.intensities, (lo + offset, hi + offset))

    def centered_at(self, center) -> PointCloud:
        """Shift so the middle of ``bounds`` lands on ``center``."""
        lo, hi = self.bounds
        return self.translated(np.asarray(center, dtype=np.float64) - (lo + hi) / 2)


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(np.uint64(seed) if seed is not None else None)


def _random_unit_vectors(rng, n) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def gen_chromatin(seed, n_steps=400, step_nm=60.0, persistence=0.8, emitters_per_step=2,
                  box_nm=(16000.0, 16000.0, 4000.0), jitter_nm=None) -> PointCloud:
    """Fiber-like cloud from a persistent random walk reflected inside ``box_nm``.

    Each new direction is ``normalize(persistence * prev + (1 - persistence) * u)``
    with ``u`` a uniform random unit vector. Emitters are scattered around the
    path vertices with Gaussian jitter (default a quarter step).
    """
    if n_steps < 2:
        raise ValueError("n_steps must be >= 2")
    if not 0.0 <= persistence <= 1.0:
        raise ValueError("persistence must lie in [0, 1]")
    rng = _rng(seed)
    box = np.asarray(box_nm, dtype=np.float64)
    jitter = step_nm / 4 if jitter_nm is None else jitter_nm

    path = walk_path(rng, n_steps, step_nm, persistence, box)

    pts = np.repeat(path, emitters_per_step, axis=0)
    if jitter > 0 and emitters_per_step > 0:
        pts = pts + rng.normal(0.0, jitter, pts.shape)
        pts = _reflect_into(pts, np.zeros(3), box)
    return PointCloud(pts, np.ones(len(pts)), (np.zeros(3), box))


def walk_path(rng, n_steps, step_nm, persistence, box) -> np.ndarray:
    """Vertices of a reflected persistent walk, starting at the box center."""
    box = np.asarray(box, dtype=np.float64)
    path = np.empty((n_steps, 3))
    path[0] = box / 2
    direction = _random_unit_vectors(rng, 1)[0]
    for i in range(1, n_steps):
        u = _random_unit_vectors(rng, 1)[0]
        d = persistence * direction + (1.0 - persistence) * u
        norm = np.linalg.norm(d)
        direction = d / norm if norm > 0 else u
        p = path[i - 1] + step_nm * direction
        for ax in range(3):
            # mirror off the walls; loop covers steps longer than the box
            while p[ax] < 0 or p[ax] > box[ax]:
                p[ax] = -p[ax] if p[ax] < 0 else 2 * box[ax] - p[ax]
                direction[ax] = -direction[ax]
        path[i] = p
    return path


def _reflect_into(pts, lo, hi):
    span = hi - lo
    rel = np.mod(pts - lo, 2 * span)
    rel = np.where(rel > span, 2 * span - rel, rel)
    return lo + rel


def gen_sphere_cloud(seed, radius_nm=5000.0, n_points=1000) -> PointCloud:
    """Points uniform in a ball centred on the origin."""
    rng = _rng(seed)
    r = radius_nm * rng.random(n_points) ** (1.0 / 3.0)
    pts = _random_unit_vectors(rng, n_points) * r[:, None]
    return PointCloud(pts, np.ones(n_points), (np.full(3, -radius_nm), np.full(3, radius_nm)))


def gen_two_points(dz_nm=900.0) -> PointCloud:
    pts = np.array([[0.0, 0.0, -dz_nm / 2], [0.0, 0.0, dz_nm / 2]])
    return PointCloud(pts, np.ones(2), (pts.min(axis=0), pts.max(axis=0)))


def gen_gratings(n_planes=3, size_um=1.0, density_per_um2=10000.0, dz_nm=900.0, seed=0) -> PointCloud:
    """Stack of flat square point sheets, ``dz_nm`` apart, origin at the first sheet's corner."""
    rng = _rng(seed)
    size_nm = size_um * 1000.0
    layers = []
    for k in range(n_planes):
        n = rng.poisson(density_per_um2 * size_um ** 2)
        xy = rng.random((n, 2)) * size_nm
        layers.append(np.column_stack([xy, np.full(n, k * dz_nm)]))
    pts = np.concatenate(layers) if layers else np.empty((0, 3))
    hi = np.array([size_nm, size_nm, max(n_planes - 1, 0) * dz_nm])
    return PointCloud(pts, np.ones(len(pts)), (np.zeros(3), hi))


def _resolve_column(fieldnames, aliases):
    lowered = {name.strip().lower(): name for name in fieldnames}
    for alias in aliases:
        if alias in lowered:
            return lowered[alias]
    return None


def load_smlm_csv(path, unit_scale=1.0) -> PointCloud:
    """Read an emitter CSV. Columns are matched by header name.

    ``unit_scale`` converts file units to nm (e.g. 1000 for micrometers).
    Rows without an intensity column get unit intensity.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty file")
        cols = {ax: _resolve_column(reader.fieldnames, names) for ax, names in _AXIS_ALIASES.items()}
        missing = [ax for ax, col in cols.items() if col is None]
        if missing:
            raise ValueError(f"{path}: no column for axis {', '.join(missing)} in header {reader.fieldnames}")
        icol = _resolve_column(reader.fieldnames, _INTENSITY_ALIASES)
        pos, amp = [], []
        for lineno, row in enumerate(reader, start=2):
            try:
                pos.append([float(row[cols[ax]]) for ax in "xyz"])
                amp.append(float(row[icol]) if icol else 1.0)
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed row {row}") from exc
    cloud = PointCloud.from_points(np.asarray(pos, dtype=np.float64).reshape(-1, 3) * unit_scale, amp)
    return cloud


def save_cloud_csv(cloud: PointCloud, path):
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for (x, y, z), a in zip(cloud.positions, cloud.intensities):
            writer.writerow([repr(float(x)), repr(float(y)), repr(float(z)), repr(float(a))])
