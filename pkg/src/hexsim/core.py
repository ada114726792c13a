"""Shared containers, normalization, chunking and the on-disk stack format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FRAMES_PER_PLANE = 7
OUT_FRAMES_PER_PLANE = 3


@dataclass(frozen=True)
class Stack3D:
    """A 3D intensity grid.

    ``data`` has shape ``(nz, ny, nx)`` in C order, so x varies fastest.
    ``spacing`` is ``(dx, dy, dz)`` in nanometers.
    """

    data: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"Stack3D needs a non-empty 3D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("Stack3D voxels must be finite")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return nx, ny, nz

    def with_data(self, data) -> Stack3D:
        return Stack3D(data, self.spacing)


@dataclass(frozen=True)
class RawSimStack:
    """Raw SIM acquisition: ``frames`` has shape ``(planes, 7, ny, nx)``."""

    frames: np.ndarray
    lateral_spacing: float
    z_spacing: float

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 4 or frames.shape[1] != FRAMES_PER_PLANE:
            raise ValueError(
                f"raw stack must have shape (planes, {FRAMES_PER_PLANE}, ny, nx), got {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ValueError("raw frames must be finite")
        if self.lateral_spacing <= 0 or self.z_spacing <= 0:
            raise ValueError("spacings must be positive")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def planes(self) -> int:
        return self.frames.shape[0]

    @property
    def frames_per_plane(self) -> int:
        return self.frames.shape[1]

    @property
    def frame_shape(self) -> tuple[int, int]:
        return self.frames.shape[2], self.frames.shape[3]

    def flat_frames(self) -> np.ndarray:
        """All frames plane-major, frame-minor: shape ``(planes * 7, ny, nx)``."""
        return self.frames.reshape(-1, *self.frame_shape)

    def with_frames(self, frames) -> RawSimStack:
        return RawSimStack(frames, self.lateral_spacing, self.z_spacing)

    def as_stack(self) -> Stack3D:
        return Stack3D(self.flat_frames(), (self.lateral_spacing, self.lateral_spacing, self.z_spacing))


@dataclass(frozen=True)
class Chunk:
    """``input`` is ``(7c, ny, nx)``; ``target`` is ``(3c, 2ny, 2nx)``."""

    input: np.ndarray
    target: np.ndarray | None
    plane_index: int
    c: int = field(init=False)

    def __post_init__(self):
        n_in = self.input.shape[0]
        if n_in % FRAMES_PER_PLANE:
            raise ValueError(f"chunk input must hold a multiple of {FRAMES_PER_PLANE} frames")
        c = n_in // FRAMES_PER_PLANE
        object.__setattr__(self, "c", c)
        if self.target is not None:
            ny, nx = self.input.shape[1:]
            expected = (OUT_FRAMES_PER_PLANE * c, 2 * ny, 2 * nx)
            if self.target.shape != expected:
                raise ValueError(f"chunk target shape {self.target.shape}, expected {expected}")


def normalize_unit_range(s: Stack3D) -> Stack3D:
    """Affine rescale to [0, 1]; a constant stack maps to zeros."""
    lo, hi = s.data.min(), s.data.max()
    if hi <= lo:
        return s.with_data(np.zeros_like(s.data))
    return s.with_data((s.data - lo) / (hi - lo))


def truncate_negatives(s: Stack3D) -> Stack3D:
    return s.with_data(np.maximum(s.data, 0.0))


def chunk_split(raw: RawSimStack, target: Stack3D, c: int, discard_threshold: float = 1e-7) -> list[Chunk]:
    """Cut a raw/target pair into non-overlapping runs of ``c`` planes.

    The incomplete tail is dropped, as are chunks whose input mean falls
    below ``discard_threshold``.
    """
    if c < 1:
        raise ValueError("chunk size must be >= 1")
    nx, ny, nz = target.dims
    if nz != OUT_FRAMES_PER_PLANE * raw.planes:
        raise ValueError(
            f"target has {nz} planes but raw stack with {raw.planes} planes needs "
            f"{OUT_FRAMES_PER_PLANE * raw.planes}")
    ry, rx = raw.frame_shape
    if (ny, nx) != (2 * ry, 2 * rx):
        raise ValueError(f"target lateral dims {(ny, nx)} are not twice the raw dims {(ry, rx)}")

    chunks = []
    for start in range(0, raw.planes - c + 1, c):
        inp = raw.frames[start:start + c].reshape(-1, ry, rx)
        if inp.mean() < discard_threshold:
            continue
        tgt = target.data[OUT_FRAMES_PER_PLANE * start:OUT_FRAMES_PER_PLANE * (start + c)]
        chunks.append(Chunk(inp, tgt, start))
    return chunks


# -- container format --------------------------------------------------------

def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def _write_payload(path: Path, data: np.ndarray, meta: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(data, dtype="<f4").tobytes())
    _sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _read_payload(path: Path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    try:
        meta = json.loads(_sidecar(path).read_text())
        payload = path.read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read container {path}: {exc}") from exc
    for key in ("dims", "spacing_nm", "frames_per_plane", "kind"):
        if key not in meta:
            raise ValueError(f"container metadata for {path} is missing '{key}'")
    nx, ny, nz = (int(d) for d in meta["dims"])
    expected = nx * ny * nz * 4
    if len(payload) != expected:
        raise ValueError(f"payload of {path} has {len(payload)} bytes, metadata implies {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(nz, ny, nx).astype(np.float64)
    return data, meta


def write_container(s: Stack3D, path, kind: str = "stack"):
    """Write ``s`` as little-endian float32 plus a ``<path>.json`` sidecar."""
    meta = {"dims": list(s.dims), "spacing_nm": list(s.spacing), "frames_per_plane": 1, "kind": kind}
    _write_payload(path, s.data, meta)


def read_container(path) -> Stack3D:
    data, meta = _read_payload(path)
    return Stack3D(data, tuple(meta["spacing_nm"]))


def write_raw(raw: RawSimStack, path):
    meta = {
        "dims": [raw.frame_shape[1], raw.frame_shape[0], raw.planes * raw.frames_per_plane],
        "spacing_nm": [raw.lateral_spacing, raw.lateral_spacing, raw.z_spacing],
        "frames_per_plane": raw.frames_per_plane,
        "kind": "raw_sim",
    }
    _write_payload(path, raw.flat_frames(), meta)


def read_raw(path) -> RawSimStack:
    data, meta = _read_payload(path)
    if meta["kind"] != "raw_sim":
        raise ValueError(f"{path} holds a '{meta['kind']}' container, not raw_sim")
    fpp = int(meta["frames_per_plane"])
    if data.shape[0] % fpp:
        raise ValueError(f"{data.shape[0]} frames is not a multiple of {fpp} frames per plane")
    frames = data.reshape(-1, fpp, *data.shape[1:])
    dx, _, dz = meta["spacing_nm"]
    return RawSimStack(frames, dx, dz)
