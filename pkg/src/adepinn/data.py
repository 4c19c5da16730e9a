"""Voxel time-series container, on-disk format, scaling and point sampling.

On-disk layout (format tag "ECSF1"): a JSON manifest next to a raw blob of
little-endian float32 values ordered [frame][z][y][x].  The manifest holds

    {"magic": "ECSF1", "dims": [nx, ny, nz], "spacing_mm": [sx, sy, sz],
     "timestamps_s": [...], "roi": "all" | {"rle": [...]}, "blob": "frames.f32"}

The ROI run-length encoding alternates run lengths of excluded/included
voxels over the flat [z][y][x] order, starting with an excluded run (which
may be zero).  In memory frames are float64 and nonnegative.

Spatial coordinates are node-centered: voxel index i along an axis sits at
i * spacing.  Axes with a single voxel carry no spatial information; the
remaining "active" axes, in x, y, z order, define the spatial dimension d
of the learning problem.  Training happens in scaled coordinates: positions
divided by the largest physical extent X_s, times shifted to the first
frame and divided by the span T_s, intensities divided by the ROI maximum
C_s.  A learned pair (D^, v^) in scaled space maps back to physical units
as D = D^ X_s^2 / T_s and v = v^ X_s / T_s.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .fdsolver import Grid, gaussian_on_grid, solve_ade_fd

__all__ = [
    "VoxelSeries", "ScaleRecord", "SampleBatch", "SynthSpec", "FormatError",
    "load_voxel_series", "save_voxel_series", "normalize_intensity",
    "nondimensionalize", "nondimensionalize_coefficients", "redimensionalize",
    "sample_points", "prepare_batch", "generate_synthetic", "series_grid",
    "frame_to_field", "field_to_frame",
]

MAGIC = "ECSF1"


class FormatError(ValueError):
    pass


@dataclass
class VoxelSeries:
    """A stack of voxel frames over time.

    dims is (nx, ny, nz); frames has shape (n_frames, nz, ny, nx); roi_mask
    has shape (nz, ny, nx).
    """

    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float]
    timestamps_s: np.ndarray
    frames: np.ndarray
    roi_mask: np.ndarray

    def __post_init__(self) -> None:
        self.dims = tuple(int(n) for n in self.dims)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.dims) != 3 or any(n < 1 for n in self.dims):
            raise FormatError(f"dims must be three positive extents, got {self.dims}")
        if len(self.spacing_mm) != 3 or any(not (s > 0.0) for s in self.spacing_mm):
            raise FormatError(f"spacing must be three positive lengths, got {self.spacing_mm}")
        self.timestamps_s = np.asarray(self.timestamps_s, dtype=np.float64)
        if self.timestamps_s.ndim != 1 or self.timestamps_s.size < 1:
            raise FormatError("timestamps must be a non-empty 1-D sequence")
        if np.any(np.diff(self.timestamps_s) <= 0.0):
            raise FormatError("timestamps must be strictly increasing")
        nx, ny, nz = self.dims
        self.frames = np.asarray(self.frames, dtype=np.float64)
        want = (self.timestamps_s.size, nz, ny, nx)
        if self.frames.shape != want:
            raise FormatError(f"frames have shape {self.frames.shape}, want {want}")
        if not np.all(np.isfinite(self.frames)):
            raise FormatError("frames contain non-finite values")
        if np.any(self.frames < 0.0):
            raise FormatError("frames contain negative intensities")
        self.roi_mask = np.asarray(self.roi_mask, dtype=bool)
        if self.roi_mask.shape != (nz, ny, nx):
            raise FormatError(f"roi mask has shape {self.roi_mask.shape}, want {(nz, ny, nx)}")
        if not self.roi_mask.any():
            raise FormatError("roi mask is empty")

    @property
    def n_frames(self) -> int:
        return int(self.timestamps_s.size)

    @property
    def active_axes(self) -> list[int]:
        """Axes (0=x, 1=y, 2=z) with more than one voxel."""
        return [a for a in range(3) if self.dims[a] > 1]

    @property
    def spatial_dim(self) -> int:
        return len(self.active_axes)

    def extent_mm(self, axis: int) -> float:
        return (self.dims[axis] - 1) * self.spacing_mm[axis]

    def roi_size(self) -> int:
        return int(self.roi_mask.sum())


def series_grid(series: VoxelSeries, boundary: str = "periodic") -> Grid:
    """Node-centered grid over the active axes, matching the sampling coordinates."""
    axes = series.active_axes
    if not axes:
        raise FormatError("series has no axis with more than one voxel")
    return Grid(tuple(series.dims[a] for a in axes),
                tuple(series.spacing_mm[a] for a in axes),
                boundary=boundary)


def frame_to_field(series: VoxelSeries, frame: np.ndarray) -> np.ndarray:
    """Reorder one stored (nz, ny, nx) frame to active-axes (x[, y[, z]]) order."""
    nx, ny, nz = series.dims
    full = np.ascontiguousarray(np.transpose(frame.reshape(nz, ny, nx), (2, 1, 0)))
    return full.reshape(tuple(series.dims[a] for a in series.active_axes))


def field_to_frame(dims: tuple[int, int, int], f: np.ndarray) -> np.ndarray:
    """Reorder an active-axes field back to the stored (nz, ny, nx) frame layout."""
    nx, ny, nz = dims
    return np.ascontiguousarray(np.transpose(f.reshape(nx, ny, nz), (2, 1, 0)))


# -- on-disk format --------------------------------------------------------

def _rle_encode(mask: np.ndarray) -> list[int]:
    flat = mask.ravel().astype(np.int8)
    edges = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], edges, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0] == 1:  # encoding starts with an excluded run
        runs = [0] + runs
    return [int(r) for r in runs]


def _rle_decode(runs, size: int) -> np.ndarray:
    if not isinstance(runs, list) or not runs:
        raise FormatError("roi rle must be a non-empty list of run lengths")
    vals = []
    for i, r in enumerate(runs):
        if not isinstance(r, int) or r < 0:
            raise FormatError(f"roi rle run {i} is not a nonnegative integer: {r!r}")
        vals.append(r)
    if sum(vals) != size:
        raise FormatError(f"roi rle covers {sum(vals)} voxels, volume has {size}")
    out = np.zeros(size, dtype=bool)
    pos, included = 0, False
    for r in vals:
        if included:
            out[pos:pos + r] = True
        pos += r
        included = not included
    return out


def save_voxel_series(series: VoxelSeries, out_dir, blob_name: str = "frames.f32") -> str:
    """Write manifest.json plus the float32 blob; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    mask = series.roi_mask
    roi = "all" if mask.all() else {"rle": _rle_encode(mask)}
    manifest = {
        "magic": MAGIC,
        "dims": list(series.dims),
        "spacing_mm": list(series.spacing_mm),
        "timestamps_s": series.timestamps_s.tolist(),
        "roi": roi,
        "blob": blob_name,
    }
    blob_path = os.path.join(out_dir, blob_name)
    with open(blob_path, "wb") as fh:
        fh.write(np.ascontiguousarray(series.frames, dtype="<f4").tobytes())
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return manifest_path


def load_voxel_series(path) -> VoxelSeries:
    """Read a manifest (or a directory holding manifest.json) and its blob."""
    manifest_path = os.path.join(path, "manifest.json") if os.path.isdir(path) else path
    if not os.path.exists(manifest_path):
        raise FormatError(f"missing manifest file: {manifest_path}")
    with open(manifest_path) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{manifest_path}: not valid JSON ({exc})") from None
    if not isinstance(manifest, dict) or manifest.get("magic") != MAGIC:
        raise FormatError(f"{manifest_path}: bad magic, expected {MAGIC!r}")
    for key in ("dims", "spacing_mm", "timestamps_s", "roi", "blob"):
        if key not in manifest:
            raise FormatError(f"{manifest_path}: manifest missing key {key!r}")
    dims = manifest["dims"]
    if not (isinstance(dims, list) and len(dims) == 3):
        raise FormatError(f"{manifest_path}: dims must be [nx, ny, nz], got {dims!r}")
    nx, ny, nz = (int(n) for n in dims)
    timestamps = np.asarray(manifest["timestamps_s"], dtype=np.float64)
    if timestamps.ndim != 1 or timestamps.size < 1:
        raise FormatError(f"{manifest_path}: timestamps_s must be a non-empty list")
    if np.any(np.diff(timestamps) <= 0.0):
        raise FormatError(f"{manifest_path}: timestamps must be strictly increasing")

    blob_path = os.path.join(os.path.dirname(manifest_path), manifest["blob"])
    if not os.path.exists(blob_path):
        raise FormatError(f"missing blob file: {blob_path}")
    with open(blob_path, "rb") as fh:
        raw = fh.read()
    n_frames = timestamps.size
    expected = n_frames * nx * ny * nz * 4
    if len(raw) != expected:
        raise FormatError(
            f"{blob_path}: blob holds {len(raw)} bytes, dims say {expected}")
    frames = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    frames = frames.reshape(n_frames, nz, ny, nx)

    roi = manifest["roi"]
    if roi == "all":
        mask = np.ones((nz, ny, nx), dtype=bool)
    elif isinstance(roi, dict) and "rle" in roi:
        mask = _rle_decode(roi["rle"], nx * ny * nz).reshape(nz, ny, nx)
    else:
        raise FormatError(f"{manifest_path}: roi must be 'all' or {{'rle': [...]}}")
    return VoxelSeries((nx, ny, nz), tuple(float(s) for s in manifest["spacing_mm"]),
                       timestamps, frames, mask)


# -- scaling ---------------------------------------------------------------

@dataclass
class ScaleRecord:
    """Scales mapping the training box back to physical units.

    x_phys = X_s * x_hat, t_phys = t0_s + T_s * t_hat, C_phys = C_s * C_hat.
    """

    X_s_mm: float
    T_s_s: float
    C_s: float = 1.0
    t0_s: float = 0.0

    def __post_init__(self) -> None:
        for name in ("X_s_mm", "T_s_s", "C_s"):
            val = float(getattr(self, name))
            setattr(self, name, val)
            if not (val > 0.0 and math.isfinite(val)):
                raise FormatError(f"{name} must be positive and finite, got {val}")
        self.t0_s = float(self.t0_s)

    def to_dict(self) -> dict:
        return {"X_s_mm": self.X_s_mm, "T_s_s": self.T_s_s,
                "C_s": self.C_s, "t0_s": self.t0_s}

    @classmethod
    def from_dict(cls, d: dict) -> "ScaleRecord":
        return cls(d["X_s_mm"], d["T_s_s"], d.get("C_s", 1.0), d.get("t0_s", 0.0))

    @classmethod
    def identity(cls) -> "ScaleRecord":
        return cls(1.0, 1.0, 1.0, 0.0)


def normalize_intensity(series: VoxelSeries) -> tuple[VoxelSeries, float]:
    """Divide all frames by the ROI-wide maximum; returns (series, that maximum).

    Applying it twice is a no-op: the second call returns scale 1.0.
    """
    c_s = float(series.frames[:, series.roi_mask].max())
    if not (c_s > 0.0):
        raise FormatError(f"cannot normalize: ROI maximum is {c_s}")
    scaled = VoxelSeries(series.dims, series.spacing_mm, series.timestamps_s.copy(),
                         series.frames / c_s, series.roi_mask.copy())
    return scaled, c_s


def nondimensionalize(series: VoxelSeries, c_s: float = 1.0) -> ScaleRecord:
    """Scales that map the series onto unit boxes (largest extent, time span)."""
    extents = [series.extent_mm(a) for a in series.active_axes]
    if not extents:
        raise FormatError("series has no spatial extent")
    if series.n_frames < 2:
        raise FormatError("need at least two frames to scale time")
    x_s = max(extents)
    t_s = float(series.timestamps_s[-1] - series.timestamps_s[0])
    return ScaleRecord(x_s, t_s, c_s, float(series.timestamps_s[0]))


def nondimensionalize_coefficients(d_phys: float, v_phys, scale: ScaleRecord):
    """Physical (D, v) -> their values in the scaled coordinates."""
    d_hat = d_phys * scale.T_s_s / (scale.X_s_mm ** 2)
    v_hat = np.asarray(v_phys, dtype=np.float64) * scale.T_s_s / scale.X_s_mm
    return d_hat, v_hat


def redimensionalize(d_hat: float, v_hat, scale: ScaleRecord):
    """Scaled (D^, v^) -> physical units: D^ X_s^2 / T_s and v^ X_s / T_s."""
    d_phys = d_hat * (scale.X_s_mm ** 2) / scale.T_s_s
    v_phys = np.asarray(v_hat, dtype=np.float64) * scale.X_s_mm / scale.T_s_s
    return d_phys, v_phys


# -- sampling --------------------------------------------------------------

@dataclass
class SampleBatch:
    """Scaled training points: collocation rows and measured data rows.

    Point rows are [x_hat(, y_hat, z_hat), t_hat] with time last.
    """

    collocation: np.ndarray
    data_points: np.ndarray
    data_values: np.ndarray
    scale: ScaleRecord
    spatial_dim: int
    k_ade: int
    k_data: int
    n_frames: int
    with_replacement: bool = False

    def __post_init__(self) -> None:
        self.collocation = np.ascontiguousarray(self.collocation, dtype=np.float64)
        self.data_points = np.ascontiguousarray(self.data_points, dtype=np.float64)
        self.data_values = np.ascontiguousarray(self.data_values, dtype=np.float64)


def sample_points(series: VoxelSeries, k_ade: int, k_data: int, seed: int,
                  with_replacement: bool = False,
                  scale: ScaleRecord | None = None) -> SampleBatch:
    """Draw k_ade collocation and k_data data voxels per frame, uniformly over
    the ROI, and return them in scaled coordinates.

    Without replacement each per-frame draw is a subset of the ROI (and a
    permutation of it when k equals the ROI size), so the ROI must hold at
    least max(k_ade, k_data) voxels in that mode.  The same seed always
    yields the same batch.
    """
    if k_ade < 1 or k_data < 1:
        raise FormatError(f"need k_ade >= 1 and k_data >= 1, got ({k_ade}, {k_data})")
    n_roi = series.roi_size()
    if not with_replacement and max(k_ade, k_data) > n_roi:
        raise FormatError(
            f"ROI has {n_roi} voxels, cannot draw {max(k_ade, k_data)} without replacement")
    if scale is None:
        scale = nondimensionalize(series)
    axes = series.active_axes
    d = len(axes)
    roi_flat = np.flatnonzero(series.roi_mask)
    rng = np.random.default_rng(seed)

    def rows(flat_idx: np.ndarray, t_hat: float) -> np.ndarray:
        nx, ny, nz = series.dims
        iz, iy, ix = np.unravel_index(flat_idx, (nz, ny, nx))
        per_axis = {0: ix, 1: iy, 2: iz}
        out = np.empty((flat_idx.size, d + 1))
        for col, a in enumerate(axes):
            out[:, col] = per_axis[a] * series.spacing_mm[a] / scale.X_s_mm
        out[:, d] = t_hat
        return out

    colloc, dpts, dvals = [], [], []
    for s in range(series.n_frames):
        t_hat = (series.timestamps_s[s] - scale.t0_s) / scale.T_s_s
        idx = rng.choice(roi_flat, size=k_ade, replace=with_replacement)
        colloc.append(rows(idx, t_hat))
        idx = rng.choice(roi_flat, size=k_data, replace=with_replacement)
        dpts.append(rows(idx, t_hat))
        dvals.append(series.frames[s].ravel()[idx])
    return SampleBatch(np.concatenate(colloc), np.concatenate(dpts),
                       np.concatenate(dvals), scale, d, k_ade, k_data,
                       series.n_frames, with_replacement)


def prepare_batch(series: VoxelSeries, k_ade: int, k_data: int, seed: int,
                  with_replacement: bool = False) -> tuple[SampleBatch, VoxelSeries]:
    """Normalize, derive scales and sample in one go; returns (batch, normalized series)."""
    normalized, c_s = normalize_intensity(series)
    scale = nondimensionalize(normalized, c_s)
    batch = sample_points(normalized, k_ade, k_data, seed,
                          with_replacement=with_replacement, scale=scale)
    return batch, normalized


# -- synthetic datasets ----------------------------------------------------

@dataclass
class SynthSpec:
    """Recipe for a synthetic dataset built from the advected Gaussian.

    generator "analytic" samples the closed form at the frame times;
    generator "fd" integrates the reference solver from the first frame
    (fd_dt_s must then divide every frame interval).
    """

    dim: int
    shape: list[int]
    spacing_mm: list[float]
    d_mm2_s: float
    v_mm_s: list[float]
    x0_mm: list[float]
    frame_times_s: list[float]
    t_offset_s: float = 0.0
    sigma: float = 0.0
    seed: int = 0
    generator: str = "analytic"
    fd_dt_s: float | None = None
    boundary: str = "periodic"

    def __post_init__(self) -> None:
        if self.dim not in (1, 2, 3):
            raise FormatError(f"dim must be 1, 2 or 3, got {self.dim}")
        for name in ("shape", "v_mm_s", "x0_mm"):
            if len(getattr(self, name)) != self.dim:
                raise FormatError(f"{name} must have {self.dim} entries")
        if len(self.spacing_mm) != self.dim or any(not (s > 0.0) for s in self.spacing_mm):
            raise FormatError(f"spacing_mm must be {self.dim} positive lengths")
        if any(int(n) < 3 for n in self.shape):
            raise FormatError(f"every axis needs >= 3 voxels, got {self.shape}")
        if not (self.d_mm2_s > 0.0):
            raise FormatError(f"d_mm2_s must be positive, got {self.d_mm2_s}")
        times = np.asarray(self.frame_times_s, dtype=np.float64)
        if times.size < 2 or np.any(np.diff(times) <= 0.0):
            raise FormatError("frame_times_s must be >= 2 strictly increasing times")
        if not (times[0] + self.t_offset_s > 0.0):
            raise FormatError("first frame time plus t_offset_s must be positive")
        if self.sigma < 0.0:
            raise FormatError(f"sigma must be >= 0, got {self.sigma}")
        if self.generator not in ("analytic", "fd"):
            raise FormatError(f"generator must be 'analytic' or 'fd', got {self.generator!r}")
        if self.generator == "fd" and not (self.fd_dt_s and self.fd_dt_s > 0.0):
            raise FormatError("generator 'fd' needs a positive fd_dt_s")

    @classmethod
    def from_dict(cls, raw: dict) -> "SynthSpec":
        if not isinstance(raw, dict):
            raise FormatError("synthetic spec must be a JSON object")
        data = dict(raw)
        if "frame_times_min" in data:
            if "frame_times_s" in data:
                raise FormatError("give frame_times_s or frame_times_min, not both")
            data["frame_times_s"] = [60.0 * t for t in data.pop("frame_times_min")]
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise FormatError(f"unknown spec keys: {sorted(unknown)}")
        missing = {"dim", "shape", "spacing_mm", "d_mm2_s", "v_mm_s", "x0_mm",
                   "frame_times_s"} - set(data)
        if missing:
            raise FormatError(f"spec missing keys: {sorted(missing)}")
        return cls(**data)


def generate_synthetic(spec: SynthSpec) -> tuple[VoxelSeries, dict]:
    """Build a VoxelSeries per the spec plus a truth manifest of the inputs."""
    grid = Grid(tuple(spec.shape), tuple(spec.spacing_mm), boundary=spec.boundary)
    times = np.asarray(spec.frame_times_s, dtype=np.float64)
    if spec.generator == "analytic":
        fields = [gaussian_on_grid(grid, t, spec.d_mm2_s, spec.v_mm_s, spec.x0_mm,
                                   spec.t_offset_s) for t in times]
    else:
        dt = float(spec.fd_dt_s)
        c = gaussian_on_grid(grid, times[0], spec.d_mm2_s, spec.v_mm_s, spec.x0_mm,
                             spec.t_offset_s)
        fields = [c]
        for gap in np.diff(times):
            steps = int(round(gap / dt))
            if steps < 1 or abs(steps * dt - gap) > 1e-9 * max(1.0, gap):
                raise FormatError(
                    f"fd_dt_s={dt:g} does not divide the frame interval {gap:g}")
            c = solve_ade_fd(grid, c, spec.d_mm2_s, spec.v_mm_s, dt, steps)[-1]
            fields.append(c)
    stack = np.stack(fields)
    if spec.sigma > 0.0:
        rng = np.random.default_rng(spec.seed)
        stack = stack + rng.normal(0.0, spec.sigma, size=stack.shape)
        np.clip(stack, 0.0, None, out=stack)  # intensities stay nonnegative

    dims3 = tuple((list(spec.shape) + [1, 1])[:3])
    spacing3 = tuple((list(spec.spacing_mm) + [1.0, 1.0])[:3])
    frames = np.stack([field_to_frame(dims3, f) for f in stack])
    nx, ny, nz = dims3
    series = VoxelSeries(dims3, spacing3, times, frames,
                         np.ones((nz, ny, nx), dtype=bool))
    truth = {"D": spec.d_mm2_s, "v": list(spec.v_mm_s), "x0": list(spec.x0_mm),
             "sigma": spec.sigma, "generator": spec.generator,
             "t_offset": spec.t_offset_s}
    return series, truth
