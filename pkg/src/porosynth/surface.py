"""Unrolled radial-deviation maps of the part boundary.

A map stores ``values[z, k]``, the outward deviation (um) of the boundary
from the nominal radius at slice ``z`` and angle ``2*pi*k/n_theta``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.signal import savgol_filter

from .errors import DataError, DoesNotFit, EmptySlice, WindowTooSmall
from .voxel import EXTERIOR, SOLID, VoxelVolume


@dataclass(frozen=True)
class SurfaceMap:
    values: np.ndarray
    nominal_radius: float
    z_spacing: float
    centers: np.ndarray | None = None  # (n_z, 2) axis centre per slice, um

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or min(v.shape) < 4:
            raise DataError(f"surface map must be at least 4x4, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise DataError("surface map values must be finite")
        if not self.nominal_radius > 0:
            raise DataError("nominal radius must be positive")
        object.__setattr__(self, "values", v)
        if self.centers is not None:
            c = np.asarray(self.centers, dtype=np.float64).reshape(-1, 2)
            if len(c) != v.shape[0]:
                raise DataError("need one axis centre per z row")
            object.__setattr__(self, "centers", c)

    @property
    def n_z(self):
        return self.values.shape[0]

    @property
    def n_theta(self):
        return self.values.shape[1]

    @property
    def theta_spacing_um(self):
        """Arc length per angular sample at the nominal radius."""
        return 2 * math.pi * self.nominal_radius / self.n_theta

    def with_values(self, values):
        return replace(self, values=values)


def _part_mask(slice_data):
    return slice_data != EXTERIOR


def unroll(volume, n_theta=256, step=0.25):
    """Cast rays from each slice centroid and record the boundary radius.

    The boundary along a ray is the outermost point where the bilinearly
    interpolated part indicator crosses 1/2.
    """
    nx, ny, nz = volume.dims
    vs = volume.voxel_size
    theta = 2 * np.pi * np.arange(n_theta) / n_theta
    r_max = math.hypot(nx, ny)
    radii = np.arange(0.0, r_max + step, step)
    cos, sin = np.cos(theta), np.sin(theta)
    out = np.empty((nz, n_theta))
    centers = np.empty((nz, 2))
    for z in range(nz):
        mask = _part_mask(volume.data[:, :, z]).astype(np.float64)
        if not mask.any():
            raise EmptySlice(f"slice z={z} contains no solid voxels")
        cx, cy = ndimage.center_of_mass(mask)
        centers[z] = ((cx + 0.5) * vs, (cy + 0.5) * vs)
        px = cx + radii[None, :] * cos[:, None]
        py = cy + radii[None, :] * sin[:, None]
        f = ndimage.map_coordinates(mask, [px.ravel(), py.ravel()], order=1, mode="constant", cval=0.0)
        f = f.reshape(n_theta, len(radii))
        inside = f >= 0.5
        # outermost inside sample followed by an outside one
        last = len(radii) - 1 - np.argmax(inside[:, ::-1], axis=1)
        last = np.minimum(last, len(radii) - 2)
        rows = np.arange(n_theta)
        f0, f1 = f[rows, last], f[rows, last + 1]
        frac = np.where(f0 > f1, (f0 - 0.5) / np.maximum(f0 - f1, 1e-12), 0.0)
        out[z] = (radii[last] + step * np.clip(frac, 0.0, 1.0)) * vs
    nominal = float(out.mean())
    return SurfaceMap(out - nominal, nominal, vs, centers)


def _odd_window(window_um, spacing, n):
    w = int(math.ceil(window_um / spacing))
    if w % 2 == 0:
        w += 1
    if w > n:
        w = n if n % 2 else n - 1
    return w


def savgol(surface, window_um=100.0, order=4):
    """Separable Savitzky-Golay smoothing: periodic in theta, edge-replicated in z."""
    wt = _odd_window(window_um, surface.theta_spacing_um, surface.n_theta)
    wz = _odd_window(window_um, surface.z_spacing, surface.n_z)
    if wt <= order or wz <= order:
        raise WindowTooSmall(
            f"window {window_um} um gives ({wz}, {wt}) samples, must exceed order {order}")
    v = savgol_filter(surface.values, wt, order, axis=1, mode="wrap")
    v = savgol_filter(v, wz, order, axis=0, mode="nearest")
    return surface.with_values(v)


def split_means(values):
    """Return (residual, row_means, col_means) with values = residual + rows + cols."""
    rows = values.mean(axis=1, keepdims=True)
    r = values - rows
    cols = r.mean(axis=0, keepdims=True)
    return r - cols, rows, cols


def demean(surface):
    return surface.with_values(split_means(surface.values)[0])


def _lerp_axis(values, pos, axis, periodic):
    n = values.shape[axis]
    if periodic:
        pos = np.mod(pos, n)
        i0 = np.floor(pos).astype(int)
        t = pos - i0
        i0 %= n
        i1 = (i0 + 1) % n
    else:
        pos = np.clip(pos, 0, n - 1)
        i0 = np.minimum(np.floor(pos).astype(int), max(n - 2, 0))
        i1 = np.minimum(i0 + 1, n - 1)
        t = pos - i0
    a = np.take(values, i0, axis=axis)
    b = np.take(values, i1, axis=axis)
    shape = [1] * values.ndim
    shape[axis] = -1
    t = t.reshape(shape)
    return a * (1 - t) + b * t


def resize_array(values, shape):
    """Bilinear resampling; rows align end-to-end, columns are periodic."""
    nz, nt = values.shape
    mz, mt = shape
    if (nz, nt) == (mz, mt):
        return values.copy()
    zpos = np.linspace(0, nz - 1, mz) if mz > 1 else np.zeros(1)
    tpos = np.arange(mt) * (nt / mt)
    return _lerp_axis(_lerp_axis(values, zpos, 0, False), tpos, 1, True)


def resize(surface, to=(256, 256)):
    nz, _ = surface.values.shape
    v = resize_array(surface.values, to)
    length = surface.z_spacing * (nz - 1)
    dz = length / (to[0] - 1) if to[0] > 1 and nz > 1 else surface.z_spacing
    centers = None
    if surface.centers is not None:
        zpos = np.linspace(0, nz - 1, to[0])
        centers = _lerp_axis(surface.centers, zpos, 0, False)
    return SurfaceMap(v, surface.nominal_radius, dz, centers)


def boundary_mask(surface, dims, voxel_size):
    """Boolean (nx, ny, nz) mask of voxels inside the re-rolled boundary."""
    nx, ny, nz = dims
    values = surface.values
    if surface.n_z != nz:
        values = _lerp_axis(values, np.linspace(0, surface.n_z - 1, nz), 0, False)
    if surface.centers is not None and len(surface.centers) == nz:
        centers = surface.centers
    elif surface.centers is not None:
        centers = _lerp_axis(surface.centers, np.linspace(0, surface.n_z - 1, nz), 0, False)
    else:
        centers = np.tile([nx * voxel_size / 2, ny * voxel_size / 2], (nz, 1))
    r_out = surface.nominal_radius + values.max(axis=1)
    if (np.any(centers[:, 0] - r_out < 0) or np.any(centers[:, 0] + r_out > nx * voxel_size)
            or np.any(centers[:, 1] - r_out < 0) or np.any(centers[:, 1] + r_out > ny * voxel_size)):
        raise DoesNotFit(f"boundary of max radius {r_out.max():.1f} um does not fit in {dims} voxels")
    gx = (np.arange(nx) + 0.5) * voxel_size
    gy = (np.arange(ny) + 0.5) * voxel_size
    n_theta = values.shape[1]
    mask = np.empty(dims, dtype=bool)
    for z in range(nz):
        dx = gx[:, None] - centers[z, 0]
        dy = gy[None, :] - centers[z, 1]
        r = np.hypot(dx, dy)
        th = np.mod(np.arctan2(dy, dx), 2 * np.pi) * (n_theta / (2 * np.pi))
        bound = surface.nominal_radius + _lerp_axis(values[z][None, :], th.ravel(), 1, True).reshape(r.shape)
        mask[:, :, z] = r <= bound
    return mask


def reroll(surface, dims, voxel_size):
    """Stack the map back into a solid cylinder with exterior outside it."""
    mask = boundary_mask(surface, dims, voxel_size)
    return VoxelVolume(np.where(mask, SOLID, EXTERIOR).astype(np.uint8), voxel_size)


def save_surface(path, surface, preview=True):
    """JSON header plus little-endian float32 raw grid (theta fastest)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "n_theta": surface.n_theta,
        "n_z": surface.n_z,
        "nominal_radius": surface.nominal_radius,
        "z_spacing": surface.z_spacing,
        "dtype": "float32",
        "endianness": "little",
        "order": "theta-fastest",
        "raw": path.with_suffix(".raw").name,
    }
    if surface.centers is not None:
        header["centers"] = surface.centers.tolist()
    path.with_suffix(".json").write_text(json.dumps(header))
    path.with_suffix(".raw").write_bytes(surface.values.astype("<f4").tobytes())
    if preview:
        save_preview(path.with_suffix(".png"), surface.values)
    return path.with_suffix(".json")


def load_surface(path):
    path = Path(path)
    hp = path.with_suffix(".json")
    if not hp.exists():
        raise DataError(f"surface header not found: {hp}")
    h = json.loads(hp.read_text())
    raw = np.frombuffer((hp.parent / h["raw"]).read_bytes(), dtype="<f4")
    values = raw.reshape(h["n_z"], h["n_theta"]).astype(np.float64)
    return SurfaceMap(values, h["nominal_radius"], h["z_spacing"], h.get("centers"))


def save_preview(path, values):
    from PIL import Image

    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    img = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    Image.fromarray((img * 255).round().astype(np.uint8)).save(path)
