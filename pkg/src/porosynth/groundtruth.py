"""Synthetic ground-truth parts: a rough cylinder with ellipsoidal pores.

The generator stands in for measured CT volumes. Its manifest records
every generating parameter, so downstream fits can be checked against the
truth rather than against another estimate.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .errors import ConfigError
from .surface import SurfaceMap, boundary_mask
from .voxel import EXTERIOR, PORE, SOLID, VoxelVolume

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GroundTruthConfig:
    dims: tuple = (96, 96, 192)
    voxel_size: float = 4.0
    radius_frac: float = 0.36
    roughness_um: float = 6.0
    modes_theta: int = 12
    modes_z: int = 6
    n_pores: int = 500
    # areal pore density grows as (r / R) ** density_alpha
    density_alpha: float = 1.0
    r_eq_range: tuple = (1.4, 3.2)  # equivalent-sphere radius, voxels
    aspect_min: float = 0.45
    max_semi_axis: float = 6.0
    margin: int = 2
    max_tries: int = 50
    seed: int = 0

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise ConfigError(f"dims must be three sides of at least 8 voxels, got {self.dims}")
        if not 0 < self.radius_frac < 0.5:
            raise ConfigError("radius_frac must be in (0, 0.5)")
        if self.n_pores < 0:
            raise ConfigError("n_pores must be non-negative")
        lo, hi = self.r_eq_range
        if not 0 < lo <= hi:
            raise ConfigError("r_eq_range must be increasing and positive")

    @property
    def nominal_radius_um(self):
        return self.radius_frac * min(self.dims[:2]) * self.voxel_size


def rough_surface(config, rng, n_theta=256):
    """Band-limited radial deviation map (n_z, n_theta) with the requested rms."""
    nz = config.dims[2]
    theta = 2 * np.pi * np.arange(n_theta) / n_theta
    z = np.arange(nz) / nz
    vals = np.zeros((nz, n_theta))
    for kt in range(1, config.modes_theta + 1):
        for kz in range(0, config.modes_z + 1):
            amp = rng.normal() / (1.0 + 0.3 * (kt + kz))
            ph_t, ph_z = rng.uniform(0, 2 * np.pi, 2)
            vals += amp * np.cos(kt * theta[None, :] + ph_t) * np.cos(2 * np.pi * kz * z[:, None] + ph_z)
    vals *= config.roughness_um / max(vals.std(), 1e-12)
    return vals


def ellipsoid_voxels(center, semi_axes, rotation):
    """Integer voxel indices whose centres lie inside the ellipsoid."""
    c = np.asarray(center, dtype=np.float64)
    reach = int(math.ceil(max(semi_axes))) + 1
    lo = np.floor(c).astype(int) - reach
    axes = [np.arange(lo[k], lo[k] + 2 * reach + 2) for k in range(3)]
    g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    local = (g - c) @ rotation  # components along the principal axes
    inside = np.sum((local / np.asarray(semi_axes)) ** 2, axis=1) <= 1.0
    return g[inside]


def _sample_shape(config, rng):
    lo, hi = config.r_eq_range
    while True:
        r_eq = math.exp(rng.uniform(math.log(lo), math.log(hi)))
        q1, q2 = rng.uniform(config.aspect_min, 1.0, 2)
        # a >= b >= c with a*b*c = r_eq^3
        a = r_eq / (q1 * q1 * q2) ** (1 / 3)
        axes = (a, a * q1, a * q1 * q2)
        if axes[0] <= config.max_semi_axis:
            return axes


def _sample_center(config, rng, r_max_vox, centre_xy):
    r = r_max_vox * rng.uniform() ** (1.0 / (2.0 + config.density_alpha))
    t = rng.uniform(0, 2 * np.pi)
    z = rng.uniform(config.margin + config.max_semi_axis, config.dims[2] - config.margin - config.max_semi_axis)
    return np.array([centre_xy[0] + r * math.cos(t), centre_xy[1] + r * math.sin(t), z])


@dataclass
class GroundTruthPart:
    volume: VoxelVolume
    surface: SurfaceMap
    pores: list  # dicts of generating parameters
    config: GroundTruthConfig
    rejections: int = 0

    def manifest(self):
        return {
            "config": asdict(self.config),
            "nominal_radius_um": self.surface.nominal_radius,
            "n_pores": len(self.pores),
            "rejections": self.rejections,
            "pores": self.pores,
        }


def generate_part(config=GroundTruthConfig()):
    rng = np.random.default_rng(config.seed)
    nx, ny, nz = config.dims
    vs = config.voxel_size
    dev = rough_surface(config, rng)
    centre_um = (nx * vs / 2, ny * vs / 2)
    surface = SurfaceMap(dev, config.nominal_radius_um, vs, np.tile(centre_um, (nz, 1)))
    half_box = min(nx, ny) * vs / 2
    if config.nominal_radius_um + dev.max() > half_box:
        raise ConfigError(f"rough boundary reaches {config.nominal_radius_um + dev.max():.1f} um, beyond the "
                          f"{half_box:.1f} um half-width of {config.dims}; lower radius_frac or roughness_um")
    inside = boundary_mask(surface, config.dims, vs)
    data = np.where(inside, SOLID, EXTERIOR).astype(np.uint8)
    # pores keep a margin from the lowest point of the rough boundary
    r_min_vox = (config.nominal_radius_um + dev.min()) / vs
    r_max_vox = r_min_vox - config.max_semi_axis - config.margin
    if r_max_vox <= 0:
        raise ConfigError("part radius too small for the requested pore sizes")
    centre_xy = (nx / 2 - 0.5, ny / 2 - 0.5)
    occupied = np.zeros(config.dims, dtype=bool)
    pores, rejections = [], 0
    struct = ndimage.generate_binary_structure(3, 3)
    while len(pores) < config.n_pores:
        for _ in range(config.max_tries):
            axes = _sample_shape(config, rng)
            rot = Rotation.random(random_state=rng).as_matrix()
            center = _sample_center(config, rng, r_max_vox, centre_xy)
            vox = ellipsoid_voxels(center, axes, rot)
            if len(vox) < 8:
                rejections += 1
                continue
            if vox.min() < 0 or np.any(vox.max(axis=0) >= config.dims):
                rejections += 1
                continue
            idx = tuple(vox.T)
            if not inside[idx].all():
                rejections += 1
                continue
            # keep pores separate under 26-connectivity: no occupied voxel in the dilated footprint
            lo = np.maximum(vox.min(axis=0) - 1, 0)
            hi = np.minimum(vox.max(axis=0) + 2, config.dims)
            sl = tuple(slice(a, b) for a, b in zip(lo, hi))
            local = np.zeros(occupied[sl].shape, dtype=bool)
            local[tuple((vox - lo).T)] = True
            if np.any(ndimage.binary_dilation(local, struct) & occupied[sl]):
                rejections += 1
                continue
            occupied[idx] = True
            data[idx] = PORE
            pores.append({
                "center_vox": center.tolist(),
                "semi_axes_vox": list(axes),
                "axes": rot.T.tolist(),
                "n_voxels": int(len(vox)),
            })
            break
        else:
            log.warning("gave up placing pore %d after %d tries", len(pores), config.max_tries)
            break
    return GroundTruthPart(VoxelVolume(data, vs), surface, pores, config, rejections)


def save_part(directory, part, name="part"):
    from .surface import save_surface
    from .voxel import save_volume

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_volume(d / name, part.volume)
    save_surface(d / f"{name}_surface", part.surface)
    (d / f"{name}_manifest.json").write_text(json.dumps(part.manifest(), indent=1))
    return d / f"{name}.json"


def expected_radial_fraction(r0, r1, r_max, alpha):
    """Share of pore centres with radius in [r0, r1) under the density law."""
    e = 2.0 + alpha
    r0, r1 = np.clip([r0, r1], 0, r_max)
    return (r1**e - r0**e) / r_max**e
