"""Binned conditional model of pore properties over the part cross-section.

The square enclosing the part cross-section is cut into ``N_b x N_b``
bins. Each bin keeps a pore rate per unit length along z and the sorted
property samples of its pores; new pores are drawn by Poisson counts and
inverse-transform sampling on the linearly interpolated empirical CDFs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, NoPores

PROPERTIES = ("volume", "anisotropy", "theta_z")
MAX_LOCATION_TRIES = 1000


@dataclass(frozen=True)
class PartGeometry:
    """Circular cross-section (centre and radius in um) and axial extent."""

    center: tuple
    radius: float
    z0: float
    length: float

    def __post_init__(self):
        if not (self.radius > 0 and self.length > 0):
            raise ConfigError("part radius and length must be positive")

    @property
    def diameter(self):
        return 2 * self.radius

    def inside(self, x, y):
        return np.hypot(np.asarray(x) - self.center[0], np.asarray(y) - self.center[1]) <= self.radius

    @classmethod
    def from_surface(cls, surface, z0=0.0):
        """Interior circle from a SurfaceMap: mean axis and nominal radius."""
        centre = (0.0, 0.0) if surface.centers is None else tuple(surface.centers.mean(axis=0))
        return cls(centre, surface.nominal_radius, z0, surface.z_spacing * surface.n_z)


@dataclass(frozen=True)
class PoreSpec:
    volume: float
    anisotropy: float
    theta_z: float
    location: tuple
    bin: tuple


@dataclass
class SpatialModel:
    n_bins: int
    geometry: PartGeometry
    rates: np.ndarray  # (N_b, N_b) pores per um of z
    samples: dict  # (i, j) -> {prop: sorted array}; bins without pores are absent
    global_samples: dict  # prop -> sorted array
    interior: np.ndarray  # (N_b, N_b) bool, bin meets the interior circle

    @property
    def bin_width(self):
        return self.geometry.diameter / self.n_bins

    @property
    def origin(self):
        c, r = self.geometry.center, self.geometry.radius
        return (c[0] - r, c[1] - r)

    def bin_of(self, x, y):
        w = self.bin_width
        ox, oy = self.origin
        i = np.clip(np.floor((np.asarray(x) - ox) / w).astype(int), 0, self.n_bins - 1)
        j = np.clip(np.floor((np.asarray(y) - oy) / w).astype(int), 0, self.n_bins - 1)
        return i, j

    def bin_bounds(self, b):
        w = self.bin_width
        ox, oy = self.origin
        return (ox + b[0] * w, ox + (b[0] + 1) * w), (oy + b[1] * w, oy + (b[1] + 1) * w)

    def properties(self, b):
        return self.samples.get(tuple(int(v) for v in b), self.global_samples)

    def expected_total(self, length=None):
        return float(self.rates.sum() * (self.geometry.length if length is None else length))


def _interior_bins(geometry, n_bins, sub=8):
    """Bins whose area meets the interior circle, by a sub-sampled grid test."""
    w = geometry.diameter / n_bins
    ox = geometry.center[0] - geometry.radius
    oy = geometry.center[1] - geometry.radius
    t = (np.arange(sub) + 0.5) / sub
    xs = ox + (np.arange(n_bins)[:, None] + t[None, :]) * w  # (n_bins, sub)
    ys = oy + (np.arange(n_bins)[:, None] + t[None, :]) * w
    d = np.hypot(xs[:, None, :, None] - geometry.center[0], ys[None, :, None, :] - geometry.center[1])
    return (d <= geometry.radius).any(axis=(2, 3))


def fit(metrics, geometry, n_bins=30):
    """Bin pores by centroid and record per-bin rates and sorted properties."""
    if n_bins < 1:
        raise ConfigError(f"n_bins must be at least 1, got {n_bins}")
    if len(metrics) == 0:
        raise NoPores("cannot fit a spatial model without pores")
    x = np.array([m.centroid[0] for m in metrics])
    y = np.array([m.centroid[1] for m in metrics])
    props = {
        "volume": np.array([m.volume_um3 for m in metrics]),
        "anisotropy": np.array([m.anisotropy for m in metrics]),
        "theta_z": np.array([m.theta_z for m in metrics]),
    }
    model = SpatialModel(n_bins, geometry, np.zeros((n_bins, n_bins)), {},
                         {k: np.sort(v) for k, v in props.items()}, _interior_bins(geometry, n_bins))
    bi, bj = model.bin_of(x, y)
    counts = np.zeros((n_bins, n_bins))
    np.add.at(counts, (bi, bj), 1)
    model.rates = counts / geometry.length
    flat = bi * n_bins + bj
    for f in np.unique(flat):
        sel = flat == f
        model.samples[(int(f // n_bins), int(f % n_bins))] = {k: np.sort(v[sel]) for k, v in props.items()}
    return model


def sample_counts(model, window_dz, rng):
    """Poisson pore counts per bin for a window of length ``window_dz`` um."""
    return rng.poisson(model.rates * window_dz)


def inverse_cdf(sorted_values, u):
    """Inverse of the empirical CDF with linear interpolation between order statistics."""
    v = np.asarray(sorted_values, dtype=np.float64)
    if len(v) == 1:
        return np.full(np.shape(u), v[0])
    return np.interp(u, np.linspace(0.0, 1.0, len(v)), v)


def sample_location(model, b, z_range, rng):
    (x0, x1), (y0, y1) = model.bin_bounds(b)
    z = rng.uniform(*z_range)
    for _ in range(MAX_LOCATION_TRIES):
        x, y = rng.uniform(x0, x1), rng.uniform(y0, y1)
        if model.geometry.inside(x, y):
            return (float(x), float(y), float(z))
    return (0.5 * (x0 + x1), 0.5 * (y0 + y1), float(z))


def sample_spec(model, b, rng, z_range=None):
    b = (int(b[0]), int(b[1]))
    props = model.properties(b)
    vals = {k: float(inverse_cdf(props[k], rng.uniform())) for k in PROPERTIES}
    if z_range is None:
        z_range = (model.geometry.z0, model.geometry.z0 + model.geometry.length)
    loc = sample_location(model, b, z_range, rng)
    return PoreSpec(vals["volume"], vals["anisotropy"], vals["theta_z"], loc, b)


def sample_window(model, z_range, rng):
    """Pore specs for one axial window, bins visited in row-major order."""
    counts = sample_counts(model, z_range[1] - z_range[0], rng)
    specs = []
    for i, j in zip(*np.nonzero(counts)):
        specs.extend(sample_spec(model, (i, j), rng, z_range) for _ in range(counts[i, j]))
    return specs


def density_map(x, y, geometry, grid=30):
    """Normalized 2D histogram of pore centres over the bounding square."""
    c, r = geometry.center, geometry.radius
    h, _, _ = np.histogram2d(x, y, bins=grid, range=[[c[0] - r, c[0] + r], [c[1] - r, c[1] + r]])
    s = h.sum()
    return h / s if s else h


def save_model(path, model):
    doc = {
        "n_bins": model.n_bins,
        "geometry": {"center": list(model.geometry.center), "radius": model.geometry.radius,
                     "z0": model.geometry.z0, "length": model.geometry.length},
        "rates": model.rates.tolist(),
        "interior": model.interior.astype(int).tolist(),
        "global": {k: v.tolist() for k, v in model.global_samples.items()},
        "bins": [{"i": b[0], "j": b[1], **{k: v.tolist() for k, v in s.items()}}
                 for b, s in sorted(model.samples.items())],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc))
    return path


def load_model(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"spatial model not found: {path}")
    doc = json.loads(path.read_text())
    g = doc["geometry"]
    geometry = PartGeometry(tuple(g["center"]), g["radius"], g["z0"], g["length"])
    samples = {(b["i"], b["j"]): {k: np.array(b[k]) for k in PROPERTIES} for b in doc["bins"]}
    return SpatialModel(doc["n_bins"], geometry, np.array(doc["rates"], dtype=np.float64), samples,
                        {k: np.array(v) for k, v in doc["global"].items()},
                        np.array(doc["interior"], dtype=bool))


def bin_rate_zscores(model, counts, length):
    """(observed - expected) / sqrt(expected) per bin with nonzero rate."""
    lam = model.rates * length
    live = lam > 0
    return (np.asarray(counts)[live] - lam[live]) / np.sqrt(lam[live])

