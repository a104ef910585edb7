"""Per-pore shape descriptors and population statistics."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError, InsufficientPores

METRIC_COLUMNS = ("id", "x", "y", "z", "volume_um3", "anisotropy", "theta_z", "phi_xy", "nn_um")


@dataclass(frozen=True)
class PoreMetrics:
    volume_um3: float
    centroid: tuple
    eigvals: tuple
    anisotropy: float
    theta_z: float
    phi_xy: float
    nn_distance: float | None = None
    extent: int = 0


def inertia_tensor(pore):
    """Second central moment tensor of the voxel centres, in voxel^2 units."""
    p = np.asarray(pore.voxels, dtype=np.float64)
    if len(p) == 0:
        raise DataError("empty pore")
    d = p - p.mean(axis=0)
    s = d.T @ d
    return np.trace(s) * np.eye(3) - s


def _canonical_sign(vecs, tol=1e-12):
    for k in range(vecs.shape[1]):
        v = vecs[:, k]
        for c in v:
            if abs(c) > tol:
                if c < 0:
                    vecs[:, k] = -v
                break
    return vecs


def _jacobi(m, sweeps=50):
    a = np.array(m, dtype=np.float64)
    v = np.eye(3)
    for _ in range(sweeps):
        off = a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2
        if off <= 1e-30 * max(np.sum(a * a), 1e-300):
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            if a[p, q] == 0.0:
                continue
            theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
            t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
            c = 1.0 / math.sqrt(t * t + 1.0)
            s = t * c
            r = np.eye(3)
            r[p, p] = r[q, q] = c
            r[p, q] = s
            r[q, p] = -s
            a = r.T @ a @ r
            v = v @ r
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def _closed_form_eigvals(m):
    # trigonometric solution of the characteristic cubic
    q = np.trace(m) / 3.0
    b = m - q * np.eye(3)
    p = math.sqrt(np.sum(b * b) / 6.0)
    if p == 0.0:
        return np.array([q, q, q]), 0.0
    r = np.linalg.det(b / p) / 2.0
    r = min(1.0, max(-1.0, r))
    phi = math.acos(r) / 3.0
    e_max = q + 2 * p * math.cos(phi)
    e_min = q + 2 * p * math.cos(phi + 2 * math.pi / 3)
    e_mid = 3 * q - e_max - e_min
    return np.array([e_min, e_mid, e_max]), p


def _eigvec(m, lam):
    a = m - lam * np.eye(3)
    cands = [np.cross(a[0], a[1]), np.cross(a[0], a[2]), np.cross(a[1], a[2])]
    norms = [np.linalg.norm(c) for c in cands]
    k = int(np.argmax(norms))
    return cands[k] / norms[k]


def eig_sym3(m, gap_tol=1e-6):
    """Eigen-decomposition of a symmetric 3x3 matrix.

    Returns ascending eigenvalues and column eigenvectors, each with its
    first non-negligible component positive. Nearly degenerate spectra are
    handed to a Jacobi sweep, where the closed form loses accuracy.
    """
    m = np.asarray(m, dtype=np.float64)
    m = 0.5 * (m + m.T)
    w, p = _closed_form_eigvals(m)
    scale = max(abs(w).max(), 1e-300)
    if p == 0.0 or min(w[1] - w[0], w[2] - w[1]) < gap_tol * scale:
        w, v = _jacobi(m)
    else:
        v0 = _eigvec(m, w[0])
        v2 = _eigvec(m, w[2])
        v2 = v2 - (v2 @ v0) * v0
        v2 /= np.linalg.norm(v2)
        v1 = np.cross(v2, v0)
        v = np.column_stack([v0, v1, v2])
        # one Rayleigh-quotient pass tightens the eigenvalues
        w = np.einsum("ik,ij,jk->k", v, m, v)
    return w, _canonical_sign(v, tol=1e-9)


def anisotropy(eigvals):
    lo, hi = float(eigvals[0]), float(eigvals[-1])
    if hi <= 0.0:
        return 0.0
    return min(1.0, max(0.0, 1.0 - lo / hi))


def orientation(eigvecs, eigvals=None):
    """(theta_z, phi_xy) of the minimum-inertia axis, in degrees."""
    v = np.asarray(eigvecs)[:, 0]
    theta = math.degrees(math.acos(min(1.0, abs(float(v[2])))))
    if math.hypot(v[0], v[1]) < 1e-9:
        return theta, 0.0
    phi = math.degrees(math.atan2(v[1], v[0])) % 180.0
    if phi >= 180.0 - 1e-9:
        phi = 0.0
    return theta, phi


def nn_distances(centroids):
    """Distance from each centroid to its nearest other centroid."""
    pts = np.asarray(centroids, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 2:
        raise InsufficientPores(f"need at least 2 centroids, got {len(pts)}")
    d, _ = cKDTree(pts).query(pts, k=2)
    return d[:, 1]


def centroid_um(pore):
    c = pore.voxels.mean(axis=0) + np.asarray(pore.origin) + 0.5
    return tuple(float(x) for x in c * pore.voxel_size)


def metrics_for(pore):
    w, v = eig_sym3(inertia_tensor(pore))
    w = np.maximum(w, 0.0)
    theta, phi = orientation(v, w)
    return PoreMetrics(
        volume_um3=pore.n_voxels * pore.voxel_size**3,
        centroid=centroid_um(pore),
        eigvals=tuple(float(x) for x in w),
        anisotropy=anisotropy(w),
        theta_z=theta,
        phi_xy=phi,
        extent=max(pore.extent),
    )


def population_metrics(pores):
    """Metrics for every pore, with nearest-neighbour distances when possible."""
    ms = [metrics_for(p) for p in pores]
    if len(ms) >= 2:
        nn = nn_distances([m.centroid for m in ms])
        ms = [replace(m, nn_distance=float(d)) for m, d in zip(ms, nn)]
    return ms


def metrics_table(metrics):
    """Dict of column arrays, convenient for binning and comparison."""
    return {
        "x": np.array([m.centroid[0] for m in metrics]),
        "y": np.array([m.centroid[1] for m in metrics]),
        "z": np.array([m.centroid[2] for m in metrics]),
        "volume": np.array([m.volume_um3 for m in metrics]),
        "anisotropy": np.array([m.anisotropy for m in metrics]),
        "theta_z": np.array([m.theta_z for m in metrics]),
        "phi_xy": np.array([m.phi_xy for m in metrics]),
        "nn_distance": np.array([np.nan if m.nn_distance is None else m.nn_distance for m in metrics]),
    }


def write_metrics_csv(path, metrics):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for i, m in enumerate(metrics):
            nn = "" if m.nn_distance is None else repr(m.nn_distance)
            w.writerow([i, *map(repr, m.centroid), repr(m.volume_um3), repr(m.anisotropy),
                        repr(m.theta_z), repr(m.phi_xy), nn])
    return path


def read_metrics_csv(path):
    """Read a metrics table back. Eigenvalues are not stored and come back as NaN."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(PoreMetrics(
                volume_um3=float(row["volume_um3"]),
                centroid=(float(row["x"]), float(row["y"]), float(row["z"])),
                eigvals=(math.nan,) * 3,
                anisotropy=float(row["anisotropy"]),
                theta_z=float(row["theta_z"]),
                phi_xy=float(row["phi_xy"]),
                nn_distance=float(row["nn_um"]) if row["nn_um"] else None,
            ))
    return out
