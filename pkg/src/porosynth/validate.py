"""Comparison of generated parts against ground truth.

Univariate: two-sample KS plus aligned 64-bin histograms for the six pore
metrics. Bivariate: 32x32 joint histograms, Gaussian-smoothed before the
L1 distance so that the distance measures shape rather than per-cell
counting noise. Structure: MST coefficients of axis projections, and the
precision / separation table over ensembles of parts.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage, stats

from . import mst
from .errors import DataError
from .metrics import metrics_table
from .surface import resize_array
from .voxel import PORE

METRICS = ("x", "y", "volume", "anisotropy", "theta_z", "nn_distance")
UNI_BINS = 64
BI_BINS = 32
# smoothing of the joint histograms, in bins
BI_SMOOTH = 2.0
CONTOUR_LEVELS = tuple(round(0.05 + 0.1 * k, 2) for k in range(10))
DEFAULT_PAIRS = tuple(combinations(METRICS, 2))


def _column(metrics, name):
    col = metrics_table(metrics)[name] if not isinstance(metrics, dict) else np.asarray(metrics[name], float)
    return col[np.isfinite(col)]


def _edges(a, b, bins):
    both = np.concatenate([a, b])
    lo, hi = (float(both.min()), float(both.max())) if both.size else (0.0, 1.0)
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    return np.linspace(lo, hi, bins + 1)


def _normed(h):
    s = h.sum()
    return h / s if s > 0 else h


@dataclass
class Univariate:
    ks: float
    pvalue: float
    edges: np.ndarray
    gt_hist: np.ndarray
    gen_hist: np.ndarray


def univariate(a, b, bins=UNI_BINS):
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.size == 0 or b.size == 0:
        raise DataError("KS comparison needs two non-empty samples")
    r = stats.ks_2samp(a, b)
    e = _edges(a, b, bins)
    return Univariate(float(r.statistic), float(r.pvalue), e,
                      _normed(np.histogram(a, e)[0].astype(float)), _normed(np.histogram(b, e)[0].astype(float)))


def univariate_report(gt_metrics, gen_metrics, names=METRICS):
    return {n: univariate(_column(gt_metrics, n), _column(gen_metrics, n)) for n in names}


@dataclass
class Bivariate:
    l1: float
    x_edges: np.ndarray
    y_edges: np.ndarray
    gt_hist: np.ndarray
    gen_hist: np.ndarray
    contours: dict = field(default_factory=dict)


def hist2d(x, y, xe, ye, smooth=BI_SMOOTH):
    h = np.histogram2d(x, y, bins=[xe, ye])[0]
    if smooth:
        h = ndimage.gaussian_filter(h, smooth, mode="constant")
    return _normed(h)


def contour_levels(h, levels=CONTOUR_LEVELS):
    """Absolute level values at fractions of the maximum, and the mass above each."""
    top = float(h.max())
    return {lv: (lv * top, float(h[h >= lv * top].sum()) if top > 0 else 0.0) for lv in levels}


def bivariate(ax, ay, bx, by, bins=BI_BINS, smooth=BI_SMOOTH):
    xe = _edges(np.asarray(ax, float), np.asarray(bx, float), bins)
    ye = _edges(np.asarray(ay, float), np.asarray(by, float), bins)
    ha = hist2d(ax, ay, xe, ye, smooth)
    hb = hist2d(bx, by, xe, ye, smooth)
    return Bivariate(float(np.abs(ha - hb).sum()), xe, ye, ha, hb, contour_levels(ha))


def _pair_columns(metrics, p, q):
    t = metrics if isinstance(metrics, dict) else metrics_table(metrics)
    a, b = np.asarray(t[p], float), np.asarray(t[q], float)
    ok = np.isfinite(a) & np.isfinite(b)
    return a[ok], b[ok]


def bivariate_report(gt_metrics, gen_metrics, pairs=DEFAULT_PAIRS):
    out = {}
    for p, q in pairs:
        ax, ay = _pair_columns(gt_metrics, p, q)
        bx, by = _pair_columns(gen_metrics, p, q)
        out[(p, q)] = bivariate(ax, ay, bx, by)
    return out


def _pow2(n):
    return 1 << max(0, int(math.ceil(math.log2(max(n, 1)))))


def projection(volume, axis):
    """Pore occupancy summed along ``axis`` and scaled to [0, 1]."""
    data = volume.data if hasattr(volume, "data") else np.asarray(volume)
    p = (data == PORE).sum(axis=axis).astype(np.float64)
    top = p.max()
    return p / top if top > 0 else p


def padded_projection(volume, axis, J=4):
    p = projection(volume, axis)
    shape = tuple(max(_pow2(s), 2 ** (J + 1)) for s in p.shape)
    out = np.zeros(shape)
    out[:p.shape[0], :p.shape[1]] = p
    return out


_BANKS = {}


def _bank(J, L, shape):
    key = (J, L, shape)
    if key not in _BANKS:
        _BANKS[key] = mst.build_filter_bank(J, L, shape)
    return _BANKS[key]


def projection_mst(volume, axis, J=4, L=4):
    img = padded_projection(volume, axis, J)
    return mst.scatter2d(img, _bank(J, L, img.shape))


def surface_mst(surface, side=64, J=4, L=4):
    v = surface.values if hasattr(surface, "values") else np.asarray(surface)
    img = resize_array(v - v.mean(), (side, side))
    return mst.scatter2d(img, _bank(J, L, img.shape))


def precision_separation_table(gt_parts, gen_parts, axes=(0, 1, 2), gt_surfaces=None, gen_surfaces=None,
                               J=4, L=4):
    """Rows of (name, P, P_hat, S) over projection axes and, optionally, surfaces."""
    names = "xyz"
    rows = []
    for ax in axes:
        a = [mst.log_coeffs(projection_mst(v, ax, J, L)) for v in gt_parts]
        b = [mst.log_coeffs(projection_mst(v, ax, J, L)) for v in gen_parts]
        rows.append((f"projection_{names[ax]}", mst.precision(a), mst.precision(b), mst.separation(a, b)))
    if gt_surfaces is not None and gen_surfaces is not None:
        a = [mst.log_coeffs(surface_mst(s, J=J, L=L)) for s in gt_surfaces]
        b = [mst.log_coeffs(surface_mst(s, J=J, L=L)) for s in gen_surfaces]
        rows.append(("surface", mst.precision(a), mst.precision(b), mst.separation(a, b)))
    return rows


@dataclass
class ComparisonReport:
    univariate: dict
    bivariate: dict
    projections: dict = field(default_factory=dict)  # axis -> (gt coeffs, gen coeffs)
    table: list = field(default_factory=list)

    def summary(self):
        return {
            "ks": {k: v.ks for k, v in self.univariate.items()},
            "bivariate_l1": {f"{p}|{q}": v.l1 for (p, q), v in self.bivariate.items()},
            "precision_separation": [
                {"name": n, "P": p, "P_hat": ph, "S": s} for n, p, ph, s in self.table],
        }

    def passes(self, ks_max=0.15, l1_max=0.3):
        return (all(v.ks <= ks_max for v in self.univariate.values())
                and all(v.l1 <= l1_max for v in self.bivariate.values()))


def compare(gt_metrics, gen_metrics, gt_volume=None, gen_volume=None, pairs=DEFAULT_PAIRS, J=4, L=4):
    rep = ComparisonReport(univariate_report(gt_metrics, gen_metrics), bivariate_report(gt_metrics, gen_metrics, pairs))
    if gt_volume is not None and gen_volume is not None:
        for ax in range(3):
            rep.projections[ax] = (projection_mst(gt_volume, ax, J, L), projection_mst(gen_volume, ax, J, L))
    return rep


# -- report bundle ------------------------------------------------------------

def _plot_hist(path, edges, curves, size=(320, 200)):
    """Step-line quick look of one or more normalized histograms."""
    w, h = size
    img = Image.new("RGB", size, "white")
    d = ImageDraw.Draw(img)
    top = max((float(c.max()) for c in curves), default=0.0) or 1.0
    n = len(edges) - 1
    colours = [(30, 30, 30), (200, 40, 40), (40, 90, 200)]
    for c, col in zip(curves, colours):
        pts = []
        for i in range(n):
            y = h - 10 - (h - 20) * c[i] / top
            pts += [(10 + (w - 20) * i / n, y), (10 + (w - 20) * (i + 1) / n, y)]
        d.line(pts, fill=col, width=1)
    d.rectangle([10, 10, w - 10, h - 10], outline=(160, 160, 160))
    img.save(path)


def _plot_map(path, a):
    a = np.asarray(a, float)
    top = a.max()
    g = np.zeros(a.shape, np.uint8) if top <= 0 else (255 * (1 - a / top)).astype(np.uint8)
    Image.fromarray(g.T[::-1]).resize((a.shape[0] * 6, a.shape[1] * 6), Image.NEAREST).save(path)


def write_report(directory, report, plots=True):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, u in report.univariate.items():
        with open(d / f"hist_{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lo", "hi", "gt", "gen"])
            for i in range(len(u.gt_hist)):
                w.writerow([repr(u.edges[i]), repr(u.edges[i + 1]), repr(u.gt_hist[i]), repr(u.gen_hist[i])])
        if plots:
            _plot_hist(d / f"hist_{name}.png", u.edges, [u.gt_hist, u.gen_hist])
    for (p, q), b in report.bivariate.items():
        with open(d / f"pair_{p}_{q}_contours.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fraction_of_max", "level", "mass_above"])
            for lv, (val, mass) in b.contours.items():
                w.writerow([lv, repr(val), repr(mass)])
        np.savetxt(d / f"pair_{p}_{q}_gt.csv", b.gt_hist, delimiter=",")
        np.savetxt(d / f"pair_{p}_{q}_gen.csv", b.gen_hist, delimiter=",")
        if plots:
            _plot_map(d / f"pair_{p}_{q}.png", np.concatenate([b.gt_hist, b.gen_hist], axis=0))
    for ax, (cg, cn) in report.projections.items():
        mst.write_coeff_csv(d / f"mst_axis{ax}_gt.csv", cg)
        mst.write_coeff_csv(d / f"mst_axis{ax}_gen.csv", cn)
        if plots:
            lg, ln = mst.log_coeffs(cg), mst.log_coeffs(cn)
            e = np.arange(len(lg) + 1, dtype=float)
            lo = min(lg.min(), ln.min())
            _plot_hist(d / f"mst_axis{ax}.png", e, [lg - lo, ln - lo])
    (d / "summary.json").write_text(json.dumps(report.summary(), indent=1))
    return d / "summary.json"
