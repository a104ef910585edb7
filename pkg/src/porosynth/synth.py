"""Microcanonical synthesis of surface-roughness maps.

A white-noise image is driven by gradient descent until the covariance of
its log scattering coefficients, taken over an ensemble of periodic
translations, matches that of the target.

Every translated copy has the same global coefficient means, so each
ensemble member is read through a fixed window (the leading quarter of the
image by default). The member statistics are then window means of
``S_p``, computed for all members at once from one full-resolution
scattering pass: a window mean is a correlation of the path map with a box,
evaluated at the member's offset.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import mst
from .errors import ConfigError, Diverged, EnsembleTooSmall, TooManyMembers
from .surface import resize_array, savgol, split_means

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SynthConfig:
    G: int = 64
    iterations: int = 500
    J: int = 4
    L: int = 4
    lr: float = 0.05
    lr_final: float = 0.005
    tol: float = 1e-8
    side: int = 256
    window_frac: float = 0.5
    mean_weight: float = 0.1
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        if self.G < 2:
            raise EnsembleTooSmall(f"ensemble size G must be at least 2, got {self.G}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be at least 1, got {self.iterations}")
        if not 0 < self.window_frac <= 1:
            raise ConfigError(f"window_frac must be in (0, 1], got {self.window_frac}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")


DESK = SynthConfig(side=64)


@dataclass
class SynthRun:
    losses: list
    image: np.ndarray
    target_K: np.ndarray
    target_mean: np.ndarray
    offsets: np.ndarray
    best_iteration: int = 0
    surface: object = None
    meta: dict = field(default_factory=dict)


def ensemble_offsets(shape, G, seed):
    """G distinct circular shifts, identity first, the rest drawn without replacement."""
    m, n = shape
    total = m * n
    if G < 2:
        raise EnsembleTooSmall(f"ensemble size G must be at least 2, got {G}")
    if G > total:
        raise TooManyMembers(f"G={G} exceeds the {total} distinct shifts of a {m}x{n} image")
    rng = np.random.default_rng(seed)
    flat = 1 + rng.choice(total - 1, size=G - 1, replace=False)
    flat = np.concatenate([[0], flat])
    return np.stack([flat // n, flat % n], axis=1)


def make_ensemble(image, G, seed):
    x = np.asarray(image)
    return [np.roll(x, tuple(o), axis=(0, 1)) for o in ensemble_offsets(x.shape, G, seed)]


def window_shape(shape, frac):
    return tuple(max(1, int(round(s * frac))) for s in shape)


def window_filter(bank, frac):
    """Frequency response of low-pass followed by a window average."""
    m, n = bank.shape
    wm, wn = window_shape(bank.shape, frac)
    box = np.zeros(bank.shape)
    box[:wm, :wn] = 1.0 / (wm * wn)
    return bank.phi * np.conj(np.fft.fft2(box))


def member_log_coeffs(x, bank, offsets, h, floor=mst.LOG_FLOOR):
    """(G, P) Tensor of windowed log coefficients, one row per ensemble member."""
    u1, u2 = mst.propagate(x, bank)
    m, n = bank.shape
    ix = (-offsets[:, 0]) % m
    iy = (-offsets[:, 1]) % n
    rows = []
    for u in (u1, u2):
        c = mst.lowpass(u, h)
        rows.append(ad.index(c, (slice(None), ix, iy)))
    means = ad.concat(rows, axis=0)  # (P, G)
    return ad.transpose(ad.log(ad.clip_min(means, floor)))


def naive_member_log_coeffs(image, bank, offsets, frac, floor=mst.LOG_FLOOR):
    """Reference path: roll, scatter at full resolution, average the window."""
    wm, wn = window_shape(bank.shape, frac)
    out = []
    for o in offsets:
        xr = ad.Tensor(np.roll(image, tuple(o), axis=(0, 1)), dtype=np.float64)
        u1, u2 = mst.propagate(xr, bank)
        maps = np.concatenate([mst.lowpass(u1, bank.phi).data, mst.lowpass(u2, bank.phi).data])
        out.append(np.log(np.maximum(maps[:, :wm, :wn].mean(axis=(1, 2)), floor)))
    return np.array(out)


def _cov_tensor(sx):
    g = sx.shape[0]
    center = ad.Tensor(np.eye(g) - 1.0 / g, dtype=sx.dtype)
    d = ad.matmul(center, sx)
    k = ad.matmul(ad.transpose(d), d)
    return ad.mul(k, 1.0 / (g - 1)), ad.mean(sx, axis=0)


def ensemble_stats(image, bank, offsets, h):
    sx = member_log_coeffs(ad.Tensor(image, dtype=np.float64), bank, offsets, h).data
    return np.cov(sx, rowvar=False, ddof=1), sx.mean(axis=0), sx


def mst_cov_loss(x, bank, offsets, h, target_K, target_mean=None, mean_weight=0.0):
    """||K_x - K_target||_F^2, plus an optional weighted squared mean gap."""
    sx = member_log_coeffs(x, bank, offsets, h)
    k, mu = _cov_tensor(sx)
    diff = ad.sub(k, ad.Tensor(target_K, dtype=k.dtype))
    loss = ad.tsum(ad.mul(diff, diff))
    if target_mean is not None and mean_weight:
        dm = ad.sub(mu, ad.Tensor(target_mean, dtype=mu.dtype))
        loss = ad.add(loss, ad.mul(ad.tsum(ad.mul(dm, dm)), float(mean_weight)))
    return loss


def _prepare(values, side):
    work = resize_array(np.asarray(values, dtype=np.float64), (side, side))
    resid, _, _ = split_means(work)
    return resid


def synthesize_image(target, config, init=None):
    """Run the descent on a demeaned square ``target``; returns a SynthRun."""
    target = np.asarray(target, dtype=np.float64)
    dtype = np.float32 if config.dtype == "float32" else np.float64
    bank = mst.build_filter_bank(config.J, config.L, target.shape)
    offsets = ensemble_offsets(target.shape, config.G, config.seed)
    h = window_filter(bank, config.window_frac)
    scale = float(target.std()) or 1.0
    K_t, mu_t, _ = ensemble_stats(target / scale, bank, offsets, h)
    rng = np.random.default_rng(config.seed)
    z0 = rng.normal(size=target.shape) if init is None else np.asarray(init, np.float64) / scale
    z = ad.Tensor(z0, requires_grad=True, dtype=dtype)
    state = ad.AdamState(lr=config.lr)
    losses, best, best_z, best_it = [], math.inf, z.data.copy(), 0
    for it in range(config.iterations):
        z.zero_grad()
        loss = mst_cov_loss(z, bank, offsets, h, K_t, mu_t, config.mean_weight)
        val = float(loss.data)
        if not math.isfinite(val):
            raise Diverged(f"loss became non-finite at iteration {it}")
        losses.append(val)
        if val < best:
            best, best_z, best_it = val, z.data.copy(), it
        if val <= config.tol:
            break
        loss.backward()
        state.lr = ad.cosine_lr(it, config.iterations, config.lr, config.lr_final)
        ad.adam_step([z], state)
    log.info("synthesis: %d iterations, loss %.3g -> %.3g", len(losses), losses[0], best)
    return SynthRun(losses, best_z.astype(np.float64) * scale, K_t, mu_t, offsets, best_it)


def synthesize(target, config=DESK, init=None):
    """Synthesize a new SurfaceMap statistically matched to ``target``.

    The target is resampled to ``config.side`` squared and demeaned; the
    result is resampled back, demeaned, and the target's row and column
    means are added back so the nominal radius profile is kept.
    """
    shape = target.values.shape
    work = _prepare(target.values, config.side)
    init_w = None if init is None else _prepare(init.values if hasattr(init, "values") else init, config.side)
    run = synthesize_image(work, config, init_w)
    back = resize_array(run.image, shape)
    resid, _, _ = split_means(back)
    _, rows, cols = split_means(target.values)
    run.surface = target.with_values(resid + rows + cols)
    return run


def postprocess(surface, window_um=100.0, order=4):
    return savgol(surface, window_um, order)


def generate_surface(target, config=DESK, window_um=100.0):
    run = synthesize(target, config)
    run.surface = postprocess(run.surface, window_um)
    return run
