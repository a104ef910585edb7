"""2D Mallat scattering transform and ensemble statistics of its coefficients.

Filters live in the frequency domain at image resolution and every
convolution is periodic. Path order is fixed: order-1 paths ``(j, r)`` in
j-major order, then order-2 paths ``(j1, r1, j2, r2)`` with ``j2 > j1`` in
lexicographic order.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import EnsembleTooSmall, ScaleTooLarge, SizeMismatch

XI0 = 3 * np.pi / 4
SIGMA0 = 0.8
# low-pass width; wide enough that the coarsest wavelet keeps its own band
SIGMA_PHI = 0.6
SLANT = 0.5
LOG_FLOOR = 1e-12
# largest amplitude boost applied by the Littlewood-Paley normalisation
MAX_LP_GAIN = 8.0


def _centered(n):
    u = np.arange(n, dtype=np.float64)
    return np.where(u >= n / 2, u - n, u)


def _gabor_pair(shape, sigma, theta, xi, slant, periods=2):
    """Periodised Gabor atom and its Gaussian envelope on the grid."""
    m, n = shape
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    curv = rot @ np.diag([1.0, slant**2]) @ rot.T / (2 * sigma**2)
    u0, v0 = _centered(m), _centered(n)
    gab = np.zeros(shape, dtype=np.complex128)
    env = np.zeros(shape)
    for a in range(-periods, periods + 1):
        x = (u0 + a * m)[:, None]
        for b in range(-periods, periods + 1):
            y = (v0 + b * n)[None, :]
            g = np.exp(-(curv[0, 0] * x * x + 2 * curv[0, 1] * x * y + curv[1, 1] * y * y))
            env += g
            if xi:
                gab += g * np.exp(1j * xi * (c * x + s * y))
    return gab, env


def morlet(shape, sigma, theta, xi, slant=SLANT):
    """Zero-mean Morlet atom in space: Gabor minus a multiple of its envelope."""
    gab, env = _gabor_pair(shape, sigma, theta, xi, slant)
    beta = gab.sum() / env.sum()
    return gab - beta * env


def _flip(h):
    """h(-w) on the FFT grid."""
    return np.roll(h[..., ::-1, ::-1], 1, axis=(-2, -1))


def _nyquist_disk(shape):
    wx = 2 * np.pi * np.fft.fftfreq(shape[0])
    wy = 2 * np.pi * np.fft.fftfreq(shape[1])
    return np.hypot(wx[:, None], wy[None, :]) <= np.pi


@dataclass(frozen=True)
class FilterBank:
    J: int
    L: int
    shape: tuple
    psi: np.ndarray  # (J*L, M, N) complex frequency responses
    phi: np.ndarray  # (M, N) real frequency response, phi[0, 0] == 1

    @property
    def image_side(self):
        return self.shape[0]

    @property
    def paths1(self):
        return [(j, r) for j in range(self.J) for r in range(self.L)]

    @property
    def paths2(self):
        return [(j1, r1, j2, r2) for j1, r1 in self.paths1 for j2, r2 in self.paths1 if j2 > j1]

    def index(self, j, r):
        return j * self.L + r

    def littlewood_paley(self):
        """|phi(w)|^2 + 1/2 sum_psi |psi(w)|^2 + |psi(-w)|^2 on the FFT grid."""
        w = 0.5 * np.sum(np.abs(self.psi) ** 2 + np.abs(_flip(self.psi)) ** 2, axis=0)
        return np.abs(self.phi) ** 2 + w


def build_filter_bank(J=4, L=4, image_side=256):
    """Morlet wavelets at scales 2^j and angles r*pi/L plus a Gaussian low-pass.

    ``image_side`` may be an int or an (M, N) pair. The wavelet responses
    are rescaled pointwise so the Littlewood-Paley sum equals one inside the
    Nyquist disk, which makes the bank a tight frame for band-limited images.
    """
    shape = (image_side, image_side) if np.isscalar(image_side) else tuple(int(s) for s in image_side)
    if J < 1 or L < 1:
        raise ScaleTooLarge(f"J and L must be positive, got J={J}, L={L}")
    if 2**J > min(shape):
        raise ScaleTooLarge(f"2^J = {2**J} exceeds image side {min(shape)}")
    psi = np.empty((J * L,) + shape, dtype=np.complex128)
    for j in range(J):
        for r in range(L):
            atom = morlet(shape, SIGMA0 * 2**j, r * np.pi / L, XI0 / 2**j)
            psi[j * L + r] = np.fft.fft2(atom)
    psi[:, 0, 0] = 0.0
    _, env = _gabor_pair(shape, SIGMA_PHI * 2**J, 0.0, 0.0, 1.0)
    phi = np.fft.fft2(env / env.sum()).real
    phi[0, 0] = 1.0
    w = 0.5 * np.sum(np.abs(psi) ** 2 + np.abs(_flip(psi)) ** 2, axis=0)
    room = np.clip(1.0 - phi**2, 0.0, None)
    gain = np.sqrt(np.divide(room, w, out=np.ones_like(w), where=w > 1e-300))
    gain = np.minimum(gain, MAX_LP_GAIN)
    # keep the frame symmetric so |psi(w)|, |psi(-w)| see the same gain
    gain = np.minimum(gain, _flip(gain))
    psi *= gain
    psi[:, 0, 0] = 0.0
    return FilterBank(J, L, shape, psi, phi)


@dataclass(frozen=True)
class ScatteringCoeffs:
    J: int
    L: int
    zeroth: np.ndarray
    order1: dict
    order2: dict

    def paths(self):
        return list(self.order1) + list(self.order2)

    def grids(self):
        return [self.order1[p] for p in self.order1] + [self.order2[p] for p in self.order2]

    def means(self):
        return np.array([g.mean() for g in self.grids()])

    def energy(self):
        """Coefficient energy, rescaled for the 2^J subsampling."""
        f = float(4**self.J)
        return f * (np.sum(self.zeroth**2) + sum(np.sum(g**2) for g in self.grids()))


def _check_image(x, bank):
    if tuple(x.shape) != bank.shape:
        raise SizeMismatch(f"image shape {tuple(x.shape)} does not match filter bank {bank.shape}")


def propagate(x, bank):
    """Modulus maps before the final low-pass, as Tensors.

    Returns ``(U1, U2)`` of shapes (J*L, M, N) and (n_paths2, M, N). The
    image is referenced to its first pixel first; the wavelets have zero
    mean, so this only guarantees that constant images give exact zeros.
    """
    _check_image(x, bank)
    xc = ad.sub(x, ad.index(x, (0, 0)))
    u1 = ad.modulus(ad.conv2d_complex_freq(xc, bank.psi))
    pairs = [(bank.index(j1, r1), bank.index(j2, r2)) for j1, r1, j2, r2 in bank.paths2]
    u2 = ad.modulus(ad.conv2d_complex_freq(u1, bank.psi, pairs=pairs))
    return u1, u2


def lowpass(u, h, real=True):
    """Apply one frequency response ``h`` to every map of a (P, M, N) Tensor."""
    return ad.reshape(ad.conv2d_complex_freq(u, h[None], real_output=real), u.shape)


def scatter2d(image, bank):
    """Zeroth-, first- and second-order scattering coefficients of ``image``."""
    x = np.asarray(image, dtype=np.float64)
    _check_image(x, bank)
    t = ad.Tensor(x, dtype=np.float64)
    u1, u2 = propagate(t, bank)
    s = 2**bank.J
    s0 = np.fft.ifft2(np.fft.fft2(x) * bank.phi).real[::s, ::s]
    s1 = lowpass(u1, bank.phi).data[:, ::s, ::s]
    s2 = lowpass(u2, bank.phi).data[:, ::s, ::s]
    order1 = {p: s1[k] for k, p in enumerate(bank.paths1)}
    order2 = {p: s2[k] for k, p in enumerate(bank.paths2)}
    return ScatteringCoeffs(bank.J, bank.L, s0, order1, order2)


def log_coeffs(coeffs, floor=LOG_FLOOR):
    """Spatial mean per path, then log, order 1 before order 2."""
    return np.log(np.maximum(coeffs.means(), floor))


def _stack(ensemble, what):
    a = np.asarray([np.asarray(v, dtype=np.float64).ravel() for v in ensemble])
    if a.ndim != 2 or len(a) < 2:
        raise EnsembleTooSmall(f"{what} needs at least 2 vectors, got {len(a)}")
    return a


def covariance(ensemble):
    """Unbiased sample covariance across ensemble members (rows)."""
    a = _stack(ensemble, "covariance")
    return np.atleast_2d(np.cov(a, rowvar=False, ddof=1))


def _moments(a):
    return np.mean(np.sum(a * a, axis=1)), a.mean(axis=0)


def precision(samples):
    """(mean |SX|^2 - |mean SX|^2) / mean |SX|^2."""
    a = _stack(samples, "precision")
    m2, _ = _moments(a)
    # same numerator, shifted by one member so identical samples give exactly 0
    d2, dmu = _moments(a - a[0])
    return float((d2 - dmu @ dmu) / m2)


def separation(x_samples, xhat_samples):
    a = _stack(x_samples, "separation")
    b = _stack(xhat_samples, "separation")
    ma, _ = _moments(a)
    mb, _ = _moments(b)
    c = a[0]
    da, dmua = _moments(a - c)
    db, dmub = _moments(b - c)
    return float((da + db - 2 * dmua @ dmub) / (0.5 * (ma + mb)))


def write_coeff_csv(path, coeffs, floor=LOG_FLOOR):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    means = coeffs.means()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["order", "j1", "r1", "j2", "r2", "mean", "log_mean"])
        for p, m in zip(coeffs.paths(), means):
            row = [1, p[0], p[1], "", ""] if len(p) == 2 else [2, *p]
            w.writerow(row + [repr(float(m)), repr(math.log(max(m, floor)))])
    return path


def write_rose_csv(path, coeffs):
    """Order-1 means as (angle in degrees, scale j, value) rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["angle_deg", "scale", "value"])
        for (j, r), g in coeffs.order1.items():
            w.writerow([180.0 * r / coeffs.L, j, repr(float(g.mean()))])
    return path
