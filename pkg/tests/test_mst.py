import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import circular_conv2d
from porosynth import mst
from porosynth.errors import EnsembleTooSmall, ScaleTooLarge, SizeMismatch


@pytest.fixture(scope="module")
def bank32():
    return mst.build_filter_bank(4, 4, 32)


@pytest.fixture(scope="module")
def bank64():
    return mst.build_filter_bank(4, 4, 64)


def band_noise(n, lo, hi, seed):
    rng = np.random.default_rng(seed)
    w = 2 * np.pi * np.fft.fftfreq(n)
    r = np.hypot(w[:, None], w[None, :])
    return np.fft.ifft2(np.fft.fft2(rng.normal(size=(n, n))) * ((r >= lo) & (r <= hi))).real


def test_path_counts(bank32):
    assert bank32.psi.shape == (16, 32, 32)
    assert len(bank32.paths1) == 16
    assert len(bank32.paths2) == 96
    assert all(p[2] > p[0] for p in bank32.paths2)


@pytest.mark.parametrize("J,L", [(2, 3), (3, 8), (4, 4)])
def test_path_count_formula(J, L):
    b = mst.build_filter_bank(J, L, 16)
    assert len(b.paths1) == J * L
    assert len(b.paths2) == L * L * J * (J - 1) // 2


def test_zero_mean_filters(bank64):
    peak = np.abs(bank64.psi).max(axis=(1, 2))
    assert np.all(np.abs(bank64.psi[:, 0, 0]) <= 1e-6 * peak)
    spatial = np.fft.ifft2(bank64.psi)
    assert np.all(np.abs(spatial.sum(axis=(1, 2))) <= 1e-6 * np.abs(spatial).max(axis=(1, 2)))
    assert bank64.phi[0, 0] == 1.0


@pytest.mark.parametrize("shape", [32, 64, (32, 128), 256])
def test_littlewood_paley_bound(shape):
    b = mst.build_filter_bank(4, 4, shape)
    lp = b.littlewood_paley()[mst._nyquist_disk(b.shape)]
    assert lp.min() >= 0.5 and lp.max() <= 1.05


def test_wavelets_peak_at_their_scale(bank64):
    w = 2 * np.pi * np.fft.fftfreq(64)
    r = np.hypot(w[:, None], w[None, :])
    for j in range(4):
        resp = np.abs(bank64.psi[j * 4:(j + 1) * 4]).sum(axis=0)
        peak_r = r.flat[np.argmax(resp)]
        assert abs(np.log2(peak_r / (0.75 * np.pi / 2**j))) < 1.0


def test_scale_too_large():
    with pytest.raises(ScaleTooLarge):
        mst.build_filter_bank(6, 4, 32)


def test_size_mismatch(bank32):
    with pytest.raises(SizeMismatch):
        mst.scatter2d(np.zeros((16, 16)), bank32)


@pytest.mark.parametrize("c", [0.0, 1.0, -3.7, 1e3])
def test_constant_image_annihilated(bank32, c):
    co = mst.scatter2d(np.full((32, 32), c), bank32)
    assert all(np.all(g == 0.0) for g in co.grids())
    np.testing.assert_allclose(co.zeroth, c, rtol=1e-12, atol=1e-12)


def test_shift_by_averaging_scale(bank64):
    x = band_noise(64, 0.3, 2.5, 1)
    a = mst.scatter2d(x, bank64)
    b = mst.scatter2d(np.roll(x, (16, -16), (0, 1)), bank64)
    for ga, gb in zip(a.grids(), b.grids()):
        np.testing.assert_allclose(np.roll(ga, (1, -1), (0, 1)), gb, rtol=1e-3, atol=1e-3 * np.abs(ga).max())
    np.testing.assert_allclose(mst.log_coeffs(a), mst.log_coeffs(b), rtol=1e-3)


def test_single_pixel_matches_spatial_oracle(bank32):
    x = np.zeros((32, 32))
    x[5, 9] = 1.0
    co = mst.scatter2d(x, bank32)
    phi_s = np.fft.ifft2(bank32.phi)
    for j in range(4):
        e_fast = e_slow = 0.0
        for r in range(4):
            psi_s = np.fft.ifft2(bank32.psi[j * 4 + r])
            u1 = np.abs(circular_conv2d(x - x[0, 0], psi_s))
            s1 = circular_conv2d(u1, phi_s).real[::16, ::16]
            e_slow += np.sum(s1**2)
            e_fast += np.sum(co.order1[(j, r)] ** 2)
        assert e_fast == pytest.approx(e_slow, rel=1e-6)


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("band", [(np.pi / 8, np.pi / 2), (np.pi / 4, np.pi), (np.pi / 8, np.pi)])
def test_energy_capture(bank64, seed, band):
    x = band_noise(64, *band, seed)
    assert mst.scatter2d(x, bank64).energy() >= 0.9 * np.sum(x**2)


def test_energy_never_exceeds_input(bank64):
    for seed in range(3):
        x = band_noise(64, 0.05, 3.0, seed) + 0.3
        assert mst.scatter2d(x, bank64).energy() <= np.sum(x**2) * 1.05


def _full_vector(co):
    return np.concatenate([co.zeroth.ravel()] + [g.ravel() for g in co.grids()]) * 2**co.J


def test_nonexpansive(bank32):
    rng = np.random.default_rng(3)
    for _ in range(10):
        x, y = rng.normal(size=(2, 32, 32))
        y = x + rng.uniform(0.01, 1.0) * y
        d_s = np.linalg.norm(_full_vector(mst.scatter2d(x, bank32)) - _full_vector(mst.scatter2d(y, bank32)))
        assert d_s <= 1.05 * np.linalg.norm(x - y)


def test_deterministic_bitwise(bank32):
    x = np.random.default_rng(0).normal(size=(32, 32))
    a = mst.log_coeffs(mst.scatter2d(x, bank32))
    b = mst.log_coeffs(mst.scatter2d(x.copy(), bank32))
    assert a.tobytes() == b.tobytes()


def test_rectangular_image():
    b = mst.build_filter_bank(4, 4, (32, 64))
    co = mst.scatter2d(np.random.default_rng(0).normal(size=(32, 64)), b)
    assert co.order1[(0, 0)].shape == (2, 4)


def test_log_coeffs_rules(bank32):
    co = mst.scatter2d(np.random.default_rng(0).normal(size=(32, 32)), bank32)
    assert mst.log_coeffs(co).shape == (112,)
    flat = mst.ScatteringCoeffs(4, 4, co.zeroth, {p: np.full((2, 2), 0.5) for p in co.order1},
                                {p: np.full((2, 2), 0.5) for p in co.order2})
    np.testing.assert_allclose(mst.log_coeffs(flat), np.log(0.5))
    dead = mst.scatter2d(np.ones((32, 32)), bank32)
    np.testing.assert_array_equal(mst.log_coeffs(dead), np.log(1e-12))


def test_covariance_matches_two_pass():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(20, 7))
    mu = sum(a) / len(a)
    ref = sum(np.outer(v - mu, v - mu) for v in a) / (len(a) - 1)
    np.testing.assert_allclose(mst.covariance(list(a)), ref, atol=1e-10)
    w = np.linalg.eigvalsh(mst.covariance(a))
    assert w.min() >= -1e-8 * w.sum()


def test_covariance_degenerate_cases():
    v = np.arange(5.0)
    np.testing.assert_array_equal(mst.covariance([v, v, v]), np.zeros((5, 5)))
    k = mst.covariance([np.array([1.0, 0, 0]), np.array([0, 1.0, 0])])
    assert np.linalg.matrix_rank(k) <= 1
    with pytest.raises(EnsembleTooSmall):
        mst.covariance([v])


def test_precision_identical_is_zero():
    v = np.array([1.0, -2.0, 3.0])
    assert mst.precision([v] * 4) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(EnsembleTooSmall):
        mst.precision([v])


def test_precision_closed_form():
    rng = np.random.default_rng(1)
    d, s, m = 50, 0.3, rng.normal(size=50)
    a = m + s * rng.normal(size=(20000, d))
    expect = d * s**2 / (d * s**2 + m @ m)
    assert mst.precision(a) == pytest.approx(expect, rel=0.02)


def test_separation_identical_deterministic():
    a = np.random.default_rng(0).normal(size=(1, 10)).repeat(6, axis=0)
    assert mst.separation(a, a.copy()) == pytest.approx(0.0, abs=1e-14)


def test_separation_iid_is_twice_precision():
    rng = np.random.default_rng(2)
    m = rng.normal(size=30)
    a = m + 0.5 * rng.normal(size=(4000, 30))
    b = m + 0.5 * rng.normal(size=(4000, 30))
    s, p, ph = mst.separation(a, b), mst.precision(a), mst.precision(b)
    assert s / (p + ph) == pytest.approx(1.0, rel=0.05)


def test_separation_sample_copy_of_random_ensemble():
    # with product-of-means cross terms, copying a random ensemble gives 2P, not 0
    a = np.random.default_rng(3).normal(size=(50, 8)) + 2
    assert mst.separation(a, a) == pytest.approx(2 * mst.precision(a), rel=1e-12)


def test_separation_disjoint_clusters():
    rng = np.random.default_rng(4)
    a = 1 + 0.1 * rng.normal(size=(500, 10))
    b = -1 + 0.1 * rng.normal(size=(500, 10))
    assert mst.separation(a, b) > 2 * max(mst.precision(a), mst.precision(b))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12), st.integers(1, 6), st.integers(0, 2**31))
def test_precision_bounds(g, d, seed):
    a = np.random.default_rng(seed).normal(size=(g, d)) + 0.1
    p = mst.precision(a)
    assert -1e-12 <= p <= 1 + 1e-12
    assert mst.separation(a, a) >= -1e-12


def test_csv_exports(tmp_path, bank32):
    co = mst.scatter2d(np.random.default_rng(0).normal(size=(32, 32)), bank32)
    lines = mst.write_coeff_csv(tmp_path / "c.csv", co).read_text().splitlines()
    assert lines[0] == "order,j1,r1,j2,r2,mean,log_mean"
    assert len(lines) == 113
    rose = mst.write_rose_csv(tmp_path / "r.csv", co).read_text().splitlines()
    assert len(rose) == 17 and rose[0] == "angle_deg,scale,value"
