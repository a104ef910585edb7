import numpy as np
import pytest

from oracles import flood_fill_count
from porosynth import autodiff as ad
from porosynth import gan
from porosynth.errors import AcceptanceTooLow, ConfigError, EmptyDataset, ShapeMismatch
from porosynth.metrics import metrics_for
from porosynth.voxel import Pore, PORE, VoxelVolume


@pytest.fixture(scope="module")
def desk_gen():
    return gan.Generator("desk", seed=0)


def test_layer_tables_double_and_halve():
    for profile, (side, f) in gan.PROFILES.items():
        g = gan.generator_layers(profile)
        assert g[0][:2] == (100, 512 // f) and g[-1][1] == 2
        s = g[0][2]  # the first layer maps 1^3 to its kernel size
        for _, _, k, st, p in g[1:]:
            s2 = (s - 1) * st - 2 * p + k
            assert s2 == 2 * s
            s = s2
        assert s == side
        d = gan.discriminator_layers(profile)
        assert [c for _, c, _, _, _ in d] == [16 // f, 32 // f, 64 // f, 128 // f, 1]
        s = side
        for _, _, k, st, p in d:
            s = (s + 2 * p - k) // st + 1
        assert s == 1


def test_full_profile_output_shape():
    g = gan.Generator("full", seed=0)
    out = g(np.random.default_rng(0).normal(size=(1, 100)), training=False).data
    assert out.shape == (1, 2, 64, 64, 64)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)
    p = gan.Discriminator("full", seed=0)(out.astype(np.float32)).data
    assert p.shape == (1,) and 0 < p[0] < 1


def test_desk_generator_forward(desk_gen):
    out = desk_gen(np.random.default_rng(0).normal(size=(3, 100)), training=True).data
    assert out.shape == (3, 2, 16, 16, 16)
    assert np.all(out > 0) and np.all(out < 1)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


def test_generate_deterministic(desk_gen):
    z = np.random.default_rng(1).normal(size=(2, 100))
    a, b = gan.generate(desk_gen, z), gan.generate(desk_gen, z)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-6)


def test_latent_shape_checked(desk_gen):
    with pytest.raises(ShapeMismatch):
        desk_gen(np.zeros((2, 99)))


def test_discriminator_outputs_in_unit_interval():
    d = gan.Discriminator("desk", seed=0)
    rng = np.random.default_rng(2)
    for x in (rng.uniform(size=(4, 2, 16, 16, 16)), 100 * rng.normal(size=(2, 2, 16, 16, 16)),
              np.zeros((1, 2, 16, 16, 16))):
        p = d(x.astype(np.float32)).data
        assert p.shape == (len(x),) and np.all(p > 0) and np.all(p < 1)
    with pytest.raises(ShapeMismatch):
        d(np.zeros((1, 2, 8, 8, 8)))


def test_config_validation():
    with pytest.raises(ConfigError):
        gan.TrainConfig(profile="huge")
    with pytest.raises(ConfigError):
        gan.TrainConfig(lr=0)
    with pytest.raises(EmptyDataset):
        gan.train([], gan.TrainConfig(epochs=1))
    with pytest.raises(ShapeMismatch):
        gan.train([np.zeros((8, 8, 8), bool)], gan.TrainConfig(epochs=1))


def test_train_smoke_and_determinism():
    rng = np.random.default_rng(3)
    cubes = []
    for _ in range(8):
        c = np.zeros((16, 16, 16), bool)
        c[6:9, 6:10, 7:9] = True
        cubes.append(c)
    cfg = gan.TrainConfig(epochs=1, batch=4, seed=5)
    seen = []
    a = gan.train(cubes, cfg, on_epoch=lambda e, r: seen.append(e))
    b = gan.train(cubes, cfg)
    assert seen == [0] and len(a.d_loss) == 1 and np.isfinite(a.d_loss[0])
    for k in a.generator.params:
        np.testing.assert_array_equal(a.generator.params[k].data, b.generator.params[k].data)


def test_straight_through_forward_is_hard():
    p = ad.Tensor(np.random.default_rng(4).dirichlet([1, 1], size=(2, 4, 4, 4)).transpose(0, 4, 1, 2, 3),
                  requires_grad=True)
    h = gan._hard(p, True)
    assert set(np.unique(h.data)) <= {0.0, 1.0}
    np.testing.assert_array_equal(h.data[:, 1], (p.data[:, 1] > 0.5).astype(h.data.dtype))
    ad.tsum(ad.mul(h, ad.Tensor(np.arange(h.data.size).reshape(h.shape)))).backward()
    np.testing.assert_array_equal(p.grad, np.arange(h.data.size).reshape(h.shape))


def test_minibatch_std_feature():
    from oracles import central_diff, max_rel_err

    x0 = np.random.default_rng(6).normal(size=(4, 3, 2, 2, 2))
    out = gan.minibatch_std(ad.Tensor(x0, dtype=np.float64)).data
    assert out.shape == (4, 4, 2, 2, 2)
    np.testing.assert_array_equal(out[:, :3], x0)
    np.testing.assert_allclose(out[:, 3], np.mean(np.sqrt(x0.var(axis=0) + 1e-8)), rtol=1e-10)
    assert np.all(gan.minibatch_std(ad.Tensor(np.ones((3, 2, 1, 1, 1)))).data[:, 2] < 1e-3)
    w = np.random.default_rng(7).normal(size=out.shape)
    t = ad.Tensor(x0, requires_grad=True, dtype=np.float64)
    ad.tsum(ad.mul(gan.minibatch_std(t), ad.Tensor(w, dtype=np.float64))).backward()
    (fd,) = central_diff(lambda a: float(np.sum(gan.minibatch_std(ad.Tensor(a, dtype=np.float64)).data * w)),
                         [x0], 1e-6)
    assert max_rel_err(t.grad, fd) <= 1e-6


def test_minibatch_std_discriminator():
    assert gan.discriminator_layers("desk", True)[-1] == (17, 1, 1, 1, 0)
    d = gan.Discriminator("desk", seed=0, minibatch_std=True)
    p = d(np.random.default_rng(8).uniform(size=(3, 2, 16, 16, 16)).astype(np.float32)).data
    assert p.shape == (3,) and np.all((p > 0) & (p < 1))


def test_discriminator_init_scales():
    dc = gan.Discriminator("desk", seed=0)
    he = gan.Discriminator("desk", seed=0, init="he")
    for i, (ci, _, k, _, _) in enumerate(dc.layers):
        assert abs(dc.params[f"w{i}"].data.std() - 0.02) < 0.01
        assert abs(he.params[f"w{i}"].data.std() / np.sqrt(2.0 / (ci * k ** 3)) - 1) < 0.5
    with pytest.raises(ConfigError):
        gan.TrainConfig(d_init="xavier")


def test_soft_real_keeps_mass_and_threshold_volume():
    c = np.zeros((1, 16, 16, 16), bool)
    c[0, 5:11, 6:10, 6:11] = True
    soft = gan._soft_real(c, 0.5)
    np.testing.assert_allclose(soft.sum(axis=1), 1.0, atol=1e-6)
    assert abs(soft[:, 1].sum() - c.sum()) < 1e-3
    assert (soft[0, 1] > 0.5).sum() == c.sum()
    np.testing.assert_array_equal(gan._soft_real(c, 0.0), gan.one_hot(c))
    with pytest.raises(ConfigError):
        gan.TrainConfig(real_blur=-1)


# -- binarization --------------------------------------------------------------

def test_all_solid_rejected():
    cube = np.zeros((2, 16, 16, 16))
    cube[0] = 1
    r = gan.binarize_pore(cube)
    assert not r and r.reason == "empty"


def test_largest_component_kept():
    prob = np.zeros((16, 16, 16))
    prob[3:5, 3:8, 3] = 0.9  # 10 voxels
    prob[10, 10, 10:12] = 0.9  # 2-voxel satellite
    pore = gan.binarize_pore(np.stack([1 - prob, prob]))
    assert pore and pore.n_voxels == 10
    assert not gan.binarize_pore(prob * (np.arange(16)[:, None, None] > 8))


def test_threshold_is_strict():
    prob = np.full((16, 16, 16), 0.5)
    assert not gan.binarize_pore(prob)


@pytest.mark.parametrize("seed", range(5))
def test_binarize_matches_flood_fill(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(-1.2, 1.0, size=(2, 10, 10, 10))
    e = np.exp(logits - logits.max(axis=0))
    cube = e / e.sum(axis=0)
    mask = cube[1] > 0.5
    sizes = flood_fill_count(mask)
    r = gan.binarize_pore(cube)
    if not sizes or max(sizes) < 8:
        assert not r
    else:
        assert r and r.n_voxels == max(sizes)
        assert np.all(mask[tuple(r.global_voxels().T)])


# -- plausibility ----------------------------------------------------------------

def sample_pores(n, rng, side=16):
    out = []
    for _ in range(n):
        a = rng.integers(2, 6, 3)
        lo = rng.integers(2, side - 8, 3)
        m = np.zeros((side,) * 3, bool)
        m[lo[0]:lo[0] + a[0], lo[1]:lo[1] + a[1], lo[2]:lo[2] + a[2]] = True
        out.append(Pore.from_mask(m))
    return out


def test_bounds_match_quantile_oracle():
    rng = np.random.default_rng(6)
    ms = [metrics_for(p) for p in sample_pores(400, rng)]
    b = gan.plausibility_bounds(ms, 16, q=0.001)
    vol = sorted(m.volume_um3 for m in ms)
    # linear-interpolated quantile at position q * (n - 1)
    pos = 0.001 * (len(vol) - 1)
    lo = vol[int(pos)] + (pos - int(pos)) * (vol[int(pos) + 1] - vol[int(pos)])
    assert b.volume[0] == pytest.approx(lo)
    assert b.anisotropy[1] == pytest.approx(np.quantile([m.anisotropy for m in ms], 0.999))
    with pytest.raises(EmptyDataset):
        gan.plausibility_bounds([], 16)


def test_filter_boundaries():
    rng = np.random.default_rng(7)
    pores = sample_pores(200, rng)
    ms = [metrics_for(p) for p in pores]
    b = gan.plausibility_bounds(ms, 16)
    inside = [gan.plausibility_filter(p, b, m) for p, m in zip(pores, ms)]
    assert np.mean(inside) > 0.98
    vols = np.array([m.volume_um3 for m in ms])
    for p, m, ok in zip(pores, ms, inside):
        if not (b.volume[0] <= m.volume_um3 <= b.volume[1]):
            assert not ok
    assert np.any(vols < b.volume[0]) or np.any(vols > b.volume[1]) or vols.min() == b.volume[0]


def test_face_touching_rejected():
    rng = np.random.default_rng(8)
    ms = [metrics_for(p) for p in sample_pores(100, rng)]
    b = gan.plausibility_bounds(ms, 16)
    m = np.zeros((16, 16, 16), bool)
    m[0:3, 5:8, 5:8] = True
    assert not gan.plausibility_filter(Pore.from_mask(m), b)
    m = np.zeros((16, 16, 16), bool)
    m[6:9, 5:8, 13:16] = True
    assert not gan.plausibility_filter(Pore.from_mask(m), b)


def test_training_example_accepted():
    rng = np.random.default_rng(9)
    pores = sample_pores(100, rng)
    ms = [metrics_for(p) for p in pores]
    b = gan.plausibility_bounds(ms, 16)
    med = int(np.argsort([m.volume_um3 for m in ms])[50])
    assert gan.plausibility_filter(pores[med], b)


# -- bank -----------------------------------------------------------------------

def test_bank_empty_and_accept_all(desk_gen):
    assert len(gan.build_bank(desk_gen, 0, lambda p, m: True)) == 0
    bank = gan.build_bank(desk_gen, 5, lambda p, m: True, seed=1, batch=4)
    assert len(bank) == 5 and bank.draws >= 5
    for p, m in zip(bank.pores, bank.metrics):
        assert m == metrics_for(p)


def test_bank_reproducible(desk_gen):
    a = gan.build_bank(desk_gen, 4, lambda p, m: True, seed=2, batch=4)
    b = gan.build_bank(desk_gen, 4, lambda p, m: True, seed=2, batch=4)
    for p, q in zip(a.pores, b.pores):
        np.testing.assert_array_equal(p.voxels, q.voxels)


def test_acceptance_too_low(desk_gen):
    with pytest.raises(AcceptanceTooLow):
        gan.build_bank(desk_gen, 2, lambda p, m: False, batch=8)


def test_bank_and_generator_roundtrip(tmp_path, desk_gen):
    bank = gan.build_bank(desk_gen, 3, lambda p, m: True, seed=3, batch=4)
    back = gan.load_bank(gan.save_bank(tmp_path / "bank", bank))
    assert len(back) == 3 and back.seed == 3
    for p, q in zip(bank.pores, back.pores):
        np.testing.assert_array_equal(p.voxels, q.voxels)
    for m, n in zip(bank.metrics, back.metrics):
        assert m.volume_um3 == n.volume_um3 and m.anisotropy == pytest.approx(n.anisotropy)
    gan.recalibrate(desk_gen, np.random.default_rng(0), batch=4, n_batches=2)
    gan.save_generator(tmp_path / "g", desk_gen)
    g2 = gan.load_generator(tmp_path / "g")
    z = np.random.default_rng(4).normal(size=(2, 100))
    np.testing.assert_allclose(gan.generate(g2, z), gan.generate(desk_gen, z), atol=1e-6)
