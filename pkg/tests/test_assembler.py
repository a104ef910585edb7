import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import flood_fill_count as _sizes
from porosynth import assembler, spatial
from porosynth.errors import EmptyBank, WindowTooSmall
from porosynth.gan import PoreBank
from porosynth.metrics import metrics_for
from porosynth.voxel import EXTERIOR, PORE, SOLID, Pore, count_components


def flood_fill_count(mask):
    return len(_sizes(mask))


def blob(n, rng):
    """Random 26-connected voxel blob grown from the origin."""
    pts = {(0, 0, 0)}
    while len(pts) < n:
        p = list(pts)[rng.integers(len(pts))]
        pts.add(tuple(int(a + d) for a, d in zip(p, rng.integers(-1, 2, 3))))
    return Pore(np.array(sorted(pts)))


def make_bank(n, seed=0, sizes=(8, 40)):
    rng = np.random.default_rng(seed)
    pores = [blob(int(rng.integers(*sizes)), rng) for _ in range(n)]
    return PoreBank(pores, [metrics_for(p) for p in pores])


def spec(vol, ani, th, loc=(0.0, 0.0, 0.0), b=(0, 0)):
    return spatial.PoreSpec(vol, ani, th, loc, b)


# -- matching -----------------------------------------------------------------

def test_exact_spec_matches_that_pore():
    bank = make_bank(30)
    for i in (0, 7, 29):
        m = bank.metrics[i]
        j = assembler.match_pore(spec(m.volume_um3, m.anisotropy, m.theta_z), bank)
        mj = bank.metrics[j]
        assert (mj.volume_um3, mj.anisotropy, mj.theta_z) == (m.volume_um3, m.anisotropy, m.theta_z)
        assert j <= i


def test_single_pore_bank():
    bank = make_bank(1)
    for v in (1.0, 100.0, 1e6):
        assert assembler.match_pore(spec(v, 0.3, 45.0), bank) == 0


def test_empty_bank():
    with pytest.raises(EmptyBank):
        assembler.match_pore(spec(1, 0, 0), PoreBank([], []))


def test_ties_take_lowest_id():
    bank = make_bank(3)
    dup = PoreBank([bank.pores[2], bank.pores[0], bank.pores[2]], [bank.metrics[2], bank.metrics[0], bank.metrics[2]])
    m = bank.metrics[2]
    assert assembler.match_pore(spec(m.volume_um3, m.anisotropy, m.theta_z), dup) == 0


def test_matching_agrees_with_brute_force():
    bank = make_bank(60, seed=1)
    scale = np.array([10.0, 0.2, 20.0])
    match = assembler.Matcher(bank, scale)
    rng = np.random.default_rng(2)
    for _ in range(200):
        s = spec(rng.uniform(5, 45), rng.uniform(0, 1), rng.uniform(0, 90))
        best, best_d = None, np.inf
        for i, m in enumerate(bank.metrics):
            d = ((m.volume_um3 - s.volume) / 10.0) ** 2 + ((m.anisotropy - s.anisotropy) / 0.2) ** 2 \
                + ((m.theta_z - s.theta_z) / 20.0) ** 2
            if d < best_d:
                best, best_d = i, d
        assert match(s) == best


# -- placement ----------------------------------------------------------------

CUBE = Pore(np.argwhere(np.ones((2, 2, 2), bool)))


def test_place_in_empty_solid():
    data = np.zeros((10, 10, 10), np.uint8)
    res = assembler.place_pore(data, CUBE, (5, 5, 5))
    assert res and len(res.voxels) == 8
    assert count_components(data == PORE) == 1 and (data == PORE).sum() == 8


def test_overlap_rejected_and_restored():
    data = np.zeros((10, 10, 10), np.uint8)
    assembler.place_pore(data, CUBE, (5, 5, 5))
    data[0, 0, 0] = EXTERIOR
    before = data.copy()
    for c in [(5, 5, 5), (6, 5, 5)]:
        assert not assembler.place_pore(data, CUBE, c)
        np.testing.assert_array_equal(data, before)


def test_touching_rejected_gap_accepted():
    # CUBE at centre 5 covers 4..5; a centre-7 cube covers 6..7 (face contact)
    base = np.zeros((12, 12, 12), np.uint8)
    assembler.place_pore(base, CUBE, (5, 5, 5))
    for c, ok in [((7, 5, 5), False), ((7, 7, 7), False), ((8, 5, 5), True), ((8, 8, 8), True)]:
        data = base.copy()
        res = assembler.place_pore(data, CUBE, c)
        assert bool(res) == ok
        assert flood_fill_count(data == PORE) == (2 if ok else 1)


def test_out_of_bounds_and_exterior_rejected():
    data = np.zeros((6, 6, 6), np.uint8)
    assert not assembler.place_pore(data, CUBE, (5, 3, 3))
    assert not assembler.place_pore(data, CUBE, (-1, 3, 3))
    data[3, 3, 3] = EXTERIOR
    assert not assembler.place_pore(data, CUBE, (3, 3, 3))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_random_placements_match_flood_fill(seed):
    rng = np.random.default_rng(seed)
    data = np.zeros((14, 14, 14), np.uint8)
    count = 0
    for _ in range(6):
        p = blob(int(rng.integers(3, 15)), rng)
        trial = data.copy()
        centre = rng.integers(2, 12, 3)
        g = assembler.stamp_coords(p, centre)
        res = assembler.place_pore(data, p, centre)
        if res:
            count += 1
            assert flood_fill_count(data == PORE) == count
        else:
            np.testing.assert_array_equal(data, trial)
            inb = g.min() >= 0 and g.max() < 14
            if inb and np.all(trial[tuple(g.T)] == SOLID):
                trial[tuple(g.T)] = PORE
                assert flood_fill_count(trial == PORE) != count + 1


# -- traversal ----------------------------------------------------------------

VS = 4.0


def fixture_model(n=150, nz=64, seed=0):
    geom = spatial.PartGeometry((64.0, 64.0), 56.0, 0.0, nz * VS)
    rng = np.random.default_rng(seed)
    r = 50.0 * np.sqrt(rng.uniform(size=n))
    t = rng.uniform(0, 2 * np.pi, n)
    bank = make_bank(40, seed=seed)
    ms = []
    for i in range(n):
        m = bank.metrics[i % 40]
        ms.append(type(m)(m.volume_um3, (64 + r[i] * np.cos(t[i]), 64 + r[i] * np.sin(t[i]), rng.uniform(0, nz * VS)),
                          m.eigvals, m.anisotropy, m.theta_z, m.phi_xy))
    return spatial.fit(ms, geom, 5), bank


def ledger_key(part):
    return [(e.bank_id, e.location, e.status, e.retries) for e in part.ledger]


def test_window_too_small():
    model, bank = fixture_model()
    with pytest.raises(WindowTooSmall):
        assembler.traverse(model, bank, (32, 32, 64), VS, window_vox=3)


def test_schedule_overlaps_by_half():
    s = assembler.window_schedule(100, 32)
    assert s[0] == (0, 32, 0)
    for (a0, af, _), (b0, bf, first) in zip(s, s[1:]):
        assert b0 - a0 == 16 and first == af
    assert s[-1][1] == 100
    assert assembler.window_schedule(20, 32) == [(0, 20, 0)]


def test_short_part_single_window_equals_whole():
    model, bank = fixture_model(nz=24)
    a = assembler.traverse(model, bank, (32, 32, 24), VS, window_vox=64, seed=3)
    b = assembler.traverse(model, bank, (32, 32, 24), VS, window_vox=None, seed=3)
    assert ledger_key(a) == ledger_key(b)


@pytest.mark.parametrize("window", [8, 16, 30])
def test_windowed_equals_whole(window):
    model, bank = fixture_model()
    whole = assembler.traverse(model, bank, (32, 32, 64), VS, window_vox=None, seed=7)
    win = assembler.traverse(model, bank, (32, 32, 64), VS, window_vox=window, seed=7)
    assert len(whole.accepted) > 20
    assert ledger_key(win) == ledger_key(whole)
    np.testing.assert_array_equal(win.volume.data, whole.volume.data)


def test_ledger_matches_components():
    model, bank = fixture_model()
    part = assembler.traverse(model, bank, (32, 32, 64), VS, window_vox=16, seed=1)
    assert part.component_count() == len(part.accepted)
    assert flood_fill_count(part.volume.data == PORE) == len(part.accepted)
    for e in part.accepted:
        assert np.all(part.volume.data[tuple(e.voxels.T)] == PORE)


def test_retry_exhaustion_skips_without_mutation(monkeypatch):
    model, bank = fixture_model()
    monkeypatch.setattr(assembler, "place_pore", lambda data, pore, c: assembler.Rejected("forced"))
    part = assembler.traverse(model, bank, (32, 32, 32), VS, window_vox=None, seed=0)
    assert part.ledger and all(e.status == "skipped" and e.retries == assembler.MAX_RETRIES for e in part.ledger)
    assert not np.any(part.volume.data)


def test_traverse_deterministic():
    model, bank = fixture_model()
    a = assembler.traverse(model, bank, (32, 32, 40), VS, window_vox=16, seed=5)
    b = assembler.traverse(model, bank, (32, 32, 40), VS, window_vox=16, seed=5)
    c = assembler.traverse(model, bank, (32, 32, 40), VS, window_vox=16, seed=6)
    assert ledger_key(a) == ledger_key(b)
    assert ledger_key(a) != ledger_key(c)


# -- clipping -----------------------------------------------------------------

def placed_part(centres, shape=(20, 20, 20), pore=None):
    pore = pore or Pore(np.argwhere(np.ones((3, 3, 3), bool)))
    data = np.zeros(shape, np.uint8)
    ledger = []
    for c in centres:
        res = assembler.place_pore(data, pore, c)
        assert res
        ledger.append(assembler.LedgerEntry(0, tuple(map(float, c)), None, "accepted", 0, res.voxels))
    from porosynth.voxel import VoxelVolume
    return assembler.PartRealization(VoxelVolume(data, 1.0), ledger)


def test_clip_interior_unchanged():
    part = placed_part([(5, 5, 5)])
    out = assembler.clip_to_boundary(part, np.ones((20, 20, 20), bool))
    np.testing.assert_array_equal(out.volume.data, part.volume.data)
    assert out.ledger[0].status == "accepted"


def test_clip_outside_removed():
    part = placed_part([(5, 5, 5), (14, 14, 14)])
    inside = np.zeros((20, 20, 20), bool)
    inside[10:] = True
    out = assembler.clip_to_boundary(part, inside)
    assert [e.status for e in out.ledger] == ["dissolved", "accepted"]
    assert len(out.accepted) == out.component_count() == 1
    assert not np.any((out.volume.data == PORE) & ~inside)


def test_clip_straddling_matches_mask_intersection():
    big = Pore(np.argwhere(np.ones((6, 6, 6), bool)))
    part = placed_part([(10, 10, 10)], pore=big)
    inside = np.ones((20, 20, 20), bool)
    inside[:9] = False
    out = assembler.clip_to_boundary(part, inside)
    expect = (part.volume.data == PORE) & inside
    np.testing.assert_array_equal(out.volume.data == PORE, expect)
    assert out.ledger[0].status == "clipped" and len(out.ledger[0].voxels) == expect.sum()
    assert np.all(out.volume.data[~inside] == EXTERIOR)


def test_clip_keeps_largest_piece():
    u = np.zeros((5, 3, 5), bool)
    u[:, :, 0] = True
    u[0, :, :] = True
    u[4, :, :] = True  # U shape opening to +z
    part = placed_part([(10, 10, 10)], pore=Pore(np.argwhere(u)))
    g = part.ledger[0].voxels
    inside = np.ones((20, 20, 20), bool)
    inside[:, :, g[:, 2].min()] = False  # cut the base; two arms remain
    inside[g[:, 0].max(), :, g[:, 2].max()] = False  # shorten one arm
    out = assembler.clip_to_boundary(part, inside)
    assert out.component_count() == len(out.accepted) == 1
    assert not np.any((out.volume.data == PORE) & ~inside)


def test_ledger_csv(tmp_path):
    model, bank = fixture_model()
    part = assembler.traverse(model, bank, (32, 32, 24), VS, seed=0)
    p = assembler.write_ledger_csv(tmp_path / "ledger.csv", part)
    rows = p.read_text().strip().splitlines()
    assert rows[0] == "bank_id,x,y,z,status,retries" and len(rows) == len(part.ledger) + 1
