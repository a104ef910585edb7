"""Part assembly: match sampled specs to bank pores and stamp them into a volume.

Sampling is keyed per fixed z chunk of ``CHUNK_VOX`` voxels (each chunk
has its own seeded stream), so the drawn specs do not depend on how the
part is split into windows. The moving window only schedules placement: a
window covers ``[z0, z0 + dz)``, advances by ``dz / 2``, and owns the
chunks starting in its new half. A pore that could reach the window's
upper frame is carried over, together with every pore queued after it, so
placement order (and hence the overlap checks) is the same for any window
length.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import spatial
from .errors import ConfigError, EmptyBank, WindowTooSmall
from .voxel import EXTERIOR, MIN_PORE_VOXELS, PORE, SOLID, VoxelVolume, count_components, label_mask

log = logging.getLogger(__name__)

MAX_RETRIES = 100
MIN_WINDOW_VOX = 4
CHUNK_VOX = 16


@dataclass
class LedgerEntry:
    bank_id: int
    location: tuple  # um, where the pore centroid was put
    spec: spatial.PoreSpec
    status: str  # accepted, skipped, clipped, dissolved
    retries: int = 0
    voxels: np.ndarray | None = field(default=None, repr=False)


@dataclass
class PartRealization:
    volume: VoxelVolume
    ledger: list
    surface: object = None

    @property
    def accepted(self):
        return [e for e in self.ledger if e.status in ("accepted", "clipped")]

    def component_count(self):
        return count_components(self.volume.data == PORE)


@dataclass(frozen=True)
class Placed:
    voxels: np.ndarray

    def __bool__(self):
        return True


@dataclass(frozen=True)
class Rejected:
    reason: str

    def __bool__(self):
        return False


class Matcher:
    """Nearest bank pore in (volume, anisotropy, theta_z), scaled per feature."""

    def __init__(self, bank, scale=None):
        if len(bank) == 0:
            raise EmptyBank("pore bank is empty")
        self.bank = bank
        self.features = np.array([[m.volume_um3, m.anisotropy, m.theta_z] for m in bank.metrics])
        if scale is None:
            scale = self.features.std(axis=0)
        scale = np.asarray(scale, dtype=np.float64)
        self.scale = np.where(scale > 0, scale, 1.0)

    def __call__(self, spec):
        q = np.array([spec.volume, spec.anisotropy, spec.theta_z])
        d = np.sum(((self.features - q) / self.scale) ** 2, axis=1)
        return int(np.argmin(d))  # first minimum, i.e. lowest id on ties


def population_scale(model):
    g = model.global_samples
    return np.array([np.std(g["volume"]), np.std(g["anisotropy"]), np.std(g["theta_z"])])


def match_pore(spec, bank, scale=None):
    """Index of the bank pore closest to ``spec``."""
    return Matcher(bank, scale)(spec)


def stamp_coords(pore, center_vox):
    """Global voxel coordinates of ``pore`` with its rounded centroid at ``center_vox``."""
    v = pore.voxels
    return v - np.round(v.mean(axis=0)).astype(np.int64) + np.asarray(center_vox, dtype=np.int64)


def place_pore(data, pore, center_vox):
    """Stamp ``pore`` into the phase array ``data`` (modified in place).

    Accepted iff the pore-component count of the stamped bounding box,
    dilated by one voxel, grows by exactly one; otherwise ``data`` is left
    untouched.
    """
    g = stamp_coords(pore, center_vox)
    lo, hi = g.min(axis=0), g.max(axis=0)
    if lo.min() < 0 or np.any(hi >= data.shape):
        return Rejected("out of bounds")
    idx = tuple(g.T)
    if np.any(data[idx] != SOLID):
        return Rejected("target voxels not solid")
    a = np.maximum(lo - 1, 0)
    b = np.minimum(hi + 2, data.shape)
    sl = tuple(slice(int(i), int(j)) for i, j in zip(a, b))
    before = count_components(data[sl] == PORE)
    data[idx] = PORE
    after = count_components(data[sl] == PORE)
    if after != before + 1:
        data[idx] = SOLID
        return Rejected("would merge with an existing pore")
    return Placed(g)


def _to_vox(location, voxel_size):
    return np.floor(np.asarray(location) / voxel_size).astype(np.int64)


def chunk_range(chunk, nz):
    return chunk * CHUNK_VOX, min((chunk + 1) * CHUNK_VOX, nz)


def chunk_specs(model, seed, chunk, nz, voxel_size):
    """Specs drawn for one z chunk, from that chunk's own stream."""
    lo, hi = chunk_range(chunk, nz)
    rng = np.random.default_rng([seed, chunk])
    return spatial.sample_window(model, (lo * voxel_size, hi * voxel_size), rng)


def _try_place(data, pore, spec, model, voxel_size, prng, z_range):
    loc = spec.location
    for attempt in range(MAX_RETRIES + 1):
        if attempt:
            loc = spatial.sample_location(model, spec.bin, z_range, prng)
        res = place_pore(data, pore, _to_vox(loc, voxel_size))
        if res:
            return res, loc, attempt
    return None, loc, MAX_RETRIES


def _reach_top(pore, chunk_hi):
    """Highest z any placement of ``pore`` centred inside the chunk can touch."""
    v = pore.voxels[:, 2]
    return int(chunk_hi - 1 - np.round(v.mean()) + v.max())


def window_schedule(nz, window_vox):
    """(z0, z_f, first_new_slab) per window; windows overlap by half their length."""
    if window_vox is None or window_vox >= nz:
        return [(0, nz, 0)]
    if window_vox < MIN_WINDOW_VOX:
        raise WindowTooSmall(f"window of {window_vox} voxels is below {MIN_WINDOW_VOX}")
    half = window_vox // 2
    out = [(0, window_vox, 0)]
    while out[-1][1] < nz:
        z0 = out[-1][0] + half
        out.append((z0, min(z0 + window_vox, nz), out[-1][1]))
    return out


def traverse(model, bank, dims, voxel_size, window_vox=256, seed=0, scale=None, base=None):
    """Assemble a part of ``dims`` voxels by the moving-window schedule.

    ``base`` is an optional starting phase array (default all solid).
    Returns a PartRealization whose ledger lists every sampled pore in
    placement order.
    """
    if window_vox is not None and window_vox < MIN_WINDOW_VOX:
        raise WindowTooSmall(f"window of {window_vox} voxels is below {MIN_WINDOW_VOX}")
    if isinstance(seed, np.random.Generator):
        seed = int(seed.integers(2**63))
    matcher = Matcher(bank, population_scale(model) if scale is None else scale)
    data = np.zeros(dims, dtype=np.uint8) if base is None else np.array(base, dtype=np.uint8)
    nz = dims[2]
    ledger = []
    queue = []  # (chunk, k, spec) carried between windows
    n_chunks = -(-nz // CHUNK_VOX)
    for z0, zf, first in window_schedule(nz, window_vox):
        for c in range(-(-first // CHUNK_VOX), n_chunks):
            if c * CHUNK_VOX >= zf:
                break
            queue.extend((c, k, s) for k, s in enumerate(chunk_specs(model, seed, c, nz, voxel_size)))
        last = zf >= nz
        done = 0
        for c, k, spec in queue:
            bank_id = matcher(spec)
            pore = bank.pores[bank_id]
            lo, hi = chunk_range(c, nz)
            if not last and _reach_top(pore, hi) + 1 >= zf:
                break  # may be bisected by the frame: carry this and everything after it
            prng = np.random.default_rng([seed, c, k, 1])
            z_range = (lo * voxel_size, hi * voxel_size)
            res, loc, tries = _try_place(data, pore, spec, model, voxel_size, prng, z_range)
            if res:
                ledger.append(LedgerEntry(bank_id, tuple(map(float, loc)), spec, "accepted", tries, res.voxels))
            else:
                log.info("skipped pore for spec %s after %d retries", spec, tries)
                ledger.append(LedgerEntry(bank_id, tuple(map(float, loc)), spec, "skipped", tries))
            done += 1
        queue = queue[done:]
    return PartRealization(VoxelVolume(data, voxel_size), ledger)


def clip_to_boundary(part, inside):
    """Make voxels outside ``inside`` exterior and tidy up the cut pores.

    A pore cut into pieces keeps its largest piece; pieces and pores left
    with fewer than 8 voxels are dissolved back to solid.
    """
    inside = np.asarray(inside, dtype=bool)
    data = np.array(part.volume.data)
    if inside.shape != data.shape:
        raise ConfigError(f"boundary mask {inside.shape} does not match volume {data.shape}")
    data[~inside] = EXTERIOR
    ledger = []
    for e in part.ledger:
        if e.status not in ("accepted", "clipped") or e.voxels is None:
            ledger.append(e)
            continue
        keep = inside[tuple(e.voxels.T)]
        if keep.all():
            ledger.append(e)
            continue
        v = e.voxels[keep]
        if len(v):
            lo = v.min(axis=0)
            local = np.zeros(v.max(axis=0) - lo + 1, dtype=bool)
            local[tuple((v - lo).T)] = True
            lab, n = label_mask(local)
            sizes = np.bincount(lab.ravel(), minlength=n + 1)
            sizes[0] = 0
            big = int(np.argmax(sizes))
            piece = lab[tuple((v - lo).T)] == big
            data[tuple(v[~piece].T)] = SOLID
            v = v[piece]
        if len(v) < MIN_PORE_VOXELS:
            if len(v):
                data[tuple(v.T)] = SOLID
            ledger.append(LedgerEntry(e.bank_id, e.location, e.spec, "dissolved", e.retries, None))
        else:
            ledger.append(LedgerEntry(e.bank_id, e.location, e.spec, "clipped", e.retries, v))
    return PartRealization(VoxelVolume(data, part.volume.voxel_size), ledger, part.surface)


def write_ledger_csv(path, part):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bank_id", "x", "y", "z", "status", "retries"])
        for e in part.ledger:
            w.writerow([e.bank_id, *map(repr, e.location), e.status, e.retries])
    return path
