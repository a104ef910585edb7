"""Voxel grids, connected-component labeling and pore extraction.

Arrays are indexed ``[x, y, z]``. Whenever an ordering matters (label ids,
raw files) it follows an x-fastest scan, i.e. the Fortran order of the
``(nx, ny, nz)`` array.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError, PoreTooLarge

SOLID = 0
PORE = 1
EXTERIOR = 2
PHASES = {"solid": SOLID, "pore": PORE, "exterior": EXTERIOR}

MIN_PORE_VOXELS = 8
# pores below this volume cannot be reliably identified at 4 um voxels
RELIABLE_VOLUME_UM3 = 2700.0


def _frozen(a):
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class VoxelVolume:
    """Phase-labelled voxel grid (0 solid, 1 pore, 2 exterior)."""

    data: np.ndarray
    voxel_size: float = 1.0

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise DataError(f"volume must be a non-empty 3D grid, got shape {data.shape}")
        if not self.voxel_size > 0:
            raise DataError(f"voxel_size must be positive, got {self.voxel_size}")
        if data.size and data.max(initial=0) > EXTERIOR:
            raise DataError("phase values must be 0 (solid), 1 (pore) or 2 (exterior)")
        object.__setattr__(self, "data", _frozen(data.astype(np.uint8)))
        object.__setattr__(self, "voxel_size", float(self.voxel_size))

    @property
    def dims(self):
        return tuple(int(n) for n in self.data.shape)

    @property
    def pore_mask(self):
        return self.data == PORE

    def with_data(self, data):
        return VoxelVolume(data, self.voxel_size)


@dataclass(frozen=True)
class LabeledVolume:
    labels: np.ndarray
    voxel_size: float
    count: int

    @property
    def dims(self):
        return tuple(int(n) for n in self.labels.shape)

    def sizes(self):
        """Voxel count per label id; index 0 is the background."""
        return np.bincount(self.labels.ravel(), minlength=self.count + 1)


@dataclass(frozen=True)
class Pore:
    """One connected pore.

    ``voxels`` holds integer offsets relative to ``origin``, the corner of
    the pore's bounding box in the parent grid.
    """

    voxels: np.ndarray
    origin: tuple = (0, 0, 0)
    voxel_size: float = 1.0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        v = np.asarray(self.voxels, dtype=np.int64).reshape(-1, 3)
        if len(v) == 0:
            raise DataError("a pore needs at least one voxel")
        lo = v.min(axis=0)
        if np.any(lo != 0):
            # normalise so offsets start at the bounding-box corner
            v = v - lo
            object.__setattr__(self, "origin", tuple(int(o + d) for o, d in zip(self.origin, lo)))
        else:
            object.__setattr__(self, "origin", tuple(int(o) for o in self.origin))
        object.__setattr__(self, "voxels", _frozen(v))

    @property
    def n_voxels(self):
        return len(self.voxels)

    @property
    def extent(self):
        """Bounding-box side lengths in voxels."""
        return tuple(int(e) for e in self.voxels.max(axis=0) + 1)

    @property
    def volume_um3(self):
        return self.n_voxels * self.voxel_size**3

    @property
    def below_reliable_volume(self):
        return self.volume_um3 < RELIABLE_VOLUME_UM3

    def global_voxels(self):
        return self.voxels + np.asarray(self.origin)

    def mask(self):
        """Dense boolean mask of the bounding box."""
        m = np.zeros(self.extent, dtype=bool)
        m[tuple(self.voxels.T)] = True
        return m

    @classmethod
    def from_mask(cls, mask, origin=(0, 0, 0), voxel_size=1.0, **meta):
        idx = np.argwhere(mask)
        return cls(idx, origin, voxel_size, meta)


def _structure(connectivity):
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def label_mask(mask, connectivity=26):
    """Label a boolean mask; ids follow first occurrence in an x-fastest scan."""
    # ndimage scans its last axis fastest, so label the (z, y, x) view
    lab, n = ndimage.label(np.ascontiguousarray(np.asarray(mask, bool).T), structure=_structure(connectivity))
    return np.ascontiguousarray(lab.T).astype(np.int32), int(n)


def label_components(volume, connectivity=26):
    """Label the connected pore-phase components of ``volume``."""
    labels, n = label_mask(volume.data == PORE, connectivity)
    return LabeledVolume(labels, volume.voxel_size, n)


def count_components(mask, connectivity=26):
    return label_mask(mask, connectivity)[1]


def extract_pores(labeled, min_voxels=MIN_PORE_VOXELS):
    """Pores with at least ``min_voxels`` voxels, in ascending label order."""
    pores = []
    if labeled.count == 0:
        return pores
    sizes = labeled.sizes()
    slices = ndimage.find_objects(labeled.labels)
    for lab, sl in enumerate(slices, start=1):
        if sl is None or sizes[lab] < min_voxels:
            continue
        local = np.argwhere(labeled.labels[sl] == lab)
        origin = tuple(s.start for s in sl)
        pore = Pore(local, origin, labeled.voxel_size, {"label": lab})
        pore.meta["below_reliable_volume"] = pore.below_reliable_volume
        pores.append(pore)
    return pores


def center_in_cube(pore, cube_side):
    """Place ``pore`` in a solid cube with its voxel centroid at the centre.

    Each coordinate of the shift is rounded toward the origin on ties.
    """
    if max(pore.extent) > cube_side:
        raise PoreTooLarge(f"pore extent {pore.extent} exceeds cube side {cube_side}")
    centroid = pore.voxels.mean(axis=0)
    shift = np.ceil(cube_side // 2 - centroid - 0.5).astype(np.int64)
    pos = pore.voxels + shift
    if pos.min() < 0 or pos.max() >= cube_side:
        raise PoreTooLarge(f"pore of extent {pore.extent} cannot be centred in a {cube_side}^3 cube")
    data = np.zeros((cube_side,) * 3, dtype=np.uint8)
    data[tuple(pos.T)] = PORE
    return VoxelVolume(data, pore.voxel_size)


def save_volume(path, volume):
    """Write ``<path>.json`` header plus ``<path>.raw`` (uint8, x-fastest)."""
    path = Path(path)
    header_path = path.with_suffix(".json")
    raw_path = path.with_suffix(".raw")
    header = {
        "dims": list(volume.dims),
        "voxel_size": volume.voxel_size,
        "phases": PHASES,
        "dtype": "uint8",
        "endianness": "little",
        "order": "x-fastest",
        "raw": raw_path.name,
    }
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header_path.write_text(json.dumps(header, indent=2))
    raw_path.write_bytes(volume.data.tobytes(order="F"))
    return header_path


def load_volume(path):
    path = Path(path)
    header_path = path.with_suffix(".json")
    if not header_path.exists():
        raise DataError(f"volume header not found: {header_path}")
    try:
        header = json.loads(header_path.read_text())
        dims = tuple(int(d) for d in header["dims"])
        raw_path = header_path.parent / header.get("raw", header_path.with_suffix(".raw").name)
        voxel_size = header["voxel_size"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise DataError(f"malformed volume header {header_path}: {e}") from e
    if not raw_path.exists():
        raise DataError(f"raw file not found: {raw_path}")
    raw = raw_path.read_bytes()
    if len(raw) != int(np.prod(dims)):
        raise DataError(f"raw file size {len(raw)} does not match dims {dims}")
    data = np.frombuffer(raw, dtype=np.uint8).reshape(dims, order="F")
    return VoxelVolume(data, voxel_size)
