"""Thresholding and 3D clean-up of per-slice probability maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import MaskVolume
from .errors import ConfigError

FOREGROUND = np.ones((3, 3, 3), dtype=bool)  # 26-connectivity
BACKGROUND = ndimage.generate_binary_structure(3, 1)  # 6-connectivity
MAX_RATIO = 5.0
THRESHOLD_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))


@dataclass
class ProbabilityVolume:
    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float64)
        if self.voxels.size and (self.voxels.min() < 0 or self.voxels.max() > 1):
            raise ValueError("probabilities must lie in [0, 1]")


def _voxels(m):
    return m.voxels if hasattr(m, "voxels") else np.asarray(m)


def threshold(pv, t: float) -> MaskVolume:
    if not 0.0 < t < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {t}")
    return MaskVolume(_voxels(pv) >= t, getattr(pv, "spacing", (1.0, 1.0, 1.0)))


@dataclass
class Components:
    labels: np.ndarray
    voxel_counts: list
    volumes_mm3: list

    @property
    def count(self) -> int:
        return len(self.voxel_counts)


def connected_components(mask) -> Components:
    """26-connected foreground components, labelled 1..C by descending size.

    Ties in size go to the component with the smaller minimum linear index.
    """
    vox = _voxels(mask) != 0
    spacing = getattr(mask, "spacing", (1.0, 1.0, 1.0))
    raw, n = ndimage.label(vox, structure=FOREGROUND)
    if n == 0:
        return Components(np.zeros(vox.shape, dtype=np.int32), [], [])
    flat = raw.ravel()
    counts = np.bincount(flat, minlength=n + 1)[1:]
    # scipy labels in raster order, so label i first appears at its minimum index
    first = np.full(n + 1, flat.size)
    nz = np.flatnonzero(flat)
    np.minimum.at(first, flat[nz], nz)
    order = sorted(range(1, n + 1), key=lambda i: (-counts[i - 1], first[i]))
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[order] = np.arange(1, n + 1)
    labels = remap[raw]
    sorted_counts = [int(counts[i - 1]) for i in order]
    unit = float(np.prod(spacing))
    return Components(labels, sorted_counts, [c * unit for c in sorted_counts])


def fill_holes(mask) -> MaskVolume:
    """Background not 6-connected to the volume border becomes foreground."""
    vox = _voxels(mask) != 0
    filled = ndimage.binary_fill_holes(vox, structure=BACKGROUND)
    return MaskVolume(filled, getattr(mask, "spacing", (1.0, 1.0, 1.0)))


def keep_lungs(mask) -> MaskVolume:
    filled = fill_holes(mask)
    comps = connected_components(filled)
    if comps.count == 0:
        return filled
    keep = [1]
    if comps.count >= 2 and comps.voxel_counts[0] / comps.voxel_counts[1] < MAX_RATIO:
        keep.append(2)
    return MaskVolume(np.isin(comps.labels, keep), filled.spacing)


def postprocess(pv, t: float) -> MaskVolume:
    return keep_lungs(threshold(pv, t))
