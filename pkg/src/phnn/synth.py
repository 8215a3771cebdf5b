"""Synthetic thoracic CT corpus for smoke tests and property-based acceptance.

Each case is a 64 x 64 x 32 volume: air outside an elliptic body cylinder
(about +40 HU), one or two ellipsoidal lungs (about -850 HU) with Gaussian
noise, and a few consolidation blobs (about 0 HU) inside the lungs. The mask is
the clean union of the lung ellipsoids, blobs included. A fraction of cases has
a single lung.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import ManifestRow, MaskVolume, VolumeCT, save_mask, save_volume, write_manifest

NX, NY, NZ = 64, 64, 32
SPACING = (0.8, 0.8, 2.5)
AIR_HU, BODY_HU, LUNG_HU, BLOB_HU = -1000.0, 40.0, -850.0, 0.0
NOISE_HU = 25.0
SINGLE_LUNG_FRACTION = 0.2
DATASETS = ("synth_a", "synth_b")


@dataclass
class SynthCase:
    volume: VolumeCT
    mask: MaskVolume


def _grid():
    z, y, x = np.meshgrid(np.arange(NZ), np.arange(NY), np.arange(NX), indexing="ij")
    return z.astype(float), y.astype(float), x.astype(float)


def _ellipsoid(grid, centre, radii):
    z, y, x = grid
    cz, cy, cx = centre
    rz, ry, rx = radii
    return ((z - cz) / rz) ** 2 + ((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2 <= 1.0


def make_case(seed: int, index: int, single_lung=None) -> SynthCase:
    rng = np.random.default_rng([seed, index])
    grid = _grid()
    z, y, x = grid
    hu = np.full((NZ, NY, NX), AIR_HU)

    by, bx = rng.uniform(25, 28), rng.uniform(28, 30.5)
    body = ((y - 31.5) / by) ** 2 + ((x - 31.5) / bx) ** 2 <= 1.0
    hu[body] = BODY_HU

    if single_lung is None:
        single_lung = rng.uniform() < SINGLE_LUNG_FRACTION
    sides = [rng.choice([-1, 1])] if single_lung else [-1, 1]
    lungs = np.zeros_like(body)
    for side in sides:
        centre = (rng.uniform(14.5, 16.5), rng.uniform(29, 34), 31.5 + side * rng.uniform(12, 14))
        radii = (rng.uniform(11, 13.5), rng.uniform(13, 17), rng.uniform(7.5, 9.5))
        lungs |= _ellipsoid(grid, centre, radii) & body
    hu[lungs] = LUNG_HU

    lung_idx = np.argwhere(lungs)
    for _ in range(rng.integers(1, 4)):
        cz, cy, cx = lung_idx[rng.integers(len(lung_idx))]
        r = rng.uniform(1.5, 3.5)
        blob = _ellipsoid(grid, (cz, cy, cx), (r / 2, r, r)) & lungs
        hu[blob] = BLOB_HU

    hu += rng.normal(0.0, NOISE_HU, size=hu.shape)
    volume = VolumeCT(np.rint(hu), SPACING)
    return SynthCase(volume, MaskVolume(lungs, SPACING))


def write_corpus(out_dir, cases: int, seed: int) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(cases):
        pid = f"case{i:03d}"
        did = DATASETS[0] if i < (cases + 1) // 2 else DATASETS[1]
        case = make_case(seed, i)
        vpath, mpath = out / f"{pid}_vol.svl", out / f"{pid}_mask.svl"
        save_volume(case.volume, vpath)
        save_mask(case.mask, mpath)
        rows.append(ManifestRow(pid, did, vpath, mpath))
    write_manifest(rows, out / "manifest.csv")
    return rows
