"""CT volume I/O, HU windowing, slice extraction, manifests and fold splits.

Volumes live in memory as arrays of shape ``(nz, ny, nx)`` so that
``voxels[z]`` is an axial slice; ``dims`` and ``spacing`` are reported in
``(x, y, z)`` order to match the on-disk header.

SVL1 layout (little-endian)::

    offset 0   4 bytes  magic b"SVL1"
    offset 4   u8       dtype code (0 = int16 HU, 1 = uint8 mask)
    offset 5   3 x u32  nx, ny, nz
    offset 17  3 x f64  sx, sy, sz (mm)
    offset 41  voxels, x fastest, then y, then z
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError, FormatError, SplitError, TruncationError

MAGIC = b"SVL1"
HEADER = struct.Struct("<4sB3I3d")
DTYPES = {0: np.dtype("<i2"), 1: np.dtype("u1")}
HU_MIN, HU_MAX = -1024, 3071

# Channel order is fixed: lung/body, mediastinum, low-density lung detail.
WINDOWS = ((-1000.0, 200.0), (-160.0, 240.0), (-1000.0, -775.0))

MANIFEST_HEADER = ["patient_id", "dataset_id", "volume_path", "mask_path"]


@dataclass
class VolumeCT:
    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    patient_id: str = ""
    dataset_id: str = ""

    def __post_init__(self):
        self.voxels = np.clip(np.asarray(self.voxels), HU_MIN, HU_MAX).astype(np.int16)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise DataError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def dims(self) -> tuple:
        nz, ny, nx = self.voxels.shape
        return nx, ny, nz


@dataclass
class MaskVolume:
    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxels = (np.asarray(self.voxels) != 0).astype(np.uint8)
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self) -> tuple:
        nz, ny, nx = self.voxels.shape
        return nx, ny, nz


@dataclass
class SliceSample:
    image: np.ndarray
    label: np.ndarray
    source: tuple
    crop: tuple = (0, 0, 0, 0)


# ---------------------------------------------------------------------------
# SVL1


def _write_svl(path, voxels: np.ndarray, code: int, spacing) -> None:
    nz, ny, nx = voxels.shape
    header = HEADER.pack(MAGIC, code, nx, ny, nz, *spacing)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(voxels, dtype=DTYPES[code]).tobytes())


def _read_svl(path, expected_code: Optional[int] = None):
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise TruncationError(f"{path}: header needs {HEADER.size} bytes, file has {len(raw)}", len(raw))
    magic, code, nx, ny, nz, sx, sy, sz = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", 0)
    if code not in DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}", 4)
    if expected_code is not None and code != expected_code:
        raise FormatError(f"{path}: dtype code {code}, expected {expected_code}", 4)
    spacing = (sx, sy, sz)
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise FormatError(f"{path}: spacing must be positive, got {spacing}", 17)
    dtype = DTYPES[code]
    need = nx * ny * nz * dtype.itemsize
    have = len(raw) - HEADER.size
    if need != have:
        raise TruncationError(
            f"{path}: dims {nx}x{ny}x{nz} need {need} payload bytes, found {have}", HEADER.size + min(need, have))
    voxels = np.frombuffer(raw, dtype=dtype, offset=HEADER.size).reshape(nz, ny, nx).copy()
    return voxels, code, spacing


def save_volume(vol: VolumeCT, path) -> None:
    _write_svl(path, vol.voxels, 0, vol.spacing)


def load_volume(path, patient_id: str = "", dataset_id: str = "") -> VolumeCT:
    voxels, _, spacing = _read_svl(path, 0)
    return VolumeCT(voxels, spacing, patient_id, dataset_id)


def save_mask(mask: MaskVolume, path) -> None:
    _write_svl(path, mask.voxels, 1, mask.spacing)


def load_mask(path) -> MaskVolume:
    voxels, _, spacing = _read_svl(path, 1)
    if voxels.max(initial=0) > 1:
        raise FormatError(f"{path}: mask voxels must be 0 or 1", HEADER.size)
    return MaskVolume(voxels, spacing)


# ---------------------------------------------------------------------------
# windowing and slicing


def rescale_window(values, lo: float, hi: float) -> np.ndarray:
    if not lo < hi:
        raise ConfigError(f"window bounds need lo < hi, got [{lo}, {hi}]")
    v = np.clip(np.asarray(values, dtype=np.float64), lo, hi)
    scaled = 255.0 * (v - lo) / (hi - lo)
    # round half away from zero; scaled is non-negative here
    return np.floor(scaled + 0.5).astype(np.uint8)


def window_slice(hu_slice) -> np.ndarray:
    """H x W HU values to an H x W x 3 uint8 image."""
    return np.stack([rescale_window(hu_slice, lo, hi) for lo, hi in WINDOWS], axis=-1)


def pad_amounts(extent: int, multiple: int) -> tuple:
    target = -(-extent // multiple) * multiple
    extra = target - extent
    return extra // 2, extra - extra // 2


def pad_slice(image: np.ndarray, multiple: int):
    """Zero-pad the two leading axes symmetrically to a multiple; returns (padded, crop)."""
    top, bottom = pad_amounts(image.shape[0], multiple)
    left, right = pad_amounts(image.shape[1], multiple)
    widths = [(top, bottom), (left, right)] + [(0, 0)] * (image.ndim - 2)
    return np.pad(image, widths), (top, bottom, left, right)


def make_slices(vol: VolumeCT, mask: Optional[MaskVolume], stride: int = 1, num_stages: int = 5) -> list:
    if stride < 1:
        raise ConfigError(f"slice stride must be >= 1, got {stride}")
    if mask is not None and mask.voxels.shape != vol.voxels.shape:
        raise DataError(f"volume dims {vol.dims} and mask dims {mask.dims} differ")
    multiple = 2 ** (num_stages - 1)
    samples = []
    for z in range(0, vol.voxels.shape[0], stride):
        image, crop = pad_slice(window_slice(vol.voxels[z]), multiple)
        lab = mask.voxels[z] if mask is not None else np.zeros(vol.voxels.shape[1:], np.uint8)
        label, _ = pad_slice(lab, multiple)
        samples.append(SliceSample(image, label, (vol.patient_id, z), crop))
    return samples


def to_network_input(images) -> np.ndarray:
    """Stack H x W x 3 uint8 images into a float [B, 3, H, W] batch in [0, 1]."""
    arr = np.stack([np.asarray(im) for im in images]).astype(np.float64) / 255.0
    return arr.transpose(0, 3, 1, 2).copy()


def reassemble_mask(samples, shape) -> np.ndarray:
    """Undo padding and stack per-slice labels back into a ``(nz, ny, nx)`` array."""
    out = np.zeros(shape, dtype=np.uint8)
    for s in samples:
        top, bottom, left, right = s.crop
        h, w = s.label.shape
        out[s.source[1]] = s.label[top:h - bottom, left:w - right]
    return out


# ---------------------------------------------------------------------------
# manifests and folds


@dataclass
class ManifestRow:
    patient_id: str
    dataset_id: str
    volume_path: Path
    mask_path: Path


def read_manifest(path) -> list:
    path = Path(path)
    base = path.parent
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise DataError(f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {header}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 4 or not all(rec):
                raise DataError(f"{path}: row {lineno} needs four non-empty fields")
            pid, did, vp, mp = rec
            vpath, mpath = base / vp, base / mp
            for label, p in (("volume", vpath), ("mask", mpath)):
                if not p.is_file():
                    raise DataError(f"{path}: row {lineno}: {label} path {p} does not exist")
            rows.append(ManifestRow(pid, did, vpath, mpath))
    ids = [r.patient_id for r in rows]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate patient_id entries")
    return rows


def write_manifest(rows, path) -> None:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in rows:
            w.writerow([r.patient_id, r.dataset_id,
                        Path(r.volume_path).relative_to(path.parent).as_posix(),
                        Path(r.mask_path).relative_to(path.parent).as_posix()])


@dataclass
class Fold:
    train: list
    val: list
    test: list


@dataclass
class FoldSplit:
    k: int
    assignments: dict
    folds: list = field(default_factory=list)


def split_folds(manifest, k: int = 5, seed: int = 0, val_fraction: float = 0.1) -> FoldSplit:
    """Patient-level k-fold split stratified by dataset.

    ``manifest`` is a sequence of ``(patient_id, dataset_id)`` pairs or
    :class:`ManifestRow` objects.
    """
    if k < 2:
        raise SplitError(f"need k >= 2 folds, got {k}")
    pairs = [(r.patient_id, r.dataset_id) if isinstance(r, ManifestRow) else tuple(r) for r in manifest]
    by_dataset = {}
    for pid, did in pairs:
        by_dataset.setdefault(did, []).append(pid)
    assignments = {}
    for n, did in enumerate(sorted(by_dataset)):
        pids = sorted(by_dataset[did])
        if len(pids) < k:
            raise SplitError(f"dataset {did!r} has {len(pids)} patients, fewer than k={k}")
        order = np.random.default_rng([seed, n]).permutation(len(pids))
        for pos, idx in enumerate(order):
            assignments[pids[idx]] = pos % k
    everyone = sorted(assignments)
    folds = []
    for i in range(k):
        test = [p for p in everyone if assignments[p] == i]
        rest = [p for p in everyone if assignments[p] != i]
        n_val = max(1, int(round(val_fraction * len(rest))))
        picked = np.random.default_rng([seed, 1_000 + i]).permutation(len(rest))[:n_val]
        val = sorted(rest[j] for j in picked)
        train = [p for p in rest if p not in set(val)]
        folds.append(Fold(train, val, test))
    return FoldSplit(k, assignments, folds)
