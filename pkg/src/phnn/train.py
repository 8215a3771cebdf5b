"""SGD-with-momentum training, checkpoints, threshold calibration and inference."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import data as D
from .errors import CalibrationError, CheckpointError, ConfigError, DataError, DivergenceError, UninitializedError
from .loss import LossSpec, estimate_beta, side_losses, sum_losses
from .metrics import dice
from .model import Model, ModelConfig, build_model, forward
from .postproc import THRESHOLD_GRID, ProbabilityVolume, postprocess
from .tensor import BatchNormState

log = logging.getLogger(__name__)

CKPT_MAGIC = b"PHN1"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 4
    epochs: float = 13.5
    steps: Optional[int] = None  # overrides epochs when set
    seed: int = 0
    slice_stride: dict = field(default_factory=dict)
    default_stride: int = 1
    val_fraction: float = 0.1
    folds: int = 5

    def validate(self) -> None:
        failed = []
        if not self.lr >= 0:
            failed.append("lr >= 0")
        if not 0 <= self.momentum < 1:
            failed.append("0 <= momentum < 1")
        if self.batch_size < 1:
            failed.append("batch_size >= 1")
        if not self.epochs > 0 and self.steps is None:
            failed.append("epochs > 0")
        if self.steps is not None and self.steps < 0:
            failed.append("steps >= 0")
        if self.default_stride < 1 or any(s < 1 for s in self.slice_stride.values()):
            failed.append("slice strides >= 1")
        if failed:
            raise ConfigError("invalid TrainConfig: " + "; ".join(failed))

    def stride_for(self, dataset_id: str) -> int:
        return int(self.slice_stride.get(dataset_id, self.default_stride))


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model_config: dict
    train_config: dict
    params: dict
    buffers: dict
    bn_tracked: dict
    velocity: dict
    step: int = 0
    steps_per_epoch: int = 1
    beta: Optional[float] = None
    calibrated_threshold: Optional[float] = None

    @property
    def epoch(self) -> float:
        return self.step / self.steps_per_epoch

    def header(self) -> dict:
        return {
            "model_config": self.model_config,
            "train_config": self.train_config,
            "meta": {
                "step": self.step,
                "steps_per_epoch": self.steps_per_epoch,
                "epoch": self.epoch,
                "beta": self.beta,
                "calibrated_threshold": self.calibrated_threshold,
                "bn_tracked": {str(k): v for k, v in self.bn_tracked.items()},
                "rng": {"seed": self.train_config.get("seed", 0), "step": self.step},
            },
        }


def _tensor_groups(ckpt: Checkpoint):
    yield "param", ckpt.params
    yield "buffer", ckpt.buffers
    yield "velocity", ckpt.velocity


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    entries, blobs, offset = [], [], 0
    for kind, group in _tensor_groups(ckpt):
        for name, arr in group.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            entries.append({"kind": kind, "name": name, "shape": list(arr.shape), "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
    head = ckpt.header()
    head["tensors"] = entries
    head["payload_bytes"] = offset
    raw = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<HI", CKPT_VERSION, len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic {raw[:4]!r}", 0)
    if len(raw) < 10:
        raise CheckpointError(f"{path}: truncated checkpoint header", len(raw))
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}", 4)
    start = 10 + hlen
    try:
        head = json.loads(raw[10:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}", 10) from None
    payload = memoryview(raw)[start:]
    if len(payload) != head.get("payload_bytes"):
        raise CheckpointError(
            f"{path}: payload has {len(payload)} bytes, header says {head.get('payload_bytes')}", start)
    groups = {"param": {}, "buffer": {}, "velocity": {}}
    for e in head["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=e["offset"])
        groups[e["kind"]][e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    meta = head["meta"]
    return Checkpoint(
        model_config=head["model_config"],
        train_config=head["train_config"],
        params=groups["param"],
        buffers=groups["buffer"],
        bn_tracked={int(k): v for k, v in meta["bn_tracked"].items()},
        velocity=groups["velocity"],
        step=meta["step"],
        steps_per_epoch=meta["steps_per_epoch"],
        beta=meta["beta"],
        calibrated_threshold=meta["calibrated_threshold"],
    )


def snapshot(model: Model, cfg: TrainConfig, velocity: dict, step: int, steps_per_epoch: int,
             beta=None, threshold=None) -> Checkpoint:
    return Checkpoint(
        model_config=model.config.to_dict(),
        train_config=train_config_dict(cfg),
        params={k: t.data.copy() for k, t in model.params.items()},
        buffers={k: v.copy() for k, v in model.buffers().items()},
        bn_tracked={i: st.tracked for i, st in model.bn_states.items()},
        velocity={k: v.copy() for k, v in velocity.items()},
        step=step,
        steps_per_epoch=steps_per_epoch,
        beta=beta,
        calibrated_threshold=threshold,
    )


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    model = build_model(ModelConfig.from_dict(ckpt.model_config))
    if set(ckpt.params) != set(model.params):
        missing = sorted(set(model.params) ^ set(ckpt.params))
        raise CheckpointError(f"checkpoint parameter names do not match the model schema: {missing}")
    for name, t in model.params.items():
        if ckpt.params[name].shape != t.shape:
            raise CheckpointError(f"checkpoint tensor {name} has shape {ckpt.params[name].shape}, expected {t.shape}")
        t.data = ckpt.params[name].copy()
    for i in model.bn_states:
        model.bn_states[i] = BatchNormState(
            ckpt.buffers[f"stage{i}.bn.running_mean"].copy(),
            ckpt.buffers[f"stage{i}.bn.running_var"].copy(),
            int(ckpt.bn_tracked.get(i, 0)),
        )
    return model


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    loss_log: list
    beta: float


def loss_log_header(num_stages: int, fused: bool) -> list:
    cols = ["epoch", "step", "total_loss"] + [f"loss_s{m}" for m in range(1, num_stages + 1)]
    return cols + (["loss_fused"] if fused else [])


def write_loss_log(rows, num_stages: int, fused: bool, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(loss_log_header(num_stages, fused))
        for r in rows:
            w.writerow([r[0], r[1]] + [repr(float(v)) for v in r[2:]])


def collect_slices(patients, cases, cfg: TrainConfig, num_stages: int) -> list:
    samples = []
    for pid in patients:
        vol, mask = cases[pid]
        samples.extend(D.make_slices(vol, mask, cfg.stride_for(vol.dataset_id), num_stages))
    return samples


def batch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def train_samples(model: Model, samples: list, cfg: TrainConfig, resume: Optional[Checkpoint] = None) -> TrainResult:
    """Train on an explicit list of slices."""
    cfg.validate()
    if not samples:
        raise DataError("training set is empty")
    mcfg = model.config
    fused = mcfg.fusion_mode == "hnn"
    beta = estimate_beta(s.label for s in samples)
    spec = LossSpec(beta, include_fused=fused)
    n = len(samples)
    spe = math.ceil(n / cfg.batch_size)
    total_steps = cfg.steps if cfg.steps is not None else int(math.floor(cfg.epochs * spe))
    velocity = {k: np.zeros_like(t.data) for k, t in model.params.items()}
    step = 0
    if resume is not None:
        velocity = {k: v.copy() for k, v in resume.velocity.items()}
        step = resume.step
    log.info("training on %d slices, beta=%.6f, %d steps (%d per epoch)", n, beta, total_steps, spe)

    rows = []
    last_good = snapshot(model, cfg, velocity, step, spe, beta)
    while step < total_steps:
        epoch, pos = divmod(step, spe)
        idx = batch_order(cfg.seed, epoch, n)[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]
        batch = [samples[i] for i in idx]
        x = D.to_network_input([s.image for s in batch])
        y = np.stack([s.label for s in batch])[:, None].astype(np.float64)
        model.zero_grad()
        result = forward(model, x, training=True)
        terms = side_losses(result, y, spec)
        total = sum_losses(terms)
        values = [total.item()] + [t.item() for t in terms]
        if not all(math.isfinite(v) for v in values):
            raise DivergenceError(f"non-finite loss at step {step} (epoch {epoch})", last_good)
        total.backward()
        # overflow here is caught by the finiteness check below
        with np.errstate(over="ignore", invalid="ignore"):
            for name, t in model.params.items():
                g = t.grad if t.grad is not None else 0.0
                velocity[name] = cfg.momentum * velocity[name] - cfg.lr * g
                t.data = t.data + velocity[name]
        if not all(np.isfinite(t.data).all() for t in model.params.values()):
            raise DivergenceError(f"non-finite parameters after step {step} (epoch {epoch})", last_good)
        rows.append((epoch, step, *values))
        step += 1
        if step % spe == 0 or step == total_steps:
            last_good = snapshot(model, cfg, velocity, step, spe, beta)
    return TrainResult(snapshot(model, cfg, velocity, step, spe, beta), rows, beta)


def train(model: Model, folds: D.FoldSplit, fold_index: int, cases: dict, cfg: TrainConfig,
          resume: Optional[Checkpoint] = None) -> TrainResult:
    """Train on one fold. ``cases`` maps patient_id to ``(VolumeCT, MaskVolume)``."""
    if not 0 <= fold_index < folds.k:
        raise ConfigError(f"fold index {fold_index} outside 0..{folds.k - 1}")
    patients = folds.folds[fold_index].train
    samples = collect_slices(patients, cases, cfg, model.config.num_stages)
    return train_samples(model, samples, cfg, resume)


# ---------------------------------------------------------------------------
# inference


def predict_volume(model: Model, vol: D.VolumeCT, batch_size: int = 8, sides: bool = False):
    """Eval-mode probability volume of the final output.

    With ``sides=True`` returns ``(final, [stage_1, ..., stage_M])``.
    """
    if not model.bn_initialized:
        raise UninitializedError("model has no batch-norm running statistics; train it first")
    samples = D.make_slices(vol, None, 1, model.config.num_stages)
    nz, ny, nx = vol.voxels.shape
    final = np.zeros((nz, ny, nx))
    per_side = [np.zeros((nz, ny, nx)) for _ in range(model.config.num_stages)] if sides else []
    for start in range(0, nz, batch_size):
        chunk = samples[start:start + batch_size]
        res = forward(model, D.to_network_input([s.image for s in chunk]), training=False)
        for b, s in enumerate(chunk):
            top, bottom, left, right = s.crop
            h, w = s.image.shape[:2]
            window = (slice(top, h - bottom), slice(left, w - right))
            final[s.source[1]] = res.final.probability.data[b, 0][window]
            for m, so in enumerate(res.side_outputs if sides else []):
                per_side[m][s.source[1]] = so.probability.data[b, 0][window]
    pv = ProbabilityVolume(final, vol.spacing)
    if sides:
        return pv, [ProbabilityVolume(p, vol.spacing) for p in per_side]
    return pv


def segment_volume(model: Model, vol: D.VolumeCT, threshold: float) -> D.MaskVolume:
    return postprocess(predict_volume(model, vol), threshold)


def calibrate_threshold(model: Model, val_cases, grid=THRESHOLD_GRID) -> float:
    """Grid threshold with the best mean post-processed Dice; ties go to the lower value.

    ``val_cases`` is a sequence of ``(VolumeCT, MaskVolume)`` pairs, or of
    ``(ProbabilityVolume, MaskVolume)`` pairs when predictions are precomputed.
    """
    val_cases = list(val_cases)
    if not val_cases:
        raise CalibrationError("threshold calibration needs at least one validation case")
    grid = sorted(grid)
    if not grid:
        raise CalibrationError("threshold grid is empty")
    probs = [(p if isinstance(p, ProbabilityVolume) else predict_volume(model, p), m) for p, m in val_cases]
    best_t, best_score = grid[0], -1.0
    for t in grid:
        score = float(np.mean([dice(postprocess(pv, t), m) for pv, m in probs]))
        if score > best_score:
            best_t, best_score = t, score
    log.info("calibrated threshold %.2f (mean validation dice %.4f)", best_t, best_score)
    return float(best_t)
