"""Cross-validated comparison of fusion modes on the synthetic corpus."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import data as D
from .metrics import asd, dice
from .model import ModelConfig, build_model
from .postproc import postprocess
from .synth import DATASETS, make_case
from .train import TrainConfig, calibrate_threshold, predict_volume, train

log = logging.getLogger(__name__)


@dataclass
class CaseResult:
    patient_id: str
    fold: int
    mode: str
    threshold: float
    dice: float
    asd_mm: float
    side_dice: list


@dataclass
class ExperimentResult:
    cases: list = field(default_factory=list)
    seconds: float = 0.0

    def mean_dice(self, mode: str) -> float:
        return float(np.mean([c.dice for c in self.cases if c.mode == mode]))

    def mean_side_dice(self, mode: str) -> list:
        rows = np.array([c.side_dice for c in self.cases if c.mode == mode])
        return rows.mean(axis=0).tolist()

    def mean_asd(self, mode: str) -> float:
        vals = np.array([c.asd_mm for c in self.cases if c.mode == mode])
        return float(np.nanmean(vals))


def synthetic_cases(n: int, seed: int) -> dict:
    cases = {}
    for i in range(n):
        c = make_case(seed, i)
        pid = f"case{i:03d}"
        c.volume.patient_id = pid
        c.volume.dataset_id = DATASETS[0] if i < (n + 1) // 2 else DATASETS[1]
        cases[pid] = (c.volume, c.mask)
    return cases


def run(n_cases: int = 40, k: int = 5, folds=(0, 1), modes=("phnn_cumulative", "hnn"), seed: int = 0,
        num_stages: int = 3, width=Fraction(1, 8), train_cfg: TrainConfig = None) -> ExperimentResult:
    start = time.time()
    cases = synthetic_cases(n_cases, seed)
    split = D.split_folds([(pid, v.dataset_id) for pid, (v, _) in cases.items()], k, seed)
    cfg = train_cfg or TrainConfig(seed=seed, slice_stride={DATASETS[0]: 2})
    out = ExperimentResult()
    for fold in folds:
        f = split.folds[fold]
        for mode in modes:
            model = build_model(ModelConfig(num_stages=num_stages, width_multiplier=width,
                                            fusion_mode=mode, seed=seed))
            train(model, split, fold, cases, cfg)
            t = calibrate_threshold(model, [cases[p] for p in f.val])
            for pid in f.test:
                vol, gt = cases[pid]
                final, sides = predict_volume(model, vol, sides=True)
                pred = postprocess(final, t)
                side_d = [dice(postprocess(s, t), gt) for s in sides]
                try:
                    a = asd(pred, gt)
                except Exception:
                    a = float("nan")
                out.cases.append(CaseResult(pid, fold, mode, t, dice(pred, gt), a, side_d))
            log.info("fold %d %s: threshold %.2f, mean dice %.4f", fold, mode, t,
                     np.mean([c.dice for c in out.cases if c.mode == mode and c.fold == fold]))
    out.seconds = time.time() - start
    return out
