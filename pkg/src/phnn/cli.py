"""Command-line entry point.

Exit codes: 0 success, 1 unexpected failure, 2 configuration error,
3 data error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from . import tensor as T
from .checks import run_suite
from .config import load_config
from .errors import ConfigError, DataError, DivergenceError, PHNNError
from .metrics import cumulative_histogram, default_edges, evaluate_case, write_histogram, write_report
from .model import build_model
from .synth import write_corpus
from .train import (
    calibrate_threshold,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    segment_volume,
    train,
    write_loss_log,
)

log = logging.getLogger("phnn")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4


def write_run_manifest(path, command, args, seed=None, config=None, inputs=(), outputs=()):
    record = {
        "command": command,
        "config_path": str(config) if config else None,
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "tool_version": __version__,
        "argv": {k: str(v) for k, v in sorted(vars(args).items()) if k != "func"},
    }
    Path(path).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_case(row: D.ManifestRow):
    vol = D.load_volume(row.volume_path, row.patient_id, row.dataset_id)
    mask = D.load_mask(row.mask_path)
    if mask.voxels.shape != vol.voxels.shape:
        raise DataError(f"{row.patient_id}: volume dims {vol.dims} and mask dims {mask.dims} differ")
    return vol, mask


def cmd_synth(args) -> int:
    if args.cases < 1:
        raise ConfigError("--cases must be at least 1")
    out = Path(args.out)
    rows = write_corpus(out, args.cases, args.seed)
    write_run_manifest(out / "run_manifest.json", "synth", args, seed=args.seed,
                       outputs=[out / "manifest.csv"])
    log.info("wrote %d synthetic cases to %s", len(rows), out)
    return EXIT_OK


def cmd_split(args) -> int:
    rows = D.read_manifest(args.manifest)
    split = D.split_folds(rows, args.k, args.seed, args.val_fraction)
    lines = ["patient_id,dataset_id,fold"]
    lines += [f"{r.patient_id},{r.dataset_id},{split.assignments[r.patient_id]}" for r in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_preprocess(args) -> int:
    vol = D.load_volume(args.volume)
    mask = D.load_mask(args.mask) if args.mask else None
    samples = D.make_slices(vol, mask, args.stride, args.num_stages)
    np.savez_compressed(
        args.out,
        images=np.stack([s.image for s in samples]),
        labels=np.stack([s.label for s in samples]),
        z=np.array([s.source[1] for s in samples]),
        crop=np.array(samples[0].crop if samples else (0, 0, 0, 0)),
    )
    return EXIT_OK


def cmd_train(args) -> int:
    run = load_config(args.config)
    tcfg = run.train
    if not 0 <= args.fold < tcfg.folds:
        raise ConfigError(f"--fold {args.fold} outside 0..{tcfg.folds - 1}")
    rows = D.read_manifest(args.manifest)
    split = D.split_folds(rows, tcfg.folds, tcfg.seed, tcfg.val_fraction)
    fold = split.folds[args.fold]
    by_id = {r.patient_id: r for r in rows}
    cases = {pid: load_case(by_id[pid]) for pid in fold.train + fold.val}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(run.model)
    fused = run.model.fusion_mode == "hnn"
    try:
        result = train(model, split, args.fold, cases, tcfg)
    except DivergenceError as exc:
        if exc.checkpoint is not None:
            save_checkpoint(exc.checkpoint, out / "checkpoint_last_finite.phn")
        raise
    ckpt = result.checkpoint
    ckpt.calibrated_threshold = calibrate_threshold(model, [cases[p] for p in fold.val])
    save_checkpoint(ckpt, out / "checkpoint.phn")
    write_loss_log(result.loss_log, run.model.num_stages, fused, out / "loss_log.csv")
    with open(out / "folds.csv", "w", encoding="utf-8") as fh:
        fh.write("patient_id,role\n")
        for role in ("train", "val", "test"):
            for pid in getattr(fold, role):
                fh.write(f"{pid},{role}\n")
    write_run_manifest(out / "run_manifest.json", "train", args, seed=tcfg.seed, config=args.config,
                       inputs=[args.manifest], outputs=[out / "checkpoint.phn", out / "loss_log.csv"])
    log.info("fold %d: beta=%.6f threshold=%.2f", args.fold, result.beta, ckpt.calibrated_threshold)
    return EXIT_OK


def cmd_segment(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    t = args.threshold if args.threshold is not None else ckpt.calibrated_threshold
    if t is None:
        raise ConfigError("checkpoint has no calibrated threshold; pass --threshold")
    model = model_from_checkpoint(ckpt)
    vol = D.load_volume(args.volume)
    mask = segment_volume(model, vol, t)
    D.save_mask(mask, args.out)
    write_run_manifest(str(args.out) + ".run.json", "segment", args, config=args.checkpoint,
                       inputs=[args.volume, args.checkpoint], outputs=[args.out])
    return EXIT_OK


def _eval_one(pair):
    pid, pred_path, gt_path = pair
    try:
        if pred_path is None:
            raise DataError(f"{pid}: no prediction file")
        pred, gt = D.load_mask(pred_path), D.load_mask(gt_path)
        if pred.voxels.shape != gt.voxels.shape:
            raise DataError(f"{pid}: prediction dims {pred.dims} differ from ground truth {gt.dims}")
        return evaluate_case(pid, pred, gt), None
    except PHNNError as exc:
        return None, f"{pid}: {exc}"


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    gts = sorted(gt_dir.glob("*.svl"))
    if not gts:
        raise DataError(f"no .svl masks in {gt_dir}")
    pairs = []
    for g in gts:
        p = pred_dir / g.name
        pairs.append((g.stem, p if p.is_file() else None, g))
    workers = T.num_threads_from_env()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_eval_one, pairs))
    else:
        results = [_eval_one(p) for p in pairs]
    records = [r for r, _ in results if r is not None]
    errors = [e for _, e in results if e is not None]
    for e in errors:
        log.error(e)
    if records:
        write_report(records, args.out)
    else:
        Path(args.out).write_text("patient_id,dice,asd_mm,pred_voxels,gt_voxels\n", encoding="utf-8")
    if errors:
        with open(args.out, "a", encoding="utf-8") as fh:
            for (pid, _, _), (rec, err) in zip(pairs, results):
                if err is not None:
                    fh.write(f"{pid},error,error,,\n")
    if args.hist and records:
        write_histogram(cumulative_histogram(records, default_edges()), args.hist)
    write_run_manifest(str(args.out) + ".run.json", "eval", args, inputs=[pred_dir, gt_dir],
                       outputs=[args.out] + ([args.hist] if args.hist else []))
    return EXIT_DATA if errors else EXIT_OK


def cmd_gradcheck(args) -> int:
    run = load_config(args.config)
    g = run.gradcheck
    rows = run_suite(
        run.model if args.config else None,
        seed=int(g.get("seed", 0)),
        max_elements=int(g.get("max_elements", 24)),
        size=int(g.get("size", 16)),
    )
    ok = True
    for name, err, tol in rows:
        passed = err < tol
        ok &= passed
        sys.stdout.write(f"{name}\t{err:.3e}\t{tol:.0e}\t{'PASS' if passed else 'FAIL'}\n")
    return EXIT_OK if ok else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="phnn", description="Progressive holistically-nested lung segmentation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic CT corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--cases", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="patient-level k-fold assignment")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("preprocess", help="window and pad the axial slices of one volume")
    p.add_argument("--volume", required=True)
    p.add_argument("--mask")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--num-stages", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train one cross-validation fold")
    p.add_argument("--manifest", required=True)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="segment one volume with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", help="Dice/ASD report for a directory of predictions")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--hist")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--config")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    T.set_num_threads(T.num_threads_from_env())
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        threadpool_limits = None
    try:
        if threadpool_limits is not None:
            # BLAS stays single-threaded; PHNN_THREADS only fans out per-sample work
            with threadpool_limits(limits=1):
                return args.func(args)
        return args.func(args)
    except DivergenceError as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except DataError as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except PHNNError as exc:
        log.error("%s", exc)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
