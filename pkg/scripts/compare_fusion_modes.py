"""Held-out Dice/ASD of P-HNN vs HNN on a synthetic 40-case corpus (2 of 5 folds)."""

import argparse
import logging

from threadpoolctl import threadpool_limits

from phnn import experiment


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--cases", type=int, default=40)
    ap.add_argument("--folds", type=int, nargs="+", default=[0, 1])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    with threadpool_limits(limits=1):
        res = experiment.run(args.cases, folds=tuple(args.folds), seed=args.seed)
    print("patient_id,fold,mode,threshold,dice,asd_mm," + ",".join(f"dice_s{m + 1}" for m in range(3)))
    for c in res.cases:
        print(f"{c.patient_id},{c.fold},{c.mode},{c.threshold:.2f},{c.dice:.6f},{c.asd_mm:.6f},"
              + ",".join(f"{d:.6f}" for d in c.side_dice))
    for mode in ("phnn_cumulative", "hnn"):
        sides = ", ".join(f"{d:.4f}" for d in res.mean_side_dice(mode))
        print(f"# {mode}: mean dice {res.mean_dice(mode):.4f}, mean asd {res.mean_asd(mode):.3f} mm, "
              f"side outputs [{sides}]")
    print(f"# runtime {res.seconds:.0f} s")


if __name__ == "__main__":
    main()
