"""Regenerate the golden SVL1 and PHN1 files under tests/golden.

The files are committed; rerunning this script must reproduce them byte for
byte. Tests only round-trip them, so regenerate only after a deliberate
format change.
"""

import argparse
from fractions import Fraction
from pathlib import Path

import numpy as np

from phnn import data as D
from phnn.model import ModelConfig, build_model
from phnn.train import TrainConfig, save_checkpoint, snapshot

ROOT = Path(__file__).resolve().parents[1]


def golden_volume() -> D.VolumeCT:
    # x-fastest storage is easy to read off: value = 100*z + 10*y + x - 1024
    z, y, x = np.meshgrid(np.arange(3), np.arange(4), np.arange(5), indexing="ij")
    vox = (100 * z + 10 * y + x - 1024).astype(np.int16)
    vox[2, 3, 4] = 3071
    return D.VolumeCT(vox, (0.75, 0.5, 2.5), "golden", "golden")


def golden_mask() -> D.MaskVolume:
    vox = np.zeros((3, 4, 5), np.uint8)
    vox[1, 1:3, 1:4] = 1
    vox[0, 0, 0] = 1
    return D.MaskVolume(vox, (0.75, 0.5, 2.5))


def golden_checkpoint():
    cfg = ModelConfig(num_stages=3, convs_per_stage=[1, 1, 1], width_multiplier=Fraction(1, 32), seed=7)
    model = build_model(cfg)
    rng = np.random.default_rng(7)
    for i, st in model.bn_states.items():
        st.running_mean = rng.normal(size=st.running_mean.shape)
        st.running_var = rng.uniform(0.5, 2.0, size=st.running_var.shape)
        st.tracked = 3
    velocity = {k: rng.normal(0.0, 1e-3, size=t.shape) for k, t in model.params.items()}
    return snapshot(model, TrainConfig(seed=7), velocity, step=3, steps_per_epoch=2, beta=0.9, threshold=0.45)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default=str(ROOT / "tests" / "golden"))
    args = parser.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    D.save_volume(golden_volume(), out / "volume.svl")
    D.save_mask(golden_mask(), out / "mask.svl")
    save_checkpoint(golden_checkpoint(), out / "checkpoint.phn")


if __name__ == "__main__":
    main()
