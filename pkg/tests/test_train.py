from dataclasses import replace

import numpy as np
import pytest

from phnn import data as D
from phnn.errors import CalibrationError, CheckpointError, ConfigError, DivergenceError, UninitializedError
from phnn.loss import estimate_beta
from phnn.metrics import dice
from phnn.model import build_model
from phnn.postproc import ProbabilityVolume
from phnn.synth import make_case
from phnn.train import (
    TrainConfig,
    calibrate_threshold,
    collect_slices,
    load_checkpoint,
    model_from_checkpoint,
    predict_volume,
    save_checkpoint,
    segment_volume,
    train,
    train_samples,
)


@pytest.fixture(scope="module")
def cases():
    out = {}
    for i in range(5):
        c = make_case(5, i)
        c.volume.patient_id = f"p{i}"
        c.volume.dataset_id = "large" if i < 3 else "small"
        out[f"p{i}"] = (c.volume, c.mask)
    return out


@pytest.fixture(scope="module")
def split(cases):
    return D.split_folds([(p, v.dataset_id) for p, (v, _) in cases.items()], 2, seed=0)


def test_config_validation():
    for bad in (dict(lr=-1.0), dict(momentum=1.0), dict(batch_size=0)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad).validate()


def test_per_dataset_stride(cases, split):
    cfg = TrainConfig(slice_stride={"large": 10}, default_stride=1)
    samples = collect_slices(["p0", "p4"], cases, cfg, 3)
    assert len(samples) == 4 + 32  # z = 0, 10, 20, 30 from the large dataset


def test_same_seed_same_bytes(tmp_path, cases, split, small_model_config, quick_train_config):
    paths = []
    for run in range(2):
        model = build_model(small_model_config)
        res = train(model, split, 0, cases, quick_train_config)
        p = tmp_path / f"c{run}.phn"
        save_checkpoint(res.checkpoint, p)
        paths.append(p)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_zero_lr_keeps_parameters(cases, small_model_config):
    model = build_model(small_model_config)
    before = {k: t.data.copy() for k, t in model.params.items()}
    # one full batch per epoch, so batch statistics see the same slices each time
    samples = collect_slices(["p0"], cases, TrainConfig(default_stride=4), 3)
    cfg = TrainConfig(lr=0.0, epochs=2, batch_size=len(samples), seed=1)
    res = train_samples(model, samples, cfg)
    for k, t in model.params.items():
        assert np.array_equal(t.data, before[k])
    per_epoch = {}
    for row in res.loss_log:
        per_epoch.setdefault(row[0], []).append(row[2])
    means = [np.mean(v) for _, v in sorted(per_epoch.items())]
    assert means[0] == pytest.approx(means[1], rel=1e-12)


def test_beta_is_estimated_from_fold_training_slices(cases, split, small_model_config, quick_train_config):
    res = train(build_model(small_model_config), split, 1, cases, quick_train_config)
    samples = collect_slices(split.folds[1].train, cases, quick_train_config, 3)
    assert res.beta == estimate_beta(s.label for s in samples)
    assert res.checkpoint.beta == res.beta


def test_fractional_epochs_floor_steps(cases, small_model_config):
    samples = collect_slices(["p0"], cases, TrainConfig(default_stride=4), 3)  # 8 slices, 2 per epoch at B=4
    res = train_samples(build_model(small_model_config), samples, TrainConfig(epochs=2.5, batch_size=4, default_stride=4))
    assert len(res.loss_log) == 5
    assert [r[0] for r in res.loss_log] == [0, 0, 1, 1, 2]


def test_loss_log_columns(cases, split, quick_train_config, small_model_config):
    res = train(build_model(replace(small_model_config, fusion_mode="hnn")), split, 0, cases, quick_train_config)
    assert all(len(r) == 2 + 1 + 3 + 1 for r in res.loss_log)
    for r in res.loss_log:
        assert r[2] == pytest.approx(sum(r[3:]), rel=1e-12)


def test_resume_reproduces_next_step(tmp_path, cases, split, small_model_config):
    cfg5 = TrainConfig(steps=5, batch_size=4, seed=3, default_stride=8)
    cfg6 = replace(cfg5, steps=6)
    straight = build_model(small_model_config)
    train(straight, split, 0, cases, cfg6)

    first = build_model(small_model_config)
    res = train(first, split, 0, cases, cfg5)
    save_checkpoint(res.checkpoint, tmp_path / "mid.phn")
    ckpt = load_checkpoint(tmp_path / "mid.phn")
    resumed = model_from_checkpoint(ckpt)
    train(resumed, split, 0, cases, cfg6, resume=ckpt)
    for k in straight.params:
        assert np.array_equal(straight.params[k].data, resumed.params[k].data), k


def test_checkpoint_save_load_save_identical(tmp_path, cases, split, small_model_config, quick_train_config):
    res = train(build_model(small_model_config), split, 0, cases, quick_train_config)
    res.checkpoint.calibrated_threshold = 0.35
    save_checkpoint(res.checkpoint, tmp_path / "a.phn")
    ck = load_checkpoint(tmp_path / "a.phn")
    save_checkpoint(ck, tmp_path / "b.phn")
    assert (tmp_path / "a.phn").read_bytes() == (tmp_path / "b.phn").read_bytes()
    assert ck.calibrated_threshold == 0.35
    assert set(ck.velocity) == set(ck.params)
    assert "stage1.bn.running_var" in ck.buffers


def test_checkpoint_corrupt_magic(tmp_path):
    p = tmp_path / "bad.phn"
    p.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CheckpointError, match="offset 0"):
        load_checkpoint(p)


def test_divergence_aborts_with_last_finite_checkpoint(cases, split, small_model_config):
    cfg = TrainConfig(lr=1e308, momentum=0.0, steps=50, batch_size=4, default_stride=4, seed=0)
    with pytest.raises(DivergenceError) as info:
        train(build_model(small_model_config), split, 0, cases, cfg)
    ck = info.value.checkpoint
    assert ck is not None
    assert all(np.isfinite(v).all() for v in ck.params.values())


def _trained(cases, small_model_config):
    model = build_model(small_model_config)
    samples = collect_slices(["p0"], cases, TrainConfig(default_stride=8), 3)
    train_samples(model, samples, TrainConfig(steps=1, batch_size=4))
    return model


def test_calibration_tie_rule_and_single_grid(cases, small_model_config):
    model = _trained(cases, small_model_config)
    _, mask = cases["p0"]
    confident = ProbabilityVolume(np.where(mask.voxels == 1, 1 - 1e-9, 1e-9))
    assert calibrate_threshold(model, [(confident, mask)]) == 0.05
    partial = ProbabilityVolume(np.where(mask.voxels == 1, 0.6, 0.0))
    assert calibrate_threshold(model, [(partial, mask)]) == 0.05
    assert calibrate_threshold(model, [(partial, mask)], grid=[0.7]) == 0.7
    with pytest.raises(CalibrationError):
        calibrate_threshold(model, [])


def test_calibration_sweep_oracle(cases, small_model_config):
    model = _trained(cases, small_model_config)
    vol, mask = cases["p1"]
    pv = predict_volume(model, vol)
    from phnn.postproc import THRESHOLD_GRID, postprocess

    scores = [dice(postprocess(pv, t), mask) for t in THRESHOLD_GRID]
    expected = THRESHOLD_GRID[int(np.argmax(scores))]  # argmax returns the first (lowest) maximum
    assert calibrate_threshold(model, [(vol, mask)]) == expected


def test_segment_requires_batchnorm_statistics(cases, small_model_config):
    with pytest.raises(UninitializedError):
        segment_volume(build_model(small_model_config), cases["p0"][0], 0.5)


def test_segment_half_probabilities_above_threshold_is_empty(cases, small_model_config):
    model = _trained(cases, small_model_config)
    for k, t in model.params.items():
        if ".side." in k:
            t.data = np.zeros_like(t.data)
    out = segment_volume(model, cases["p0"][0], 0.6)
    assert out.voxels.sum() == 0


def test_segment_crops_to_input_extent(small_model_config, cases):
    model = _trained(cases, small_model_config)
    vol = D.VolumeCT(np.random.default_rng(0).integers(-1000, 100, size=(3, 21, 30)), (1, 1, 1))
    out = segment_volume(model, vol, 0.5)
    assert out.voxels.shape == vol.voxels.shape and out.dims == (30, 21, 3)
