import os
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from conftest import make_records
from sumnet.checkpoint import read_checkpoint
from sumnet.errors import NumericalError
from sumnet.metrics import aggregate, confusion, dice
from sumnet.model import SumNetConfig, build
from sumnet.train import (
    BEST_NAME, LOG_COLUMNS, LOG_NAME, crossval, epoch_checkpoint_name, infer_frame,
    infer_volume, partial_checkpoint_name, read_log, select_fold, summarize_folds,
    threshold_probs, train,
)


# thresholding and inference

def test_threshold_below_gives_empty_mask():
    assert not threshold_probs(np.full((4, 4), 0.4), 0.5).any()


def test_threshold_is_inclusive():
    np.testing.assert_array_equal(threshold_probs([0.49, 0.5, 0.51], 0.5), [0, 1, 1])


def test_threshold_zero_is_all_foreground():
    assert threshold_probs(np.random.default_rng(0).uniform(size=(3, 3)), 0.0).all()


def test_mask_equals_thresholded_probabilities(narrow_params, rng):
    frame = rng.uniform(size=(32, 32))
    mask, prob = infer_frame(narrow_params, frame, threshold=0.5)
    np.testing.assert_array_equal(mask, (prob >= 0.5).astype(np.uint8))


def test_infer_frame_crops_padding():
    params = build(SumNetConfig.from_base_width(1, (64, 64)), seed=0)
    mask, prob = infer_frame(params, np.random.default_rng(1).uniform(size=(50, 60)))
    assert mask.shape == prob.shape == (50, 60)


def test_infer_volume_shapes_and_timing(narrow_params, rng):
    volume = rng.uniform(size=(3, 1, 32, 32))
    result = infer_volume(narrow_params, volume, n_jobs=2)
    assert result.masks.shape == result.probs.shape == (3, 1, 32, 32)
    timing = result.timing
    assert len(timing.per_frame) == 3
    assert timing.total == pytest.approx(sum(timing.per_frame))
    assert min(timing.per_frame) <= timing.median <= max(timing.per_frame)
    assert list(timing.as_frame().columns) == ["frame", "seconds", "cpu_seconds"]


def test_infer_volume_matches_frame_inference(narrow_params, rng):
    volume = rng.uniform(size=(2, 1, 32, 32))
    result = infer_volume(narrow_params, volume, n_jobs=1)
    for i in range(2):
        mask, prob = infer_frame(narrow_params, volume[i, 0])
        np.testing.assert_array_equal(result.masks[i, 0], mask)
        np.testing.assert_allclose(result.probs[i, 0], prob, rtol=0, atol=1e-12)


def test_infer_volume_crops_record():
    record = make_records(1, frames=2, hw=(30, 50))[0]
    params = build(SumNetConfig.from_base_width(1, record.frames.shape[2:]), seed=0)
    assert infer_volume(params, record).masks.shape == (2, 1, 30, 50)


# training

def test_zero_epochs_writes_initial_checkpoint(train_config, tiny_records):
    cfg = replace(train_config, epochs=0)
    result = train(cfg, tiny_records)
    assert os.path.exists(os.path.join(result.checkpoint_dir, epoch_checkpoint_name(0)))
    log = pd.read_csv(os.path.join(result.checkpoint_dir, LOG_NAME))
    assert list(log.columns) == LOG_COLUMNS
    assert log.empty


def test_training_writes_log_and_checkpoints(train_config, tiny_records):
    result = train(replace(train_config, epochs=2), tiny_records)
    # 3 patients x 2 frames at batch size 2
    assert list(result.log["step"]) == list(range(1, 7))
    assert list(result.log["epoch"]) == [0, 0, 0, 1, 1, 1]
    assert np.isfinite(result.log["loss"]).all()
    for name in (epoch_checkpoint_name(1), epoch_checkpoint_name(2), BEST_NAME):
        assert os.path.exists(os.path.join(result.checkpoint_dir, name))
    entries = read_checkpoint(os.path.join(result.checkpoint_dir, epoch_checkpoint_name(2)))
    assert int(entries["adam.t"]) == 6
    assert int(entries["train.step"]) == 6


def test_same_seed_same_run(tmp_path, train_config, tiny_records):
    a = train(replace(train_config, checkpoint_dir=str(tmp_path / "a")), tiny_records)
    b = train(replace(train_config, checkpoint_dir=str(tmp_path / "b")), tiny_records)
    assert list(a.log["loss"]) == list(b.log["loss"])
    name = epoch_checkpoint_name(1)
    assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_resume_reproduces_unbroken_run(tmp_path, train_config, tiny_records):
    full = train(replace(train_config, checkpoint_dir=str(tmp_path / "full"), epochs=2), tiny_records)

    part_dir = str(tmp_path / "part")
    train(replace(train_config, checkpoint_dir=part_dir, epochs=1), tiny_records)
    resumed = train(replace(train_config, checkpoint_dir=part_dir, epochs=2,
                            resume=os.path.join(part_dir, epoch_checkpoint_name(1))), tiny_records)

    assert list(resumed.log["step"]) == list(full.log["step"])
    assert list(resumed.log["loss"]) == list(full.log["loss"])
    name = epoch_checkpoint_name(2)
    assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "part" / name).read_bytes()


def test_resume_mid_epoch_reproduces_unbroken_run(tmp_path, train_config, tiny_records):
    full = train(replace(train_config, checkpoint_dir=str(tmp_path / "full"), epochs=2), tiny_records)

    part_dir = str(tmp_path / "part")
    train(replace(train_config, checkpoint_dir=part_dir, epochs=2, max_steps=2), tiny_records)
    partial = os.path.join(part_dir, partial_checkpoint_name(0))
    entries = read_checkpoint(partial)
    assert int(entries["train.epoch"]) == 0
    assert int(entries["train.batch"]) == 2
    assert not os.path.exists(os.path.join(part_dir, epoch_checkpoint_name(1)))

    resumed = train(replace(train_config, checkpoint_dir=part_dir, epochs=2, resume=partial), tiny_records)
    assert list(resumed.log["step"]) == list(full.log["step"])
    assert list(resumed.log["epoch"]) == list(full.log["epoch"])
    assert list(resumed.log["loss"]) == list(full.log["loss"])
    assert resumed.best_loss == full.best_loss
    for name in (epoch_checkpoint_name(1), epoch_checkpoint_name(2), BEST_NAME):
        assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "part" / name).read_bytes()


def test_log_losses_read_back_exactly(tmp_path):
    path = tmp_path / LOG_NAME
    losses = [3.5365405212763092, 0.1 + 0.2, 1 / 3]
    pd.DataFrame({"step": [1, 2, 3], "epoch": [0, 0, 0], "loss": losses,
                  "wall_time": [0.0, 0.1, 0.2]}).to_csv(path, index=False)
    assert list(read_log(path)["loss"]) == losses


def test_held_out_patients_never_trained_on(train_config, tiny_records):
    result = train(replace(train_config, fold="1"), tiny_records)
    held = set(result.fold.held_out_patients)
    assert held
    assert not {pid for pid, _ in result.seen} & held
    assert {pid for pid, _ in result.seen} == set(result.fold.training_patients)


def test_select_fold_all_and_index(train_config):
    ids = ["a", "b", "c"]
    assert select_fold(train_config, ids) is None
    assert select_fold(replace(train_config, fold="2"), ids).index == 2


def test_non_finite_batch_is_reported(train_config):
    records = make_records(2)
    records[0].frames[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericalError, match="step"):
        train(train_config, records)
    dump = pd.read_csv(os.path.join(train_config.checkpoint_dir, "nonfinite_batch.csv"))
    assert ("blob000", 0) in set(zip(dump["patient"], dump["frame"]))


def test_max_steps_stops_early(train_config, tiny_records):
    result = train(replace(train_config, epochs=5, max_steps=4), tiny_records)
    assert len(result.log) == 4
    assert list(result.log["epoch"]) == [0, 0, 0, 1]
    assert os.path.exists(os.path.join(result.checkpoint_dir, epoch_checkpoint_name(1)))
    assert not os.path.exists(os.path.join(result.checkpoint_dir, epoch_checkpoint_name(2)))
    entries = read_checkpoint(os.path.join(result.checkpoint_dir, partial_checkpoint_name(1)))
    assert (int(entries["train.epoch"]), int(entries["train.batch"]), int(entries["train.step"])) == (1, 1, 4)


def test_max_steps_on_epoch_boundary_writes_no_partial(train_config, tiny_records):
    result = train(replace(train_config, epochs=5, max_steps=3), tiny_records)
    assert len(result.log) == 3
    assert os.path.exists(os.path.join(result.checkpoint_dir, epoch_checkpoint_name(1)))
    assert not any(name.endswith("_partial.sumn") for name in os.listdir(result.checkpoint_dir))


# cross-validation

def test_crossval_evaluates_each_frame_once(train_config, tiny_records):
    result = crossval(replace(train_config, folds=3), tiny_records, n_jobs=1)
    frames = result.frames
    assert len(frames) == 6
    assert not frames.duplicated(["patient", "frame"]).any()
    assert sorted(frames["patient"].unique()) == ["blob000", "blob001", "blob002"]
    assert list(result.summary["group"]) == [0, 1, 2, "all"]
    assert all("±" in v for v in result.table["dice"])
    for name in ("crossval_frames.csv", "crossval_summary.csv", "crossval_table.csv"):
        assert os.path.exists(os.path.join(train_config.checkpoint_dir, name))
    for k in range(3):
        assert os.path.isdir(os.path.join(train_config.checkpoint_dir, f"fold_{k:02d}"))


def test_pooled_mean_is_frame_weighted():
    rng = np.random.default_rng(5)
    frames = pd.DataFrame({
        "fold": np.repeat([0, 1, 2], [3, 5, 2]),
        "patient": np.repeat(["a", "b", "c"], [3, 5, 2]),
        "dice": rng.uniform(0.6, 1.0, size=10),
    })
    summary = summarize_folds(frames)
    per_fold = summary[summary["group"] != "all"]
    pooled = summary[summary["group"] == "all"].iloc[0]
    weighted = (per_fold["dice_mean"] * per_fold["frames"]).sum() / per_fold["frames"].sum()
    assert abs(pooled["dice_mean"] - weighted) < 1e-12
    assert pooled["frames"] == 10


def test_identical_scores_have_zero_spread():
    agg = aggregate([{"dice": 0.875}] * 4)
    assert agg.loc[0, "dice_mean"] == 0.875 and agg.loc[0, "dice_std"] == 0.0


# desk-scale overfit

@pytest.mark.slow
def test_overfits_four_blob_phantoms(tmp_path):
    from sumnet.config import TrainConfig

    records = make_records(4, frames=1, hw=(64, 96), seed=7)
    cfg = TrainConfig(checkpoint_dir=str(tmp_path), lr=1e-3, batch_size=4, epochs=300,
                      seed=0, base_width=16, log_every=50)
    result = train(cfg, records)
    assert len(result.log) == 300
    assert np.isfinite(result.log["loss"]).all()
    smoothed = result.log["loss"].rolling(50).mean()
    assert smoothed.iloc[-1] < smoothed.iloc[49]
    # each step sees all four frames; over the last 100 steps a 50-step mean
    # may rise by at most 1% from one step to the next
    tail = smoothed.iloc[-100:].to_numpy()
    assert (np.diff(tail) <= 0.01 * tail[:-1]).all()
    assert tail[-1] <= tail[0]

    for record in records:
        mask = infer_volume(result.params, record, n_jobs=1).masks
        gt = record.crop(record.masks["thyroid"])
        assert dice(confusion(mask[0, 0], gt[0, 0])) >= 0.95
