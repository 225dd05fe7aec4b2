"""
Training loop, frame-wise volume inference, evaluation and cross-validation.
"""
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .checkpoint import read_checkpoint, write_checkpoint
from .config import default_n_jobs
from .data_access import batch_iter, crop, load_dataset, make_folds, pad_to_multiple
from .errors import NumericalError, ValidationError
from .metrics import aggregate, evaluate_masks, format_summary
from .model import ModelParams, LayerParams, SumNetConfig, build, forward, params_from_entries
from .optim import AdamState, adam_step, grads_by_name
from .phantom import synth_phantom
from .tensor import Tape, backward, grad_check
from .utils import Stopwatch, ensure_dir, get_logger
from .weighting import wce_loss, weight_map

logger = get_logger(__name__)

LOG_COLUMNS = ["step", "epoch", "loss", "wall_time"]
LOG_NAME = "train_log.csv"
BEST_NAME = "best.sumn"


def epoch_checkpoint_name(epoch):
    return f"epoch_{epoch:03d}.sumn"


def partial_checkpoint_name(epoch):
    # epoch is 0-based and still in progress
    return f"epoch_{epoch + 1:03d}_partial.sumn"


def read_log(path):
    return pd.read_csv(path, float_precision="round_trip")


@dataclass
class TrainResult:
    params: ModelParams
    state: AdamState
    log: pd.DataFrame
    checkpoint_dir: str
    best_loss: float
    seen: set = field(default_factory=set)
    fold: object = None


def select_fold(config, patient_ids, fold_index=None):
    """The fold to train on, or None to train on every patient."""
    idx = fold_index if fold_index is not None else config.fold_index()
    if idx is None:
        return None
    split = make_folds(patient_ids, config.folds or None, config.seed)
    if not 0 <= idx < len(split):
        raise ValidationError(f"fold {idx} out of range for {len(split)} folds")
    return split[idx]


def _structure(config, records):
    structure = config.structure or next(iter(records[0].masks), "")
    for r in records:
        if structure not in r.masks:
            raise ValidationError(f"patient {r.patient_id} has no '{structure}' mask")
    return structure


def _checkpoint_entries(params, state, epoch, step, best, batch=0):
    entries = params.to_entries()
    entries.update(state.to_entries())
    entries["train.epoch"] = np.array(float(epoch))
    entries["train.step"] = np.array(float(step))
    entries["train.best_loss"] = np.array(best)
    entries["train.batch"] = np.array(float(batch))
    return entries


def _batches_per_epoch(records, fold, batch_size):
    allowed = set(fold.training_patients) if fold is not None else None
    n = sum(r.n_frames for r in records if allowed is None or r.patient_id in allowed)
    return math.ceil(n / batch_size)


def _dump_bad_batch(ckpt_dir, step, provenance):
    path = os.path.join(ckpt_dir, "nonfinite_batch.csv")
    pd.DataFrame(provenance, columns=["patient", "frame"]).assign(step=step).to_csv(path, index=False)
    return path


def train(config, records=None, fold_index=None):
    """
    Adam on weighted BCE. Writes a per-step CSV log, a checkpoint per epoch
    and the best-epoch-loss checkpoint into ``config.checkpoint_dir``. A
    ``max_steps`` stop inside an epoch writes a partial checkpoint holding the
    batch offset, and resuming from it finishes that epoch.
    """
    config.validate()
    if records is None:
        records = load_dataset(config.manifest)
    if not records:
        raise ValidationError("no volumes to train on")
    structure = _structure(config, records)
    fold = select_fold(config, [r.patient_id for r in records], fold_index)
    held_out = set(fold.held_out_patients) if fold is not None else set()

    ckpt_dir = ensure_dir(config.checkpoint_dir)
    log_path = os.path.join(ckpt_dir, LOG_NAME)
    input_hw = tuple(records[0].frames.shape[2:])
    model_cfg = SumNetConfig.from_base_width(config.base_width, input_hw)

    params = build(model_cfg, config.seed)
    state = AdamState.zeros_like(params)
    start_epoch, start_batch, step, best = 0, 0, 0, math.inf
    rows = []
    if config.resume:
        entries = read_checkpoint(config.resume)
        params = params_from_entries(entries, model_cfg)
        state = AdamState.from_entries(entries, params) or AdamState.zeros_like(params)
        start_epoch = int(entries.get("train.epoch", 0))
        step = int(entries.get("train.step", 0))
        best = float(entries.get("train.best_loss", math.inf))
        start_batch = int(entries.get("train.batch", 0))
        if os.path.exists(log_path):
            prior = read_log(log_path)
            rows = prior[prior["step"] <= step].to_dict("records")
        logger.info("resuming from %s at epoch %d, batch %d, step %d",
                    config.resume, start_epoch, start_batch, step)

    if config.epochs == 0 or start_epoch >= config.epochs:
        write_checkpoint(
            os.path.join(ckpt_dir, epoch_checkpoint_name(start_epoch)),
            _checkpoint_entries(params, state, start_epoch, step, best),
        )
        pd.DataFrame(rows, columns=LOG_COLUMNS).to_csv(log_path, index=False)
        return TrainResult(params, state, pd.DataFrame(rows, columns=LOG_COLUMNS), ckpt_dir, best, set(), fold)

    seen = set()
    t0 = time.perf_counter()
    n_batches = _batches_per_epoch(records, fold, config.batch_size)
    for epoch in range(start_epoch, config.epochs):
        if config.max_steps and step >= config.max_steps:
            break
        skip = start_batch if epoch == start_epoch else 0
        epoch_losses = [r["loss"] for r in rows if r["epoch"] == epoch] if skip else []
        consumed = skip
        batches = batch_iter(records, fold, config.batch_size, config.seed, epoch,
                             structure, config.w0, config.sigma, start_batch=skip)
        for batch in batches:
            leaked = {pid for pid, _ in batch.provenance} & held_out
            if leaked:
                raise ValidationError(f"held-out patients in a training batch: {sorted(leaked)}")
            seen.update(batch.provenance)

            try:
                tape = Tape()
                pred = forward(params, batch.frames, tape=tape)
                with tape:
                    loss = wce_loss(pred, batch.masks, batch.weights)
                grads = grads_by_name(params, backward(loss, tape))
                params, state = adam_step(params, grads, state, config.lr,
                                          config.beta1, config.beta2, config.eps_adam)
            except NumericalError as e:
                path = _dump_bad_batch(ckpt_dir, step + 1, batch.provenance)
                raise NumericalError(f"step {step + 1}: {e}; offending batch ids written to {path}")

            step += 1
            loss_val = loss.item()
            epoch_losses.append(loss_val)
            rows.append({"step": step, "epoch": epoch, "loss": loss_val,
                         "wall_time": time.perf_counter() - t0})
            if config.log_every and step % config.log_every == 0:
                logger.info("epoch %d step %d loss %.6f", epoch, step, loss_val)
            consumed += 1
            if config.max_steps and step >= config.max_steps:
                break

        if consumed < n_batches:
            write_checkpoint(os.path.join(ckpt_dir, partial_checkpoint_name(epoch)),
                             _checkpoint_entries(params, state, epoch, step, best, consumed))
            pd.DataFrame(rows, columns=LOG_COLUMNS).to_csv(log_path, index=False)
            logger.info("stopped at step %d, %d of %d batches into epoch %d", step, consumed, n_batches, epoch)
            break
        if epoch_losses:
            epoch_loss = float(np.mean(epoch_losses))
            if epoch_loss < best:
                best = epoch_loss
                write_checkpoint(os.path.join(ckpt_dir, BEST_NAME),
                                 _checkpoint_entries(params, state, epoch + 1, step, best))
        write_checkpoint(os.path.join(ckpt_dir, epoch_checkpoint_name(epoch + 1)),
                         _checkpoint_entries(params, state, epoch + 1, step, best))
        pd.DataFrame(rows, columns=LOG_COLUMNS).to_csv(log_path, index=False)

    log = pd.DataFrame(rows, columns=LOG_COLUMNS)
    logger.info("trained %d steps, best epoch loss %.6f", step, best)
    return TrainResult(params, state, log, ckpt_dir, best, seen, fold)


# Inference

def threshold_probs(prob, threshold):
    return (np.asarray(prob) >= threshold).astype(np.uint8)


def infer_frame(params, frame, threshold=0.5, pads=None):
    """
    Binary mask and probability map for one frame, cropped back to the
    pre-padding size. Frames whose size is not a multiple of 32 are padded here.
    """
    x = np.asarray(frame, dtype=np.float64)
    x = x.reshape((1, 1) + x.shape[-2:])
    if pads is None:
        x, pads = pad_to_multiple(x)
    prob = crop(forward(params, x).data[0, 0], pads)
    return threshold_probs(prob, threshold), prob


@dataclass
class TimingStats:
    per_frame: list
    cpu_per_frame: list
    wall: float

    @property
    def mean(self):
        return float(np.mean(self.per_frame)) if self.per_frame else 0.0

    @property
    def median(self):
        return float(np.median(self.per_frame)) if self.per_frame else 0.0

    @property
    def total(self):
        return float(np.sum(self.per_frame))

    def as_frame(self):
        return pd.DataFrame({
            "frame": np.arange(len(self.per_frame)),
            "seconds": self.per_frame,
            "cpu_seconds": self.cpu_per_frame,
        })


@dataclass
class VolumeInference:
    masks: np.ndarray
    probs: np.ndarray
    timing: TimingStats


def _timed_frame(params, frame, threshold):
    with Stopwatch() as sw:
        prob = forward(params, frame[None]).data[0, 0]
        mask = threshold_probs(prob, threshold)
    return mask, prob, sw.wall, sw.cpu


def infer_volume(params, volume, threshold=0.5, n_jobs=None):
    """
    Frame-wise inference over a VolumeRecord or a (F, 1, H, W) array. Timing
    covers forward + threshold only.
    """
    frames = volume.frames if hasattr(volume, "frames") else np.asarray(volume, dtype=np.float64)
    pads = getattr(volume, "pads", None)
    if frames.ndim == 3:
        frames = frames[:, None]
    if pads is None:
        frames, pads = pad_to_multiple(frames)
    n_jobs = default_n_jobs() if n_jobs is None else n_jobs

    with Stopwatch() as total:
        results = Parallel(n_jobs=n_jobs, prefer="threads")(
            delayed(_timed_frame)(params, frames[i], threshold) for i in range(frames.shape[0])
        )
    masks = np.stack([crop(r[0], pads) for r in results])[:, None]
    probs = np.stack([crop(r[1], pads) for r in results])[:, None]
    timing = TimingStats(
        per_frame=[r[2] for r in results],
        cpu_per_frame=[r[3] for r in results],
        wall=total.wall,
    )
    logger.info("inferred %d frames, %.4f s/frame mean", len(results), timing.mean)
    return VolumeInference(masks=masks, probs=probs, timing=timing)


def evaluate_record(params, record, structure, threshold=0.5, fold=-1, n_jobs=None):
    """Per-frame metrics for one volume against its ground truth."""
    result = infer_volume(params, record, threshold, n_jobs)
    gt = record.crop(record.masks[structure])
    n_jobs = default_n_jobs() if n_jobs is None else n_jobs
    return evaluate_masks(result.masks, gt, record.spacing, record.patient_id, fold, n_jobs)


# Cross-validation

@dataclass
class CrossvalResult:
    frames: pd.DataFrame
    summary: pd.DataFrame
    table: pd.DataFrame


def summarize_folds(frames):
    """Fold rows followed by one pooled row."""
    per_fold = aggregate(frames, "fold")
    pooled = aggregate(frames, "all")
    return pd.concat([per_fold, pooled], ignore_index=True)


def crossval(config, records=None, n_jobs=None):
    """
    Train one model per fold, evaluate every frame of the held-out patients
    and write per-frame, per-fold and pooled tables into checkpoint_dir.
    """
    config.validate()
    if records is None:
        records = load_dataset(config.manifest)
    structure = _structure(config, records)
    split = make_folds([r.patient_id for r in records], config.folds or None, config.seed)
    by_id = {r.patient_id: r for r in records}
    out_dir = ensure_dir(config.checkpoint_dir)

    parts = []
    for fold in split:
        fold_cfg = replace(config, checkpoint_dir=os.path.join(out_dir, f"fold_{fold.index:02d}"),
                           fold=str(fold.index), resume="")
        result = train(fold_cfg, records, fold_index=fold.index)
        for pid in fold.held_out_patients:
            parts.append(evaluate_record(result.params, by_id[pid], structure,
                                         config.threshold, fold.index, n_jobs))
        logger.info("fold %d done (held out %s)", fold.index, ", ".join(fold.held_out_patients))

    frames = pd.concat(parts, ignore_index=True)
    summary = summarize_folds(frames)
    table = format_summary(summary)
    frames.to_csv(os.path.join(out_dir, "crossval_frames.csv"), index=False)
    summary.to_csv(os.path.join(out_dir, "crossval_summary.csv"), index=False)
    table.to_csv(os.path.join(out_dir, "crossval_table.csv"), index=False)
    return CrossvalResult(frames=frames, summary=summary, table=table)


# Gradient check of the whole network

def _with_tensor(params, name, tensor):
    lid, _, slot = name.rpartition(".")
    layers = dict(params.layers)
    lp = layers[lid]
    layers[lid] = LayerParams(kernel=tensor, bias=lp.bias) if slot == "weight" else LayerParams(kernel=lp.kernel, bias=tensor)
    return ModelParams(params.config, [(k, layers[k]) for k in params.layers])


def gradcheck_network(hw=(32, 32), base_width=2, seed=0, eps=1e-5, coords_per_tensor=3):
    """
    Max relative error per parameter tensor between tape gradients and
    central differences of the WCE loss on one blob phantom. Only the
    ``coords_per_tensor`` coordinates with the largest gradient magnitude are
    checked: near-zero gradients are below the rounding noise of a central
    difference at ``eps``.
    """
    cfg = SumNetConfig.from_base_width(base_width, hw)
    params = build(cfg, seed)
    image, mask = synth_phantom(seed, hw, "blob")
    x = image[None, None]
    y = mask[None, None].astype(np.float64)
    w = weight_map(mask)[None, None]

    tape = Tape()
    pred = forward(params, x, tape=tape)
    with tape:
        loss = wce_loss(pred, y, w)
    leaf = backward(loss, tape)

    errors = {}
    for name, t in params.tensors():
        g = leaf.get(t)
        g = np.zeros_like(t.data) if g is None else g
        coords = np.argsort(-np.abs(g).ravel(), kind="stable")[:coords_per_tensor]

        def f(p, name=name):
            return wce_loss(forward(_with_tensor(params, name, p), x), y, w)

        errors[name] = grad_check(f, t, eps, coords)
    return errors
