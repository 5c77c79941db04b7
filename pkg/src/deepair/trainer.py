"""Patch training with chronological splits and validation early stopping."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .errors import DivergenceError, TrainingError, UndefinedMetricError
from .evaluator import PredictionRecord, mape
from .model import embed_auxiliary, model_meta
from .tensorcore import Tape, backward, save_checkpoint, sgd_step

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.01
    window: int = 48
    patch: int = 15
    patience: int = 5
    max_epochs: int = 200
    seed: int = 0
    batch: int = 1

    def __post_init__(self):
        if self.patience < 1:
            raise TrainingError(f"patience must be >= 1, got {self.patience}")
        if not self.lr > 0:
            raise TrainingError(f"learning rate must be positive, got {self.lr}")
        if self.batch < 1:
            raise TrainingError(f"batch must be >= 1, got {self.batch}")


@dataclass
class TrainState:
    rng: np.random.Generator
    epoch: int = 0
    best_validation: float = math.inf
    best_epoch: int = 0
    epochs_since_best: int = 0
    skipped: int = 0
    params_ref: str = ""
    losses: list = field(default_factory=list)
    samples: list = field(default_factory=list)

    @classmethod
    def fresh(cls, seed):
        return cls(np.random.default_rng(seed))


@dataclass
class Patch:
    """One 16-channel P x P crop; auxiliary channels are constant planes."""

    values: np.ndarray
    center: tuple
    timestep: int


def crop_patch(dense, center, t, patch=15, params=None):
    """Crop a ``patch`` x ``patch`` window of a dense map around ``center`` at hour ``t``.

    Cells beyond the map edge are 0. With ``params`` the auxiliary channels
    hold the embedded calendar scalars, otherwise the raw calendar ids.
    """
    if not 0 <= t < dense.hours:
        raise TrainingError(f"hour {t} outside map range [0, {dense.hours})")
    h = patch // 2
    r, c = center
    R, C = dense.spec.rows, dense.spec.cols
    out = np.zeros((len(dense.schema), patch, patch), np.float32)
    r0, r1 = max(0, r - h), min(R, r + h + 1)
    c0, c1 = max(0, c - h), min(C, c + h + 1)
    out[:, r0 - (r - h):r1 - (r - h), c0 - (c - h):c1 - (c - h)] = dense.values[t, :, r0:r1, c0:c1]
    aux = dense.schema.group_indices("auxiliary")
    names = [dense.schema.channels[i].name for i in aux]
    ids = {n: int(dense.values[t, i, min(max(r, 0), R - 1), min(max(c, 0), C - 1)])
           for n, i in zip(names, aux)}
    if params is not None and {"day_of_week", "hour_of_day"} <= set(ids):
        e = embed_auxiliary(ids["day_of_week"], ids["hour_of_day"], params).data[0]
        for i, n in zip(aux, names):
            out[i] = e[0 if n == "day_of_week" else 1]
    else:
        for i, n in zip(aux, names):
            out[i] = ids[n]
    return Patch(out, (r, c), t)


def train_iteration(model, prep, state, cells, t, lr):
    """One leave-one-out SGD step on the windows ending before hour ``t``.

    Returns the loss, or None when no sampled cell has a target at ``t``.
    """
    cells = [cell for cell in cells if prep.target_std(cell, t) is not None]
    if not cells:
        state.skipped += 1
        return None
    targets = np.stack([prep.target_std(cell, t) for cell in cells])
    batch = prep.window_batch(cells, [t] * len(cells))
    with Tape() as tape:
        pred = model.forward(batch, mode="train")
        loss = tc.mse_loss(pred, targets.astype(pred.dtype))
        if len(cells) > 1:
            loss = tc.scale(loss, 1.0 / len(cells))
    value = float(loss.data)
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite loss at hour {t}")
    backward(loss, tape)
    sgd_step(model.params, lr)
    return value


def train_epoch(model, prep, state, config):
    """Walk the training hours in order, sampling station cell(s) per hour."""
    stations = prep.stations
    losses = []
    for t in prep.split.targets("train"):
        pick = state.rng.integers(len(stations), size=config.batch)
        cells = [stations[i] for i in pick]
        state.samples.append((t, tuple(cells)))
        loss = train_iteration(model, prep, state, cells, t, config.lr)
        if loss is not None:
            losses.append(loss)
    if not losses:
        raise TrainingError("training segment produced no executable iterations")
    state.losses = losses
    return math.fsum(losses) / len(losses)


def forecast_pairs(model, prep, pairs, chunk=256):
    """Eval-mode standardized forecasts for (cell, target hour) pairs.

    Patch features are computed once per (cell, hour) and shared by all
    windows that contain that hour.
    """
    w = prep.window
    out = np.zeros((len(pairs), len(prep.aq_idx)), np.float64)
    by_cell = {}
    for j, (cell, t) in enumerate(pairs):
        by_cell.setdefault(tuple(cell), []).append((j, t))
    for cell, items in by_cell.items():
        ts = np.array([t for _, t in items])
        lo, hi = int(ts.min()) - w, int(ts.max())
        if lo < 0:
            raise TrainingError(f"target hour {ts.min()} lacks a {w}-hour history")
        span = np.arange(lo, hi)
        ex = prep.loo_exclude(cell)
        feats = []
        for s in range(0, len(span), chunk):
            hrs = span[s:s + chunk]
            dyn = prep.filler.window(cell, hrs, ex)
            feats.append(model.encode(dyn, prep.dow[hrs], prep.hour[hrs], mode="eval").data)
        feats = np.concatenate(feats)
        idx = (ts - w - lo)[:, None] + np.arange(w)[None, :]
        seq = tc.Tensor(feats[idx])
        pred = model.temporal(seq).data
        for (j, _), p in zip(items, pred):
            out[j] = p
    return out


def predict_segment(model, prep, segment="validation"):
    """Leave-one-out prediction records for every station with ground truth."""
    names = prep.pollutant_names()
    pairs, truths = [], []
    for t in prep.split.targets(segment):
        for cell in prep.stations:
            y = prep.truth(cell, t)
            if np.isfinite(y).any():
                pairs.append((cell, t))
                truths.append(y)
    if not pairs:
        return []
    pred = prep.destandardize(forecast_pairs(model, prep, pairs))
    records = []
    for (cell, t), y, p in zip(pairs, truths, pred):
        sid = f"S{cell[0]:03d}_{cell[1]:03d}"
        for k, name in enumerate(names):
            if np.isfinite(y[k]):
                records.append(PredictionRecord(sid, int(t), name, float(y[k]), float(p[k])))
    return records


def validate(model, prep, floor=1.0):
    """Validation MAPE (percent) over all station/hour/pollutant triples."""
    records = predict_segment(model, prep, "validation")
    if not records:
        raise UndefinedMetricError("validation segment has no ground truth to score")
    return mape(records, floor)


@dataclass
class FitResult:
    state: dict
    best_epoch: int
    best_validation: float
    log: list
    stopped: str


LOG_FIELDS = ("epoch", "train_loss", "val_mape", "epochs_since_best")


def write_log(path, rows, best_epoch):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_FIELDS)
        for row in rows:
            w.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_mape"]),
                        row["epochs_since_best"]])
        fh.write(f"# best=ckpt_{best_epoch}.bin\n")


def fit(config, model, prep=None, out_dir=None, epoch_fn=None, validate_fn=None, meta=None):
    """Train until validation MAPE stalls for ``patience`` epochs.

    ``epoch_fn(epoch)`` and ``validate_fn(epoch)`` default to
    :func:`train_epoch` and :func:`validate`; supplying them allows scripted
    runs. Returns the parameter state of the best epoch, not the last.
    """
    state = TrainState.fresh(config.seed)
    if epoch_fn is None:
        epoch_fn = lambda epoch: train_epoch(model, prep, state, config)  # noqa: E731
    if validate_fn is None:
        validate_fn = lambda epoch: validate(model, prep)  # noqa: E731
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    meta = dict(meta or model_meta(model), train=config.__dict__.copy())
    best_state = model.params.snapshot()
    rows = []
    stopped = "max_epochs"
    for epoch in range(1, config.max_epochs + 1):
        state.epoch = epoch
        try:
            train_loss = float(epoch_fn(epoch))
        except DivergenceError as exc:
            train_loss = math.nan
            reason = str(exc)
        else:
            reason = "non-finite mean training loss"
        if not math.isfinite(train_loss):
            model.params.load_state(best_state)
            result = FitResult(best_state, state.best_epoch, state.best_validation, rows, "diverged")
            if out is not None:
                write_log(out / "train_log.csv", rows, state.best_epoch)
            raise DivergenceError(f"training diverged in epoch {epoch} ({reason}); "
                                  f"restored epoch {state.best_epoch}", result)
        val = float(validate_fn(epoch))
        if val < state.best_validation:
            state.best_validation = val
            state.best_epoch = epoch
            state.epochs_since_best = 0
            best_state = model.params.snapshot()
            state.params_ref = f"ckpt_{epoch}.bin"
            if out is not None:
                save_checkpoint(out / state.params_ref, model.params, dict(meta, epoch=epoch))
        else:
            state.epochs_since_best += 1
        rows.append({"epoch": epoch, "train_loss": train_loss, "val_mape": val,
                     "epochs_since_best": state.epochs_since_best})
        log.info("epoch %d train_loss %.6g val_mape %.4f", epoch, train_loss, val)
        if state.epochs_since_best >= config.patience:
            stopped = "early_stop"
            break
    model.params.load_state(best_state)
    if out is not None:
        write_log(out / "train_log.csv", rows, state.best_epoch)
        save_checkpoint(out / "best.bin", model.params, dict(meta, epoch=state.best_epoch))
    return FitResult(best_state, state.best_epoch, state.best_validation, rows, stopped)
