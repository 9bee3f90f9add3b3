"""Mini-batch training of the cascade with validation-driven scheduling."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .config import RunConfig
from .errors import ConfigError, NonFiniteError
from .labels import labels_to_regions
from .network import Cascade
from .tensor import Tensor, no_grad
from .training import AdamState, ScheduleState, adam_step, augment, total_loss

log = logging.getLogger(__name__)


@dataclass
class Case:
    """One training subject: normalized ``[4, D, H, W]`` image and ``[D, H, W]`` labels."""

    case_id: str
    image: np.ndarray
    labels: np.ndarray


@dataclass
class EpochRecord:
    epoch: int
    steps: int
    l_whole: float
    l_core: float
    l_enh: float
    total: float
    val_loss: float
    lr: float
    wall_time: float
    improved: bool


@dataclass
class TrainResult:
    model: Cascade
    adam: AdamState
    schedule: ScheduleState
    history: list[EpochRecord] = field(default_factory=list)
    best_state: dict[str, np.ndarray] | None = None
    best_val_loss: float = float("inf")
    steps: int = 0
    stop_reason: str = "epochs"
    checkpoint_hashes: dict[str, str] = field(default_factory=dict)


# folds ----------------------------------------------------------------------------------

def fold_assignment(case_ids: Sequence[str], n_folds: int = 5, seed: int = 0) -> dict[str, int]:
    """Stable fold index per case.

    Cases are ordered by a seeded hash of their id and dealt round-robin, so
    fold sizes differ by at most one and a case keeps its fold regardless of
    the order ids are listed in.
    """
    if len(set(case_ids)) != len(case_ids):
        raise ConfigError("duplicate case ids")
    order = sorted(case_ids, key=lambda c: hashlib.sha256(f"{seed}:{c}".encode()).hexdigest())
    return {c: i % n_folds for i, c in enumerate(order)}


def kfold_split(case_ids: Sequence[str], fold: int, n_folds: int = 5, seed: int = 0):
    """Return ``(train_ids, val_ids)`` for one fold, each in the input order."""
    if not 0 <= fold < n_folds:
        raise ConfigError(f"fold {fold} outside 0..{n_folds - 1}")
    assign = fold_assignment(case_ids, n_folds, seed)
    train = [c for c in case_ids if assign[c] != fold]
    val = [c for c in case_ids if assign[c] == fold]
    return train, val


# patches --------------------------------------------------------------------------------

def _pad_to(arr: np.ndarray, shape: tuple[int, ...], mode: str) -> np.ndarray:
    spatial = arr.shape[-3:]
    pad = [(0, max(0, t - s)) for s, t in zip(spatial, shape)]
    if not any(p for _, p in pad):
        return arr
    return np.pad(arr, [(0, 0)] * (arr.ndim - 3) + pad, mode=mode)


def crop_patch(image: np.ndarray, labels: np.ndarray, patch: tuple[int, int, int], policy: str,
               rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Cut one training patch, padding volumes smaller than the patch.

    ``random`` picks a uniform corner, ``center`` the central patch and
    ``tumor`` a patch centered on a random tumor voxel (clamped to the volume).
    """
    image = _pad_to(image, patch, "constant")
    labels = _pad_to(labels, patch, "constant")
    spatial = labels.shape
    if policy == "center":
        start = [(s - p) // 2 for s, p in zip(spatial, patch)]
    elif policy == "tumor" and labels.any():
        idx = np.argwhere(labels > 0)
        center = idx[rng.integers(len(idx))]
        start = [int(np.clip(c - p // 2, 0, s - p)) for c, s, p in zip(center, spatial, patch)]
    else:
        start = [int(rng.integers(0, s - p + 1)) for s, p in zip(spatial, patch)]
    sl = tuple(slice(a, a + p) for a, p in zip(start, patch))
    return image[(slice(None),) + sl], labels[sl]


def make_batch(cases: Sequence[Case], config: RunConfig, rng: np.random.Generator, train: bool):
    images, labels = [], []
    for case in cases:
        policy = config.crop_policy if train else "center"
        img, lab = crop_patch(case.image, case.labels, config.patch_shape, policy, rng)
        if train and config.augment:
            img, lab = augment(img, lab, rng)
        images.append(img)
        labels.append(lab)
    return np.stack(images), np.stack(labels)


# loop -----------------------------------------------------------------------------------

def validation_loss(model: Cascade, cases: Sequence[Case], config: RunConfig) -> float:
    """Mean total loss over center patches, one batch at a time."""
    if not cases:
        raise ConfigError("validation set is empty")
    rng = np.random.default_rng(0)
    losses = []
    with no_grad():
        for i in range(0, len(cases), config.batch_size):
            chunk = cases[i:i + config.batch_size]
            x, y = make_batch(chunk, config, rng, train=False)
            loss = total_loss(model(Tensor(x)), labels_to_regions(y), config.dice_eps)
            losses.append((loss.total.item(), len(chunk)))
    return float(sum(l * n for l, n in losses) / sum(n for _, n in losses))


def _write_log(fh, record: dict) -> None:
    if fh is not None:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
        fh.flush()


def train_loop(train_cases: Sequence[Case], val_cases: Sequence[Case], config: RunConfig,
               out_dir: str | Path | None = None, model: Cascade | None = None,
               adam: AdamState | None = None) -> TrainResult:
    """Train a cascade and keep the weights with the lowest validation loss.

    Each epoch is one shuffled pass over ``train_cases`` in batches of
    ``config.batch_size``; training stops early at ``config.max_steps``
    optimizer steps or when the schedule's stop patience runs out.

    With ``out_dir`` the loop writes ``best.ckpt``, ``last.ckpt`` and a JSON
    lines log ``train_log.jsonl`` with the loss breakdown, learning rate and
    wall time of every epoch. A non-finite loss or gradient aborts training
    after saving the current, still finite, weights as ``last_good.ckpt``.
    """
    if not train_cases:
        raise ConfigError("training set is empty")
    rng = np.random.default_rng(config.seed)
    model = model or Cascade(config.cascade_spec(), seed=config.seed)
    adam = adam or AdamState(config.lr, config.beta1, config.beta2, config.adam_eps, config.weight_decay)
    schedule = ScheduleState(config.drop_factor, config.drop_patience, config.stop_patience)
    result = TrainResult(model, adam, schedule)
    out = Path(out_dir) if out_dir is not None else None
    fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "train_log.jsonl", "w")
    cfg = config.to_dict()
    _write_log(fh, {"event": "start", "config": cfg, "overrides": config.overrides(),
                    "train_cases": [c.case_id for c in train_cases], "val_cases": [c.case_id for c in val_cases]})
    try:
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(len(train_cases))
            sums = np.zeros(4)
            n_batches = 0
            for i in range(0, len(order), config.batch_size):
                batch = [train_cases[j] for j in order[i:i + config.batch_size]]
                x, y = make_batch(batch, config, rng, train=True)
                loss = total_loss(model(Tensor(x)), labels_to_regions(y), config.dice_eps)
                vals = loss.values()
                if not np.isfinite(vals["total"]):
                    raise NonFiniteError(f"loss is {vals['total']} at step {result.steps + 1}", name="loss")
                model.zero_grad()
                loss.total.backward()
                adam_step(model, adam)
                result.steps += 1
                sums += [vals["l_whole"], vals["l_core"], vals["l_enh"], vals["total"]]
                n_batches += 1
                if config.max_steps is not None and result.steps >= config.max_steps:
                    break
            val = validation_loss(model, val_cases, config) if val_cases else float(sums[3] / n_batches)
            lr_used = adam.lr
            adam.lr, improved = schedule.update(val, adam.lr)
            if improved:
                result.best_val_loss = val
                result.best_state = model.state_dict()
                if out is not None:
                    result.checkpoint_hashes["best"] = save_checkpoint(
                        out / "best.ckpt", model, adam, cfg, epoch, result.steps, val)
            means = sums / max(n_batches, 1)
            rec = EpochRecord(epoch, result.steps, *map(float, means), val, lr_used,
                              time.perf_counter() - t0, improved)
            result.history.append(rec)
            _write_log(fh, {"event": "epoch", **rec.__dict__})
            log.info("epoch %d step %d loss %.4f val %.4f lr %.2e", epoch, result.steps, means[3], val, lr_used)
            if schedule.should_stop:
                result.stop_reason = "early_stop"
                break
            if config.max_steps is not None and result.steps >= config.max_steps:
                result.stop_reason = "max_steps"
                break
        if out is not None:
            result.checkpoint_hashes["last"] = save_checkpoint(
                out / "last.ckpt", model, adam, cfg, len(result.history), result.steps, result.best_val_loss)
    except NonFiniteError as exc:
        result.stop_reason = "non_finite"
        _write_log(fh, {"event": "abort", "reason": str(exc), "step": result.steps})
        if out is not None:
            save_checkpoint(out / "last_good.ckpt", model, adam, cfg, len(result.history), result.steps,
                            result.best_val_loss)
        exc.result = result
        raise
    finally:
        if fh is not None:
            _write_log(fh, {"event": "end", "steps": result.steps, "stop_reason": result.stop_reason,
                            "best_val_loss": result.best_val_loss})
            fh.close()
    return result
