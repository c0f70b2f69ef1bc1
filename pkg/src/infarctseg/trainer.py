"""SGD-with-momentum training with step learning-rate decay, validation-patience
early stopping and checkpointing."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .balance import weighted_cross_entropy
from .checkpoint import config_hash, read_checkpoint, write_checkpoint
from .data import AugmentationPolicy, Sample, augment_sample
from .errors import ConfigurationError, DataError, TrainingDiverged
from .layers import Layer, Parameter
from .model import ModelConfig, SegmentationModel

log = logging.getLogger(__name__)

LITERAL_E_MINUS_3 = math.exp(-3.0)


@dataclass
class TrainConfig:
    initial_lr: float = 1e-3
    lr_drop_period: int = 10
    lr_drop_divisor: float = 3.0
    momentum: float = 0.9
    max_epochs: int = 50
    batch_size: int = 10
    patience: int = 4
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.initial_lr <= 0 or self.lr_drop_period < 1 or self.lr_drop_divisor < 1:
            raise ConfigurationError("learning rate must be positive and must never grow")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.max_epochs < 0 or self.batch_size < 1 or self.patience < 1:
            raise ConfigurationError("max_epochs >= 0, batch_size >= 1 and patience >= 1 required")


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Piecewise-constant decay: divide by ``lr_drop_divisor`` every ``lr_drop_period`` epochs (0-based)."""
    if epoch < 0:
        raise ConfigurationError("epoch must be >= 0")
    return cfg.initial_lr / cfg.lr_drop_divisor ** (epoch // cfg.lr_drop_period)


def sgdm_step(params: Sequence[Parameter], velocity: Sequence[np.ndarray], lr: float, momentum: float) -> None:
    """In place: ``v <- momentum * v + grad``; ``p <- p - lr * v``."""
    for p, v in zip(params, velocity):
        if not np.all(np.isfinite(p.grad)):
            raise TrainingDiverged(f"non-finite gradient for parameter of shape {p.shape}")
        v *= momentum
        v += p.grad
        p.value -= lr * v


class EarlyStopping:
    """Stop once the monitored value has not improved for ``patience`` consecutive evaluations."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_index = -1
        self.bad = 0
        self.count = 0

    def update(self, value: float) -> bool:
        """Record one evaluation; returns True when training should stop."""
        self.count += 1
        if value < self.best:
            self.best = value
            self.best_index = self.count
            self.bad = 0
        else:
            self.bad += 1
        return self.bad >= self.patience


# ---------------------------------------------------------------------------
# model state


def model_state(model: Layer) -> dict[str, np.ndarray]:
    state = {f"param/{n}": p.value.copy() for n, p in model.named_parameters()}
    state.update({f"buffer/{n}": b.copy() for n, b in model.named_buffers()})
    return state


def load_model_state(model: Layer, state: dict[str, np.ndarray]) -> None:
    for n, p in model.named_parameters():
        key = f"param/{n}"
        if key not in state or state[key].shape != p.value.shape:
            raise DataError(f"checkpoint lacks a matching entry for {key}")
        p.value[...] = state[key]
    for n, b in model.named_buffers():
        key = f"buffer/{n}"
        if key not in state or state[key].shape != b.shape:
            raise DataError(f"checkpoint lacks a matching entry for {key}")
        b[...] = state[key]


def save_checkpoint(path: str | Path, model: SegmentationModel, velocity: Sequence[np.ndarray] | None = None,
                    epoch: int = 0, history: list[dict] | None = None,
                    train_cfg: TrainConfig | None = None) -> None:
    arrays = model_state(model)
    if velocity is not None:
        for (n, _), v in zip(model.named_parameters(), velocity):
            arrays[f"velocity/{n}"] = v
    meta = {
        "model_config": model.cfg.to_dict(),
        "epoch": epoch,
        "history": history or [],
        "train_config": asdict(train_cfg) if train_cfg else None,
    }
    write_checkpoint(path, config_hash(model.cfg.to_dict()), arrays, meta)


def load_checkpoint(path: str | Path, expected_config: dict | None = None):
    """Rebuild the model stored at ``path``.

    Returns ``(model, meta, velocity)``. When ``expected_config`` is given its
    hash must match the one recorded in the checkpoint.
    """
    digest, arrays, meta = read_checkpoint(path)
    cfg_dict = meta.get("model_config")
    if cfg_dict is None:
        raise DataError(f"checkpoint {path} has no model configuration")
    if digest != config_hash(cfg_dict):
        raise DataError(f"checkpoint {path} is inconsistent: stored hash does not match its configuration")
    if expected_config is not None and config_hash(expected_config) != digest:
        raise DataError(f"checkpoint {path} was written for a different model configuration")
    model = SegmentationModel(ModelConfig.from_dict(cfg_dict))
    load_model_state(model, arrays)
    velocity = [arrays[f"velocity/{n}"] for n, _ in model.named_parameters()
                if f"velocity/{n}" in arrays]
    return model, meta, velocity


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: SegmentationModel
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    stopped_early: bool = False


def _stack(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([s.image for s in samples])[:, None].astype(np.float64)
    y = np.stack([s.labels for s in samples]).astype(np.int64)
    return x, y


def evaluate_loss(model: SegmentationModel, samples: Sequence[Sample], weights: np.ndarray,
                  batch_size: int = 10) -> float:
    """Weighted cross-entropy over a whole dataset in inference mode."""
    num = den = 0.0
    for i in range(0, len(samples), batch_size):
        x, y = _stack(samples[i:i + batch_size])
        scores = model.forward(x, train=False)
        loss, _ = weighted_cross_entropy(scores, y, weights)
        w = float(weights[y].sum())
        num += loss * w
        den += w
    return num / den


def predict(model: SegmentationModel, images: Sequence[np.ndarray], batch_size: int = 10) -> list[np.ndarray]:
    out = []
    for i in range(0, len(images), batch_size):
        x = np.stack(images[i:i + batch_size])[:, None].astype(np.float64)
        _, labels = model.segment(x)
        out.extend(labels)
    return out


def train_step(model: SegmentationModel, x: np.ndarray, y: np.ndarray, weights: np.ndarray,
               velocity: list[np.ndarray], lr: float, momentum: float) -> float:
    model.zero_grad()
    scores = model.forward(x, train=True)
    loss, grad = weighted_cross_entropy(scores, y, weights)
    if not math.isfinite(loss):
        raise TrainingDiverged(f"loss became {loss}")
    model.backward(grad)
    sgdm_step(model.parameters(), velocity, lr, momentum)
    return loss


def train(model: SegmentationModel, train_set: Sequence[Sample], val_set: Sequence[Sample],
          weights: np.ndarray, cfg: TrainConfig, policy: AugmentationPolicy | None = None,
          checkpoint_path: str | Path | None = None) -> TrainResult:
    """Train with SGDM; returns the model restored to its best validation epoch.

    Each epoch reshuffles the training set with ``(seed, epoch)``, draws fresh
    augmentations per sample, and evaluates the weighted validation loss.
    """
    if not train_set or not val_set:
        raise DataError("training and validation sets must be non-empty")
    if policy is None:
        policy = AugmentationPolicy(seed=cfg.seed)
    weights = np.asarray(weights, dtype=np.float64)
    params = model.parameters()
    velocity = [np.zeros_like(p.value) for p in params]
    result = TrainResult(model=model)
    stopper = EarlyStopping(cfg.patience)
    best_state = model_state(model)

    for epoch in range(cfg.max_epochs):
        lr = lr_schedule(epoch, cfg)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_set))
        num = den = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = []
            for idx in order[start:start + cfg.batch_size]:
                s = train_set[int(idx)]
                if cfg.augment:
                    img, lab = augment_sample(s.image, s.labels, policy.draw(epoch, int(idx)))
                    s = Sample(img, lab, s.patient)
                batch.append(s)
            x, y = _stack(batch)
            try:
                loss = train_step(model, x, y, weights, velocity, lr, cfg.momentum)
            except TrainingDiverged:
                _keep_best(model, best_state, checkpoint_path, result, cfg)
                raise
            w = float(weights[y].sum())
            num += loss * w
            den += w
        val_loss = evaluate_loss(model, val_set, weights, cfg.batch_size)
        if not math.isfinite(val_loss):
            _keep_best(model, best_state, checkpoint_path, result, cfg)
            raise TrainingDiverged(f"validation loss became {val_loss} in epoch {epoch + 1}")
        row = {"epoch": epoch + 1, "lr": lr, "train_loss": num / den, "val_loss": val_loss}
        result.history.append(row)
        log.info("epoch %d lr %.6g train %.5f val %.5f", epoch + 1, lr, row["train_loss"], val_loss)
        stop = stopper.update(val_loss)
        if stopper.best_index == epoch + 1:
            best_state = model_state(model)
            result.best_epoch = epoch + 1
            result.best_val_loss = val_loss
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, model, velocity, epoch + 1, result.history, cfg)
        if stop:
            result.stopped_early = True
            break

    load_model_state(model, best_state)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, velocity, result.best_epoch, result.history, cfg)
    return result


def _keep_best(model, best_state, checkpoint_path, result: TrainResult, cfg: TrainConfig) -> None:
    """On divergence, leave the best state so far in the model and on disk."""
    load_model_state(model, best_state)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, None, result.best_epoch, result.history, cfg)


def write_history_csv(path: str | Path, history: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "lr", "train_loss", "val_loss"])
        for row in history:
            w.writerow([row["epoch"], repr(float(row["lr"])), repr(float(row["train_loss"])),
                        repr(float(row["val_loss"]))])
