"""Soft-F1 training of the CIPS network: Adam, early stopping, transfer."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Optional, Sequence

import numpy as np

from . import stack_io
from .nn import CipsModel, ModelConfig, OptimizerState, ShapeError, backward, cips_forward
from .metrics import ConfusionCounts  # noqa: F401  (re-export)
from .nn import load_checkpoint

log = logging.getLogger(__name__)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
HISTORY_FIELDS = ("epoch", "train_loss", "val_loss", "val_f1")


class NonFiniteError(FloatingPointError):
    pass


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; ``model`` holds the last good (best) parameters."""

    def __init__(self, msg, model: CipsModel, history: list):
        super().__init__(msg)
        self.model = model
        self.history = history


@dataclass(frozen=True)
class HyperParams:
    learning_rate: float = 0.01
    decay: float = 1e-4
    max_epochs: int = 50
    patience: int = 5
    dropout: float = 0.25
    batch_size: int = 4
    seed: int = 0
    train_ratio: float = 0.7
    sample_epochs: Optional[int] = 25
    features: str = "cos_sin"
    dtype: str = "float32"

    def __post_init__(self):
        if self.learning_rate <= 0 or self.decay < 0:
            raise ValueError("learning rate must be positive and decay non-negative")
        if self.max_epochs < 0 or self.patience < 1 or self.batch_size < 1:
            raise ValueError("need max_epochs >= 0, patience >= 1, batch_size >= 1")
        if not 0 < self.train_ratio < 1:
            raise ValueError(f"train_ratio must lie in (0, 1), got {self.train_ratio}")
        if self.features not in stack_io.FEATURE_SETS or self.features == "bands":
            raise ValueError(f"features must be 'cos_sin' or 'cos_sin_amp', got {self.features!r}")

    @property
    def n_features(self) -> int:
        return stack_io.FEATURE_SETS[self.features]

    def model_config(self, **overrides) -> ModelConfig:
        return ModelConfig(features=self.n_features, dropout=self.dropout, dtype=self.dtype, **overrides)

    @classmethod
    def from_dict(cls, raw: dict) -> "HyperParams":
        names = {f.name for f in fields(cls)}
        unknown = set(raw) - names
        if unknown:
            raise ValueError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def from_json(cls, path) -> "HyperParams":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LabeledPatches:
    """Network inputs ``x`` ``(n_s, n_t, size, size, f)`` with per-pixel
    targets and validity ``(n_s, size, size)``."""

    x: np.ndarray
    y: np.ndarray
    valid: np.ndarray

    def __len__(self):
        return self.x.shape[0]

    def subset(self, idx) -> "LabeledPatches":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledPatches(self.x[idx], self.y[idx], self.valid[idx])

    @classmethod
    def concat(cls, parts: Sequence["LabeledPatches"]) -> "LabeledPatches":
        return cls(np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]),
                   np.concatenate([p.valid for p in parts]))

    @classmethod
    def from_stack(cls, stack: stack_io.InterferogramStack, mask: stack_io.EliteMask,
                   features: str = "cos_sin", sample_epochs: Optional[int] = None,
                   size: int = stack_io.PATCH_SIZE) -> "LabeledPatches":
        if mask.shape != stack.shape:
            raise ShapeError(f"mask {mask.shape} does not match stack {stack.shape}")
        if sample_epochs is not None and sample_epochs < stack.n_t:
            stack = stack_io.temporal_sample(stack, sample_epochs)
        batch = stack_io.extract_patches(stack, features, size)
        elite, valid = stack_io.extract_mask_patches(mask, size)
        return cls(batch.data, elite, valid & batch.valid)


# ------------------------------------------------------------------------ loss

def soft_counts(pred, target, valid):
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    y = np.asarray(target, dtype=np.float64).reshape(-1)
    v = np.asarray(valid, dtype=bool).reshape(-1)
    p, y = p[v], y[v]
    tp = float(np.dot(p, y))
    return tp, float(p.sum()) - tp, float(y.sum()) - tp


def soft_f1_loss(pred, target, valid, return_grad: bool = False):
    """``1 - 2 TP / (2 TP + FP + FN)`` with soft counts over valid pixels.

    With ``return_grad`` also returns d loss / d pred (zero on invalid pixels).
    """
    pred = np.asarray(pred)
    valid = np.asarray(valid, dtype=bool)
    if pred.shape != np.shape(target) or pred.shape != valid.shape:
        raise ShapeError(f"pred {pred.shape}, target {np.shape(target)}, valid {valid.shape} differ")
    if not valid.any():
        raise ValueError("soft F1 loss needs at least one valid pixel")
    tp, fp, fn = soft_counts(pred, target, valid)
    denom = 2 * tp + fp + fn
    loss = 1.0 if denom == 0 else 1.0 - 2 * tp / denom
    if not return_grad:
        return loss
    grad = np.zeros(pred.shape, dtype=np.float64)
    if denom > 0:
        # denom = sum(p) + sum(y), numerator = 2 sum(p y)
        y = np.asarray(target, dtype=np.float64)
        grad = -(2 * y * denom - 2 * tp) / (denom * denom)
        grad = np.where(valid, grad, 0.0)
    return loss, grad


def hard_counts(pred, target, valid, threshold: float = 0.5) -> tuple[int, int, int, int]:
    p = (np.asarray(pred) > threshold)[valid]
    y = np.asarray(target, dtype=bool)[valid]
    tp = int(np.count_nonzero(p & y))
    fp = int(np.count_nonzero(p & ~y))
    fn = int(np.count_nonzero(~p & y))
    return tp, fp, fn, int(p.size) - tp - fp - fn


# ------------------------------------------------------------------- optimizer

def learning_rate_at(hp: HyperParams, step: int) -> float:
    return hp.learning_rate / (1.0 + hp.decay * step)


def adam_step(params: dict, grads: dict, state: OptimizerState, hp: HyperParams):
    """One Adam update; returns ``(new_params, new_state)`` without mutating inputs."""
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteError(f"non-finite gradient in {', '.join(bad)} at step {state.step + 1}")
    t = state.step + 1
    lr = learning_rate_at(hp, t)
    c1, c2 = 1 - BETA1 ** t, 1 - BETA2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = BETA1 * state.m[k] + (1 - BETA1) * g
        v = BETA2 * state.v[k] + (1 - BETA2) * g * g
        new_p[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        new_m[k], new_v[k] = m, v
    return new_p, OptimizerState(t, new_m, new_v)


# ---------------------------------------------------------------------- split

def split_train_val(n_s: int, ratio: float = 0.7, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle; the first ceil(ratio * n_s) indices train, the rest validate."""
    if n_s < 2:
        raise ValueError(f"need at least 2 samples to split, got {n_s}")
    order = np.random.Generator(np.random.PCG64([seed, 0])).permutation(n_s)
    n_train = min(math.ceil(ratio * n_s - 1e-9), n_s - 1)
    return np.sort(order[:n_train]), np.sort(order[n_train:])


class EarlyStopping:
    """Stop once the monitored loss has not improved for ``patience`` epochs."""

    def __init__(self, patience: int = 5):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.bad_epochs = 0

    def step(self, epoch: int, loss: float) -> bool:
        """Record ``loss``; True when training should stop.  ``improved`` tells
        whether this epoch set a new best."""
        self.improved = loss < self.best
        if self.improved:
            self.best, self.best_epoch, self.bad_epochs = loss, epoch, 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


# ----------------------------------------------------------------------- fit

def predict_proba(model: CipsModel, x: np.ndarray, batch_size: int = 4) -> np.ndarray:
    out = [cips_forward(x[i:i + batch_size], model, "eval")[..., 0]
           for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0,) + x.shape[2:4])


def evaluate(model: CipsModel, data: LabeledPatches, batch_size: int = 4) -> dict:
    prob = predict_proba(model, data.x, batch_size)
    loss = soft_f1_loss(prob, data.y, data.valid)
    tp, fp, fn, tn = hard_counts(prob, data.y, data.valid)
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return {"loss": loss, "f1": f1, "accuracy": (tp + tn) / max(tp + fp + fn + tn, 1)}


def _rngs(seed: int):
    return (np.random.Generator(np.random.PCG64([seed, 1])),
            np.random.Generator(np.random.PCG64([seed, 2])))


def fit(model: CipsModel, data: LabeledPatches, hp: HyperParams,
        val: Optional[LabeledPatches] = None, on_epoch=None) -> tuple[CipsModel, list[dict]]:
    """Minimise soft-F1 loss with Adam; keeps the best-validation parameters.

    Without an explicit ``val`` set the data is split with
    :func:`split_train_val`.  Returns the restored best model and one history
    row per completed epoch.
    """
    if data.x.shape[-1] != model.config.features:
        raise ShapeError(f"data has {data.x.shape[-1]} features, model expects {model.config.features}")
    if val is None:
        tr_idx, va_idx = split_train_val(len(data), hp.train_ratio, hp.seed)
        data, val = data.subset(tr_idx), data.subset(va_idx)
    model = model.copy()
    if hp.max_epochs == 0:
        return model, []
    shuffle_rng, dropout_rng = _rngs(hp.seed)
    opt = OptimizerState.zeros(model)
    stopper = EarlyStopping(hp.patience)
    best = model.copy()
    history = []
    for epoch in range(1, hp.max_epochs + 1):
        order = shuffle_rng.permutation(len(data))
        losses = []
        for start in range(0, len(order), hp.batch_size):
            batch = data.subset(order[start:start + hp.batch_size])
            prob = cips_forward(batch.x, model, "train", dropout_rng)[..., 0]
            loss, dprob = soft_f1_loss(prob, batch.y, batch.valid, return_grad=True)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}", best, history)
            grads = backward(dprob[..., None], model)
            try:
                model.params, opt = adam_step(model.params, grads, opt, hp)
            except NonFiniteError as exc:
                raise TrainingDiverged(str(exc), best, history) from exc
            losses.append(loss)
        scores = evaluate(model, val, hp.batch_size)
        if not math.isfinite(scores["loss"]):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}", best, history)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)),
               "val_loss": scores["loss"], "val_f1": scores["f1"]}
        history.append(row)
        log.info("epoch %d train %.4f val %.4f f1 %.4f", epoch, row["train_loss"],
                 row["val_loss"], row["val_f1"])
        stop = stopper.step(epoch, scores["loss"])
        if stopper.improved:
            best = model.copy()
        if on_epoch is not None:
            on_epoch(row)
        if stop:
            break
    return best, history


def load_for_transfer(checkpoint_path, hp: HyperParams, n_features: Optional[int] = None) -> CipsModel:
    """Checkpoint parameters as a starting point; optimizer moments are dropped
    and the dropout ratio follows ``hp``."""
    model, _ = load_checkpoint(checkpoint_path)
    n_features = hp.n_features if n_features is None else n_features
    if model.config.features != n_features:
        raise ShapeError(f"checkpoint expects {model.config.features} features per epoch, "
                         f"data provides {n_features}")
    cfg = replace(model.config, dropout=hp.dropout, dtype=hp.dtype)
    return CipsModel(cfg, model.params, model.state, model.bn_updates)


def transfer(checkpoint_path, data: LabeledPatches, hp: HyperParams,
             val: Optional[LabeledPatches] = None) -> tuple[CipsModel, list[dict]]:
    model = load_for_transfer(checkpoint_path, hp, data.x.shape[-1])
    return fit(model, data, hp, val)


def history_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HISTORY_FIELDS)
    for row in history:
        writer.writerow([row["epoch"]] + [repr(float(row[k])) for k in HISTORY_FIELDS[1:]])
    return buf.getvalue()


def write_history(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(history_csv(history))
