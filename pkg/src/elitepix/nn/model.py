"""The CIPS segmentation network.

Layer stack, per sample ``(n_t, h, w, f)``::

    convlstm1 (f -> 16, all steps) -> layer norm over channels -> relu
    convlstm2 (16 -> 16, last step) -> batch norm -> relu
    [conv 3x3 (16 -> 16) -> batch norm -> relu] x 2
    dropout (train only) -> per-pixel dense (16 -> 1) -> sigmoid
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import ops
from .convlstm import GATES, ConvLstmParams, convlstm_backward_cf, convlstm_forward_cf

BN_MOMENTUM = 0.9
BN_LAYERS = ("bn2", "bn3", "bn4")
CONV_LAYERS = ("conv3", "conv4")


class UsageError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    features: int = 2
    hidden: int = 16
    kernel: int = 3
    dropout: float = 0.25
    dtype: str = "float64"

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel size must be odd and positive, got {self.kernel}")
        if self.features < 1 or self.hidden < 1:
            raise ValueError("features and hidden channels must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout ratio must lie in [0, 1), got {self.dropout}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Trainable parameter names and shapes, in canonical order."""
    k, f, c = cfg.kernel, cfg.features, cfg.hidden
    shapes: dict[str, tuple[int, ...]] = {}
    for layer, c_in in (("convlstm1", f), ("convlstm2", c)):
        for g in GATES:
            shapes[f"{layer}.w_{g}"] = (k, k, c_in + c, c)
            shapes[f"{layer}.b_{g}"] = (c,)
        if layer == "convlstm1":
            shapes["ln1.gamma"] = (c,)
            shapes["ln1.beta"] = (c,)
    shapes["bn2.gamma"] = (c,)
    shapes["bn2.beta"] = (c,)
    for conv, bn in zip(CONV_LAYERS, BN_LAYERS[1:]):
        shapes[f"{conv}.w"] = (k, k, c, c)
        shapes[f"{conv}.b"] = (c,)
        shapes[f"{bn}.gamma"] = (c,)
        shapes[f"{bn}.beta"] = (c,)
    shapes["head.w"] = (c, 1)
    shapes["head.b"] = (1,)
    return shapes


def state_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Non-trainable batch-norm running statistics."""
    return {f"{bn}.{s}": (cfg.hidden,) for bn in BN_LAYERS for s in ("mean", "var")}


def param_count(cfg: ModelConfig) -> tuple[int, int]:
    """(trainable, non_trainable) from closed-form per-layer counts."""
    k, f, c = cfg.kernel, cfg.features, cfg.hidden

    def convlstm(c_in, c_h):
        return 4 * (k * k * (c_in + c_h) * c_h + c_h)

    def conv(c_in, c_out):
        return k * k * c_in * c_out + c_out

    norm = 2 * c
    trainable = (convlstm(f, c) + norm            # convlstm1 + layer norm
                 + convlstm(c, c) + norm          # convlstm2 + batch norm
                 + 2 * (conv(c, c) + norm)        # (conv + batch norm) x 2
                 + c * 1 + 1)                     # dense head
    non_trainable = len(BN_LAYERS) * 2 * c
    return trainable, non_trainable


def glorot_bound(shape: tuple[int, ...]) -> float:
    if len(shape) == 4:
        receptive = shape[0] * shape[1]
        fan_in, fan_out = receptive * shape[2], receptive * shape[3]
    else:
        fan_in, fan_out = shape
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


class CipsModel:
    def __init__(self, config: ModelConfig, params: dict, state: Optional[dict] = None,
                 bn_updates: int = 0):
        self.config = config
        self.params = {name: np.asarray(params[name], dtype=np.float64)
                       for name in param_shapes(config)}
        for name, shape in param_shapes(config).items():
            if self.params[name].shape != shape:
                raise ops.ShapeError(f"{name}: shape {self.params[name].shape} != {shape}")
        if state is None:
            state = {n: (np.ones(s) if n.endswith(".var") else np.zeros(s))
                     for n, s in state_shapes(config).items()}
        self.state = {n: np.asarray(state[n], dtype=np.float64) for n in state_shapes(config)}
        self.bn_updates = int(bn_updates)
        self._tape = None

    def copy(self) -> "CipsModel":
        return CipsModel(self.config, {k: v.copy() for k, v in self.params.items()},
                         {k: v.copy() for k, v in self.state.items()}, self.bn_updates)

    def convlstm(self, layer: str) -> ConvLstmParams:
        return ConvLstmParams.from_dict(self.params, prefix=f"{layer}.")

    def count(self) -> tuple[int, int]:
        return (sum(v.size for v in self.params.values()),
                sum(v.size for v in self.state.values()))

    def forward(self, x, mode: str = "eval", rng: Optional[np.random.Generator] = None,
                record: Optional[bool] = None):
        return cips_forward(x, self, mode, rng, record)

    def backward(self, dout):
        return backward(dout, self)


def init_params(cfg: ModelConfig, seed: int = 0) -> CipsModel:
    """Glorot-uniform kernels, zero biases, unit norm scales, forget bias 1."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf.startswith("w"):
            bound = glorot_bound(shape)
            params[name] = rng.uniform(-bound, bound, shape)
        elif leaf == "gamma":
            params[name] = np.ones(shape)
        elif leaf == "b_fg":
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return CipsModel(cfg, params)


def cips_forward(x: np.ndarray, model: CipsModel, mode: str = "eval",
                 rng: Optional[np.random.Generator] = None, record: Optional[bool] = None) -> np.ndarray:
    """Elite-pixel probabilities ``(n_s, h, w, 1)`` for a batch ``(n_s, n_t, h, w, f)``.

    Train mode uses batch statistics (and updates the running ones) and needs
    ``rng`` for dropout.  ``record`` (default: train mode) keeps the
    activations needed by :func:`backward`.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    cfg = model.config
    if x.ndim != 5 or x.shape[-1] != cfg.features:
        raise ops.ShapeError(f"input must be (n_s, n_t, h, w, {cfg.features}), got {x.shape}")
    train = mode == "train"
    if record is None:
        record = train
    if not train and model.bn_updates == 0:
        raise UsageError("eval-mode forward needs batch-norm running statistics; train the model first")
    if train and cfg.dropout > 0 and rng is None:
        raise UsageError("train-mode forward needs an rng for dropout")
    dt = np.dtype(cfg.dtype)
    p = {k: v.astype(dt, copy=False) for k, v in model.params.items()}
    k = cfg.kernel
    # channels-first from here on: (f, n_t, n_s, h, w)
    h = np.ascontiguousarray(np.asarray(x, dtype=dt).transpose(4, 1, 0, 2, 3))
    tape = {}

    res = convlstm_forward_cf(h, ConvLstmParams.from_dict(p, "convlstm1."), True, record)
    h, tape["convlstm1"] = res if record else (res, None)
    h, ln_cache = ops.layer_norm(h, p["ln1.gamma"], p["ln1.beta"])
    if record:
        tape["ln1"] = ln_cache
        tape["relu1"] = h
    del ln_cache
    h = ops.relu(h)

    res = convlstm_forward_cf(h, ConvLstmParams.from_dict(p, "convlstm2."), False, record)
    h, tape["convlstm2"] = res if record else (res, None)

    updates = {}
    for i, bn in enumerate(BN_LAYERS):
        if i > 0:
            conv = CONV_LAYERS[i - 1]
            kmat = ops.kernel_matrix(p[f"{conv}.w"])
            tape[conv] = (h, kmat)
            h = ops.conv_cf(h, kmat, p[f"{conv}.b"], k)
        if train:
            h, mu, var, tape[bn] = ops.batch_norm_train(h, p[f"{bn}.gamma"], p[f"{bn}.beta"])
            updates[bn] = (mu, var)
        else:
            h = ops.batch_norm_eval(h, p[f"{bn}.gamma"], p[f"{bn}.beta"],
                                    model.state[f"{bn}.mean"].astype(dt), model.state[f"{bn}.var"].astype(dt))
        tape[f"relu_{bn}"] = h
        h = ops.relu(h)

    if train and cfg.dropout > 0:
        mask = ops.dropout_mask(h.shape, cfg.dropout, rng, dt)
        h = h * mask
        tape["dropout"] = mask
    tape["head"] = h
    prob = ops.sigmoid(ops.dense(h, p["head.w"], p["head.b"]))
    tape["prob"] = prob

    if train:
        for bn, (mu, var) in updates.items():
            model.state[f"{bn}.mean"] = BN_MOMENTUM * model.state[f"{bn}.mean"] + (1 - BN_MOMENTUM) * mu
            model.state[f"{bn}.var"] = BN_MOMENTUM * model.state[f"{bn}.var"] + (1 - BN_MOMENTUM) * var
        model.bn_updates += 1
    model._tape = (tape, p, train) if record else None
    return np.ascontiguousarray(prob.transpose(1, 2, 3, 0))


def backward(dprob: np.ndarray, model: CipsModel) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss for every trainable parameter, given
    d loss / d prob from the last recorded forward pass."""
    if model._tape is None:
        raise UsageError("backward called without a recorded forward pass")
    tape, p, train = model._tape
    model._tape = None
    if not train:
        raise UsageError("backward needs a train-mode forward (batch statistics)")
    k = model.config.kernel
    grads = {}
    dt = tape["prob"].dtype
    d = np.ascontiguousarray(np.asarray(dprob, dtype=dt).transpose(3, 0, 1, 2))
    d = ops.sigmoid_backward(d, tape["prob"])
    d, grads["head.w"], grads["head.b"] = ops.dense_backward(d, tape["head"], p["head.w"])
    if "dropout" in tape:
        d = d * tape["dropout"]
    for i in reversed(range(len(BN_LAYERS))):
        bn = BN_LAYERS[i]
        d = ops.relu_backward(d, tape[f"relu_{bn}"])
        d, grads[f"{bn}.gamma"], grads[f"{bn}.beta"] = ops.batch_norm_backward(d, tape[bn])
        if i > 0:
            conv = CONV_LAYERS[i - 1]
            xin, kmat = tape[conv]
            d, dk, grads[f"{conv}.b"] = ops.conv_cf_backward(d, xin, kmat, k)
            grads[f"{conv}.w"] = ops.kernel_grad(dk, p[f"{conv}.w"].shape)
    d, g2 = convlstm_backward_cf(d, tape["convlstm2"])
    grads.update({f"convlstm2.{n}": v for n, v in g2.items()})
    d = ops.relu_backward(d, tape["relu1"])
    d, grads["ln1.gamma"], grads["ln1.beta"] = ops.layer_norm_backward(d, tape["ln1"])
    _, g1 = convlstm_backward_cf(d, tape["convlstm1"], need_input_grad=False)
    grads.update({f"convlstm1.{n}": v for n, v in g1.items()})
    return {name: np.asarray(grads[name], dtype=np.float64) for name in param_shapes(model.config)}
