"""Whole-scene prediction: tile, eval-mode forward in chunks, stitch, threshold."""
from __future__ import annotations

from typing import Optional

import numpy as np

from . import stack_io
from .nn import CipsModel, ShapeError, cips_forward

FEATURES_BY_COUNT = {2: "cos_sin", 3: "cos_sin_amp"}


def features_for(model: CipsModel) -> str:
    try:
        return FEATURES_BY_COUNT[model.config.features]
    except KeyError:
        raise ShapeError(f"no stack feature set yields {model.config.features} channels") from None


def predict_probability(model: CipsModel, stack: stack_io.InterferogramStack,
                        sample_epochs: Optional[int] = None, batch_size: int = 4,
                        size: int = stack_io.PATCH_SIZE) -> np.ndarray:
    """Per-pixel elite probability map ``(h, w)`` in float64."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if sample_epochs is not None and sample_epochs < stack.n_t:
        stack = stack_io.temporal_sample(stack, sample_epochs)
    batch = stack_io.extract_patches(stack, features_for(model), size)
    out = np.empty((batch.n_s, size, size, 1), dtype=np.float64)
    for i in range(0, batch.n_s, batch_size):
        out[i:i + batch_size] = cips_forward(batch.data[i:i + batch_size], model, "eval")
    prob = stack_io.PatchBatch(out, batch.origin, batch.valid, size)
    return stack_io.reassemble_patches(prob, *stack.shape)[..., 0]


def threshold_mask(prob: np.ndarray, threshold: float = 0.5) -> stack_io.EliteMask:
    """Elite where ``prob > threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    return stack_io.EliteMask.full(prob > threshold)


def predict_mask(model: CipsModel, stack: stack_io.InterferogramStack, threshold: float = 0.5,
                 sample_epochs: Optional[int] = None, batch_size: int = 4) -> stack_io.EliteMask:
    return threshold_mask(predict_probability(model, stack, sample_epochs, batch_size), threshold)
