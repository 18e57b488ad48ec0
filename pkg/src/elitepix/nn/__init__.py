from .checkpoint import (CheckpointError, OptimizerState, checkpoint_bytes, load_checkpoint,
                         save_checkpoint)
from .convlstm import (ConvLstmParams, ConvLstmState, convlstm_backward, convlstm_cell_step,
                       convlstm_forward)
from .model import (CipsModel, ModelConfig, UsageError, backward, cips_forward, init_params,
                    param_count, param_shapes)
from .ops import ShapeError, Tensor, conv2d

__all__ = [
    "CheckpointError", "OptimizerState", "checkpoint_bytes", "load_checkpoint", "save_checkpoint",
    "ConvLstmParams", "ConvLstmState", "convlstm_backward", "convlstm_cell_step", "convlstm_forward",
    "CipsModel", "ModelConfig", "UsageError", "backward", "cips_forward", "init_params",
    "param_count", "param_shapes", "ShapeError", "Tensor", "conv2d",
]
