"""Dense tensors with reverse-mode differentiation."""
from . import ops
from .checkpoint import CheckpointError, load_tensors, save_tensors
from .core import ShapeError, Tape, Tensor, as_tensor, current_tape, no_grad, use_tape
from .nn import Conv2d, ConvNormAct, GroupNorm, LayerNorm, Linear, Module, parameter

__all__ = [
    "ops", "Tensor", "Tape", "ShapeError", "as_tensor", "current_tape", "no_grad", "use_tape",
    "Module", "Linear", "Conv2d", "ConvNormAct", "GroupNorm", "LayerNorm", "parameter",
    "save_tensors", "load_tensors", "CheckpointError",
]
