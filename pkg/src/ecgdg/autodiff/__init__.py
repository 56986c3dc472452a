"""Minimal dense-tensor engine with reverse-mode differentiation."""

from . import ops
from .params import ParamSet, adam_step, load_checkpoint, read_checkpoint, save_checkpoint
from .tensor import Tape, Tensor, active_tape, as_tensor, backward, set_debug

__all__ = [
    "ParamSet", "Tape", "Tensor", "active_tape", "adam_step", "as_tensor", "backward",
    "load_checkpoint", "ops", "read_checkpoint", "save_checkpoint", "set_debug",
]
