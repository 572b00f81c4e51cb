"""Minimal dense-tensor engine with reverse-mode differentiation."""
from . import functional
from .gradcheck import grad_check, grad_check_many, relative_error
from .tensor import BranchRecorder, Node, Parameter, Tape, Tensor, active_tape, backward, make_op

__all__ = [
    "BranchRecorder", "Node", "Parameter", "Tape", "Tensor", "active_tape", "backward", "functional",
    "grad_check", "grad_check_many", "make_op", "relative_error",
]
