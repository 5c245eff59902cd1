"""Float64 tensors, tape autodiff, Adam and gradient checking."""

from capforge.numerics import ops
from capforge.numerics.gradcheck import GradCheckReport, grad_check, relative_error
from capforge.numerics.optim import Adam, AdamState, adam_step
from capforge.numerics.ops import softmax_cross_entropy
from capforge.numerics.tensor import Tape, Tensor, backward, corrupt_gradient, no_tape

__all__ = [
    "Adam",
    "AdamState",
    "GradCheckReport",
    "Tape",
    "Tensor",
    "adam_step",
    "backward",
    "corrupt_gradient",
    "grad_check",
    "no_tape",
    "ops",
    "relative_error",
    "softmax_cross_entropy",
]
