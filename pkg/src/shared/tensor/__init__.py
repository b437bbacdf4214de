# Dense tensors, reverse-mode differentiation and the layer toolkit
from .gradcheck import finite_difference_check
from .module import (
    Activation,
    BatchNorm2d,
    Conv2d,
    MacCounter,
    Module,
    ModuleList,
    Parameter,
    Sequential,
    conv_bn_act,
    count_macs_scope,
)
from .tensor import DEFAULT_DTYPE, GradTape, Tensor, active_tape, as_tensor, backward, ones, zeros

__all__ = [
    "Activation",
    "BatchNorm2d",
    "Conv2d",
    "DEFAULT_DTYPE",
    "GradTape",
    "MacCounter",
    "Module",
    "ModuleList",
    "Parameter",
    "Sequential",
    "Tensor",
    "active_tape",
    "as_tensor",
    "backward",
    "conv_bn_act",
    "count_macs_scope",
    "finite_difference_check",
    "ones",
    "zeros",
]
