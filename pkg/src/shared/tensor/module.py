"""
Layer toolkit: parameters, modules and the two stateful layers the network
is made of (convolution and batch normalization).
"""
import threading
from collections import OrderedDict
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np

from src.shared.domain.exceptions import ContractError, ShapeError

from . import functional as F
from .tensor import DEFAULT_DTYPE, Tensor


class Parameter(Tensor):
    """Trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name)


class MacCounter:
    """Accumulates multiply-accumulate counts of every convolution executed."""

    def __init__(self):
        self.total = 0
        self.pooled = 0
        self.per_layer: List[Tuple[str, int]] = []

    def add(self, label: str, macs: int, pooled: bool = False) -> None:
        # convolutions over globally pooled 1x1 maps do not scale with frame area
        if pooled:
            self.pooled += macs
        else:
            self.total += macs
        self.per_layer.append((label, macs))


_counters = threading.local()


@contextmanager
def count_macs_scope() -> Iterator[MacCounter]:
    """Count convolution MACs (per frame) executed inside the block."""
    counter = MacCounter()
    previous = getattr(_counters, "current", None)
    _counters.current = counter
    try:
        yield counter
    finally:
        _counters.current = previous


class Module:
    """Base class for layers; children and parameters are discovered from attributes."""

    def __init__(self):
        self.training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    # Traversal

    def named_children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.named_children():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def register_buffer(self, name: str, array: np.ndarray) -> None:
        if "_buffers" not in vars(self):
            self._buffers: Dict[str, np.ndarray] = OrderedDict()
        self._buffers[name] = array

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, array in vars(self).get("_buffers", {}).items():
            yield prefix + name, array
        for name, child in self.named_children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    # Modes and dtype

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Convert every parameter and buffer in place (float64 for gradient checks)."""
        dtype = np.dtype(dtype)
        for module in self.modules():
            for value in vars(module).values():
                if isinstance(value, Parameter):
                    value.data = value.data.astype(dtype)
                    value.grad = None
            buffers = vars(module).get("_buffers")
            if buffers:
                for name in list(buffers):
                    buffers[name] = buffers[name].astype(dtype)
        return self

    # Serialization

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data
        for name, buf in self.named_buffers():
            state[name] = buf
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        if strict:
            missing = sorted(expected - set(state))
            unexpected = sorted(set(state) - expected)
            if missing or unexpected:
                raise ContractError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, value in state.items():
            if name in params:
                target = params[name].data
            elif name in buffers:
                target = buffers[name]
            else:
                continue
            if target.shape != value.shape:
                raise ShapeError(f"shape mismatch for '{name}'", target.shape, value.shape)
            # buffers are updated in place so BN keeps referencing the same arrays
            if name in params:
                params[name].data = np.array(value, dtype=target.dtype)
            else:
                target[...] = value


class ModuleList(Module):
    """Ordered container of child modules."""

    def __init__(self, modules=()):
        super().__init__()
        self.items: List[Module] = list(modules)

    def named_children(self) -> Iterator[Tuple[str, Module]]:
        for index, module in enumerate(self.items):
            yield str(index), module

    def __iter__(self):
        return iter(self.items)

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, index: int) -> Module:
        return self.items[index]

    def append(self, module: Module) -> None:
        self.items.append(module)


class Sequential(ModuleList):
    """Applies its children in order."""

    def __init__(self, *modules: Module):
        super().__init__(modules)

    def forward(self, x: Tensor) -> Tensor:
        for module in self.items:
            x = module(x)
        return x


_ACTIVATIONS: Dict[str, Callable[[Tensor], Tensor]] = {
    "relu": F.relu,
    "sigmoid": F.sigmoid,
    "tanh": F.tanh,
    "hardswish": F.hardswish,
    "hardsigmoid": F.hardsigmoid,
}


class Activation(Module):
    """Stateless elementwise activation by name."""

    def __init__(self, kind: str):
        super().__init__()
        if kind not in _ACTIVATIONS:
            raise ContractError(f"unknown activation '{kind}'")
        self.kind = kind

    def forward(self, x: Tensor) -> Tensor:
        return _ACTIVATIONS[self.kind](x)


class Conv2d(Module):
    """
    2-D convolution layer.

    Weights are drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); ``padding``
    defaults to "same" for odd kernels.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        padding: Optional[int] = None,
        dilation: int = 1,
        groups: int = 1,
        bias: bool = True,
        rng: Optional[np.random.Generator] = None,
        zero_bias: bool = False,
    ):
        super().__init__()
        if in_channels % groups or out_channels % groups:
            raise ContractError(f"channels {in_channels}->{out_channels} not divisible by groups={groups}")
        rng = rng or np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = dilation * (kernel_size - 1) // 2 if padding is None else padding
        self.dilation = dilation
        self.groups = groups
        self.on_pooled = False

        fan_in = in_channels // groups * kernel_size * kernel_size
        bound = 1.0 / np.sqrt(fan_in)
        shape = (out_channels, in_channels // groups, kernel_size, kernel_size)
        self.weight = Parameter(rng.uniform(-bound, bound, size=shape).astype(DEFAULT_DTYPE))
        self.bias: Optional[Parameter] = None
        if bias:
            values = np.zeros(out_channels) if zero_bias else rng.uniform(-bound, bound, size=out_channels)
            self.bias = Parameter(values.astype(DEFAULT_DTYPE))

    def forward(self, x: Tensor) -> Tensor:
        out = F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation, self.groups)
        counter = getattr(_counters, "current", None)
        if counter is not None:
            macs = self.out_channels * (self.in_channels // self.groups) * self.kernel_size ** 2
            counter.add(f"conv{self.kernel_size}x{self.kernel_size}", macs * out.shape[2] * out.shape[3], self.on_pooled)
        return out

    def __repr__(self) -> str:
        return (
            f"Conv2d({self.in_channels}, {self.out_channels}, k={self.kernel_size}, s={self.stride}, "
            f"d={self.dilation}, g={self.groups})"
        )


class BatchNorm2d(Module):
    """Batch normalization with running statistics (momentum 0.1, eps 1e-5)."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.weight = Parameter(np.ones(channels, dtype=DEFAULT_DTYPE))
        self.bias = Parameter(np.zeros(channels, dtype=DEFAULT_DTYPE))
        self.register_buffer("running_mean", np.zeros(channels, dtype=DEFAULT_DTYPE))
        self.register_buffer("running_var", np.ones(channels, dtype=DEFAULT_DTYPE))

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(
            x,
            self.weight,
            self.bias,
            self._buffers["running_mean"],
            self._buffers["running_var"],
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )


def conv_bn_act(
    in_channels: int,
    out_channels: int,
    kernel_size: int,
    rng: np.random.Generator,
    activation: Optional[str] = "relu",
    stride: int = 1,
    dilation: int = 1,
    groups: int = 1,
) -> Sequential:
    """Bias-free convolution, batch norm and optional activation."""
    layers: List[Module] = [
        Conv2d(in_channels, out_channels, kernel_size, stride=stride, dilation=dilation, groups=groups,
               bias=False, rng=rng),
        BatchNorm2d(out_channels),
    ]
    if activation:
        layers.append(Activation(activation))
    return Sequential(*layers)
