"""
Adam with per-group learning rates.
"""
from collections import OrderedDict
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import structlog

from src.shared.domain.exceptions import ConfigError, GradientError, ShapeError
from src.shared.tensor import Module, Parameter

from ..domain.entities import PARAMETER_GROUPS, AdamState

logger = structlog.get_logger(__name__)

NamedParameters = Sequence[Tuple[str, Parameter]]


def adam_step(
    params: Mapping[str, Parameter],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    learning_rates: Mapping[str, float],
) -> AdamState:
    """
    One bias-corrected Adam update, in place on ``params`` and ``state``.

    Args:
        params: parameters by name
        grads: gradients by parameter name; missing names are skipped
        state: moments and step counts; each updated parameter advances its own count
        learning_rates: learning rate per parameter name

    Returns:
        The advanced state
    """
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise GradientError(name)
        if grad.shape != params[name].shape:
            raise ShapeError(f"gradient for '{name}' does not match its parameter", grad.shape, params[name].shape)

    state.step += 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    for name, grad in grads.items():
        param = params[name]
        grad = grad.astype(np.float64)
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros(param.shape, dtype=np.float64)
            v = np.zeros(param.shape, dtype=np.float64)
        # bias correction counts this parameter's own updates
        t = state.steps.get(name, 0) + 1
        m = b1 * m + (1.0 - b1) * grad
        v = b2 * v + (1.0 - b2) * grad * grad
        state.first_moment[name] = m
        state.second_moment[name] = v
        state.steps[name] = t
        update = learning_rates[name] * (m / (1.0 - b1 ** t)) / (np.sqrt(v / (1.0 - b2 ** t)) + eps)
        param.data = (param.data - update).astype(param.dtype)
    return state


class Adam:
    """Adam over named parameter groups (backbone, decoder, dgf)."""

    def __init__(
        self,
        groups: Mapping[str, NamedParameters],
        learning_rates: Mapping[str, float],
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        missing = set(groups) - set(learning_rates)
        if missing:
            raise ConfigError(f"no learning rate for parameter groups {sorted(missing)}")
        self.groups: Dict[str, List[Tuple[str, Parameter]]] = OrderedDict(
            (group, list(named)) for group, named in groups.items()
        )
        self.learning_rates: Dict[str, float] = {g: float(learning_rates[g]) for g in self.groups}
        self.state = AdamState(beta1=betas[0], beta2=betas[1], eps=eps)

    @classmethod
    def for_model(cls, model: Module, learning_rates: Mapping[str, float], **kwargs) -> "Adam":
        return cls(parameter_groups(model), learning_rates, **kwargs)

    def set_learning_rates(self, learning_rates: Mapping[str, float]) -> None:
        for group in self.groups:
            if group not in learning_rates:
                raise ConfigError(f"no learning rate for parameter group '{group}'")
            self.learning_rates[group] = float(learning_rates[group])
        logger.debug("learning_rates_set", **self.learning_rates)

    def named_parameters(self) -> List[Tuple[str, Parameter]]:
        return [item for named in self.groups.values() for item in named]

    def zero_grad(self) -> None:
        for _, param in self.named_parameters():
            param.grad = None

    def step(self) -> None:
        """Update every parameter that holds a gradient."""
        params, grads, rates = {}, {}, {}
        for group, named in self.groups.items():
            for name, param in named:
                if param.grad is None:
                    continue
                params[name] = param
                grads[name] = param.grad
                rates[name] = self.learning_rates[group]
        if grads:
            adam_step(params, grads, self.state, rates)

    def state_tensors(self) -> "OrderedDict[str, np.ndarray]":
        """Moments keyed ``optimizer.m.<param>`` and ``optimizer.v.<param>``."""
        tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name in sorted(self.state.first_moment):
            tensors[f"optimizer.m.{name}"] = self.state.first_moment[name]
            tensors[f"optimizer.v.{name}"] = self.state.second_moment[name]
        return tensors

    def state_header(self) -> Dict:
        return {
            "step": self.state.step,
            "steps": dict(sorted(self.state.steps.items())),
            "beta1": self.state.beta1,
            "beta2": self.state.beta2,
            "eps": self.state.eps,
            "learning_rates": dict(self.learning_rates),
        }

    def load_state(self, header: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
        known = {name for name, _ in self.named_parameters()}
        first, second = {}, {}
        for key, value in tensors.items():
            if key.startswith("optimizer.m."):
                first[key[len("optimizer.m."):]] = np.array(value, dtype=np.float64)
            elif key.startswith("optimizer.v."):
                second[key[len("optimizer.v."):]] = np.array(value, dtype=np.float64)
        unknown = (set(first) | set(second)) - known
        if unknown or set(first) != set(second):
            raise ConfigError(f"optimizer state does not match the model parameters: {sorted(unknown)[:5]}")
        # headers without per-parameter counts credit every stored moment with the global count
        stored = header.get("steps") or {name: int(header["step"]) for name in first}
        steps = {name: int(count) for name, count in stored.items()}
        if set(steps) != set(first):
            raise ConfigError("optimizer step counts do not match the stored moments")
        self.state = AdamState(
            step=int(header["step"]),
            beta1=float(header["beta1"]),
            beta2=float(header["beta2"]),
            eps=float(header["eps"]),
            first_moment=first,
            second_moment=second,
            steps=steps,
        )
        self.learning_rates.update({g: float(v) for g, v in header.get("learning_rates", {}).items()
                                    if g in self.groups})


def parameter_groups(model: Module) -> "OrderedDict[str, List[Tuple[str, Parameter]]]":
    """Split a MattingNetwork's parameters into backbone, decoder (aspp, decoder, projection) and dgf."""
    groups: "OrderedDict[str, List[Tuple[str, Parameter]]]" = OrderedDict((g, []) for g in PARAMETER_GROUPS)
    for name, param in model.named_parameters():
        root = name.split(".", 1)[0]
        if root == "backbone":
            groups["backbone"].append((name, param))
        elif root == "refiner":
            groups["dgf"].append((name, param))
        else:
            groups["decoder"].append((name, param))
    return groups
