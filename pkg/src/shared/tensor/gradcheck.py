"""
Central finite-difference gradient checking.
"""
from typing import Callable, Optional

import numpy as np

from src.shared.domain.exceptions import ContractError

from .tensor import GradTape, Tensor


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-4,
    max_elements: Optional[int] = None,
    seed: int = 0,
    floor: float = 1e-8,
) -> float:
    """
    Compare the tape gradient of ``f`` at ``x`` with central differences.

    Args:
        f: deterministic function returning a scalar tensor
        x: 64-bit tensor; its data is perturbed in place and restored
        step: finite-difference step
        max_elements: check a random subset of this many elements
        seed: selects the subset
        floor: lower bound of the relative-error denominator

    Returns:
        max over checked elements of |g_analytic - g_numeric| / max(floor, |g_numeric|)
    """
    if x.dtype != np.float64:
        raise ContractError(f"gradient checking needs a float64 tensor, got {x.dtype}")

    x.data = np.ascontiguousarray(x.data)
    was_tracking = x.requires_grad
    x.requires_grad = True
    x.grad = None
    try:
        with GradTape() as tape:
            loss = f(x)
            tape.backward(loss)
        analytic = tape.gradient(x)
        if analytic is None:
            analytic = np.zeros_like(x.data)
        analytic = np.array(analytic, dtype=np.float64)

        flat = x.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_elements is not None and max_elements < flat.size:
            indices = np.random.default_rng(seed).choice(flat.size, size=max_elements, replace=False)

        worst = 0.0
        analytic_flat = analytic.reshape(-1)
        for i in indices:
            original = flat[i]
            flat[i] = original + step
            upper = f(x).item()
            flat[i] = original - step
            lower = f(x).item()
            flat[i] = original
            numeric = (upper - lower) / (2 * step)
            error = abs(analytic_flat[i] - numeric) / max(floor, abs(numeric))
            worst = max(worst, error)
        return float(worst)
    finally:
        x.requires_grad = was_tracking
        x.grad = None
