"""Compare analytic gradients from the tape against central finite differences."""

from __future__ import annotations

import logging
from typing import Callable, Sequence

import numpy as np

from .tensor import Parameter, Tape, Tensor

__all__ = [
    "NondeterminismError",
    "grad_check",
]

logger = logging.getLogger(__name__)


class NondeterminismError(RuntimeError):
    """Raised when two evaluations of the same forward pass disagree."""


def grad_check(
    forward: Callable[[], Tensor], parameters: Sequence[Parameter], eps: float = 1e-4
) -> float:
    """Get the largest relative disagreement between analytic and numeric gradients.

    :param forward: A deterministic function of the parameters returning a scalar loss.
        Parameters should be 64-bit; finite differences are unreliable at 32-bit.
    :param parameters: The parameters to check
    :param eps: The central difference step, in ``[1e-6, 1e-3]``
    :returns: The maximum over every parameter entry of
        ``|analytic - numeric| / max(1, |numeric|)``
    :raises ValueError: if ``eps`` is out of range
    :raises NondeterminismError: if two runs of ``forward`` differ
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"finite difference step must lie in [1e-6, 1e-3], got {eps}")
    for parameter in parameters:
        if parameter.dtype != np.float64:
            logger.warning("%s is %s; gradient checks assume 64-bit", parameter.name, parameter.dtype)

    for parameter in parameters:
        parameter.zero_grad()
    with Tape() as tape:
        loss = forward()
    reference = loss.item()
    if forward().item() != reference:
        raise NondeterminismError("two runs of the forward pass produced different losses")
    tape.backward(loss)

    worst = 0.0
    for parameter in parameters:
        analytic = parameter.grad.reshape(-1)
        original = parameter.value.numpy()
        flat = original.reshape(-1)
        for i in range(flat.size):
            perturbed = flat.copy()
            perturbed[i] = flat[i] + eps
            parameter.assign(perturbed.reshape(original.shape))
            upper = forward().item()
            perturbed[i] = flat[i] - eps
            parameter.assign(perturbed.reshape(original.shape))
            lower = forward().item()
            numeric = (upper - lower) / (2 * eps)
            error = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, error)
        parameter.assign(original)
        logger.debug("checked %s (%d entries), running max error %.3e", parameter.name, flat.size, worst)
    return worst
