"""SGD with momentum and decoupled-from-nothing classic weight decay.

Update rule per parameter:

    v <- momentum * v + grad + weight_decay * param
    param <- param - lr * v

Velocity buffers are keyed by parameter name so that freezing a subset of
parameters (training phase 2) simply means not passing them to step().
"""

from __future__ import annotations

from typing import Dict, Iterable, Tuple

import numpy as np

from .tensor import Tensor


def sgd_momentum_step(
    params: Dict[str, Tensor],
    velocities: Dict[str, np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """One in-place update of every parameter in `params`.

    Missing velocity buffers are created as zeros on first use.
    """
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        v = velocities.get(name)
        if v is None:
            v = velocities[name] = np.zeros_like(p.data)
        if weight_decay:
            g = g + p.data.dtype.type(weight_decay) * p.data
        v *= p.data.dtype.type(momentum)
        v += g
        p.data -= p.data.dtype.type(lr) * v


def trainable_subset(
    params: Dict[str, Tensor], frozen_prefixes: Tuple[str, ...] = ()
) -> Dict[str, Tensor]:
    """Parameters whose names do not start with any frozen prefix."""
    return {
        n: p
        for n, p in params.items()
        if not any(n.startswith(pre) for pre in frozen_prefixes)
    }


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        else:
            p.grad.fill(0.0)
