"""Finite-difference verification of taped gradients.

Analytic gradients are compared against central differences on randomly
sampled parameter coordinates. Two estimators with spacings h and h/2 are
combined by Richardson extrapolation; coordinates where the two estimators
disagree are rejected as lying within h of a ReLU kink (a genuine kink makes
the one-sided slopes, and hence the two estimators, inconsistent).

The relative error uses denominator max(|analytic|, |numeric|, floor). The
floor expresses the resolving power of the estimator itself: below it, a
central difference of a float32 loss is dominated by rounding noise, so the
comparison saturates to an absolute one at that scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict

import numpy as np

from .tensor import Tape, Tensor, backward, zero_grads

# Estimator-noise floors for losses of order unity; see module docstring.
_DEFAULTS = {
    np.dtype(np.float32): {"h": 1e-2, "floor": 0.05},
    np.dtype(np.float64): {"h": 1e-5, "floor": 1e-4},
}


@dataclass
class GradcheckResult:
    max_rel_err: float
    checked: int
    skipped_kinks: int
    worst_coord: str

    def __float__(self) -> float:
        return self.max_rel_err


def finite_diff_gradcheck(
    loss_fn: Callable[[], Tensor],
    params: Dict[str, Tensor],
    seed: int = 0,
    n_coords: int = 50,
    h: float | None = None,
    floor: float | None = None,
    kink_skip: bool = True,
) -> GradcheckResult:
    """Max relative error between taped gradients and central differences.

    ``loss_fn`` must be a deterministic scalar function of the current values
    in ``params`` (it is re-evaluated several times per coordinate). Sampling
    oversamples 4x so that kink-rejected coordinates can be replaced.
    """
    names = sorted(params)
    dtype = params[names[0]].data.dtype
    if h is None:
        h = _DEFAULTS[np.dtype(dtype)]["h"]
    if floor is None:
        floor = _DEFAULTS[np.dtype(dtype)]["floor"]

    zero_grads(params.values())
    with Tape() as tape:
        loss = loss_fn()
        backward(loss, tape)
    f0 = loss.item()
    analytic = {n: params[n].grad.copy() for n in names}

    sizes = [params[n].data.size for n in names]
    offsets = np.cumsum([0] + sizes)
    total = offsets[-1]
    rng = np.random.default_rng(seed)
    sample = rng.choice(total, size=min(total, 4 * n_coords), replace=False)

    eps = float(np.finfo(dtype).eps)
    noise = eps * max(1.0, abs(f0)) / h

    def eval_at(p: Tensor, idx: int, value: float) -> float:
        old = p.data.flat[idx]
        p.data.flat[idx] = value
        try:
            return loss_fn().item()
        finally:
            p.data.flat[idx] = old

    max_err, worst = 0.0, ""
    checked = skipped = 0
    for flat in sample:
        if checked >= n_coords:
            break
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[which]
        p = params[name]
        idx = int(flat - offsets[which])
        theta = float(p.data.flat[idx])

        d_h = (eval_at(p, idx, theta + h) - eval_at(p, idx, theta - h)) / (2 * h)
        d_h2 = (eval_at(p, idx, theta + h / 2) - eval_at(p, idx, theta - h / 2)) / h
        a = float(analytic[name].flat[idx])

        scale = max(abs(d_h), abs(d_h2), abs(a), floor)
        if kink_skip and abs(d_h - d_h2) > max(0.05 * scale, 20 * noise):
            skipped += 1
            continue
        numeric = (4 * d_h2 - d_h) / 3  # Richardson: cancels the h^2 term
        err = abs(numeric - a) / max(abs(numeric), abs(a), floor)
        if err > max_err:
            max_err, worst = err, f"{name}[{idx}]"
        checked += 1

    return GradcheckResult(max_err, checked, skipped, worst)
