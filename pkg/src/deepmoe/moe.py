"""Gated mixture-of-experts convolution.

A gated conv treats each input channel as one expert: nonnegative per-example
gate values scale the channels before the convolution, so the layer output is
the gate-weighted sum of per-channel convolutions

    z = sum_i g_i * (K_i * x_i).

Three routes compute it:

* :func:`gated_conv_dense`   — conv2d(g * x, K), differentiable, used in training.
* :func:`gated_conv_sparse`  — inference path that gathers only channels with
  g_i > 0 into a compacted buffer and convolves the reduced stack.
* :func:`moe_oracle`         — literal per-channel direct summation; the test
  reference, never used on any fast path.

Gates come from per-layer linear heads applied to a shared embedding vector,
rectified so that exact zeros (skipped experts) occur naturally.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import ops
from .errors import ContractError, ShapeError
from .tensor import Tensor


@dataclass
class GateVector:
    """Nonnegative channel weights for one example at one gated layer."""

    values: np.ndarray
    layer_index: int

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 1:
            raise ShapeError(f"gate vector must be 1-D, got shape {self.values.shape}")
        if np.any(self.values < 0):
            raise ContractError("gate values must be nonnegative")

    @property
    def sparsity(self) -> float:
        """Fraction of exactly-zero entries."""
        return float(np.mean(self.values == 0))

    @property
    def active(self) -> np.ndarray:
        return np.flatnonzero(self.values)


@dataclass
class GateHead:
    """Per-layer gate projection: gates = relu(weight^T . e)."""

    weight: Tensor  # [embed_dim, channels]
    bias: Optional[Tensor] = None  # off by default; kept as an explicit variant

    @property
    def width(self) -> int:
        return self.weight.data.shape[1]


def gate_forward(head: GateHead, e: Tensor) -> Tensor:
    """Rectified linear head over the embedding; e is [embed_dim] or [B, embed_dim].

    Output is elementwise >= 0 with exact zeros where the projection is
    negative, which is what makes expert skipping well defined.
    """
    if e.data.shape[-1] != head.weight.data.shape[0]:
        raise ShapeError(
            f"gate_forward: embedding dim {e.data.shape[-1]} does not match "
            f"head input dim {head.weight.data.shape[0]}"
        )
    return ops.relu(ops.linear(e, head.weight, head.bias))


def _gates_as_array(gates, c_in: int, batch: int) -> np.ndarray:
    g = gates.data if isinstance(gates, Tensor) else np.asarray(gates)
    if g.ndim == 1:
        g = np.broadcast_to(g, (batch, g.shape[0]))
    if g.shape != (batch, c_in):
        raise ShapeError(f"gates shape {g.shape} incompatible with input [{batch},{c_in}]")
    return g


def gated_conv_dense(
    x: Tensor, kernel: Tensor, gates, stride: int = 1, padding: int = 0
) -> Tensor:
    """conv2d(g * x, kernel) with per-example gates broadcast over space.

    ``gates`` may be a Tensor [B, C_in] (differentiable route, used for
    end-to-end training) or a plain array [B, C_in] / [C_in].
    """
    if x.data.ndim != 4:
        raise ShapeError(f"gated_conv_dense expects [B,C,H,W], got {x.data.shape}")
    b, c_in = x.data.shape[0], x.data.shape[1]
    if isinstance(gates, Tensor):
        if np.any(gates.data < 0):
            raise ContractError("gated_conv_dense: negative gate values")
        g4 = ops.reshape(gates, (b, c_in, 1, 1))
        return ops.conv2d(ops.mul(x, g4), kernel, stride=stride, padding=padding)
    g = _gates_as_array(gates, c_in, b)
    if np.any(g < 0):
        raise ContractError("gated_conv_dense: negative gate values")
    gx = Tensor._wrap(x.data * g[:, :, None, None])
    return ops.conv2d(gx, kernel, stride=stride, padding=padding)


def gated_conv_sparse(
    x: Tensor, kernel: Tensor, gates, stride: int = 1, padding: int = 0
):
    """Inference-only gated conv that skips channels with gate exactly 0.

    Returns (output Tensor, active channel count per example). Active
    channels are gathered into a compacted buffer per example and convolved
    densely over the reduced C_in; an exactly-zero gate means skip, no
    epsilon thresholding.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"gated_conv_sparse expects [B,C,H,W], got {x.data.shape}")
    b, c_in, h, w = x.data.shape
    g = _gates_as_array(gates, c_in, b)
    k, c_out = kernel.data.shape[1], kernel.data.shape[3]
    h_out, w_out = ops.conv_out_hw(h, w, k, stride, padding)
    out = np.zeros((b, c_out, h_out, w_out), dtype=x.data.dtype)
    active_counts = np.zeros(b, dtype=np.int64)
    for i in range(b):
        idx = np.flatnonzero(g[i])
        active_counts[i] = idx.size
        if idx.size == 0:
            continue
        xi = x.data[i : i + 1, idx] * g[i, idx][None, :, None, None]
        sub_kernel = Tensor._wrap(np.ascontiguousarray(kernel.data[idx]))
        out[i] = ops.conv2d(Tensor._wrap(np.ascontiguousarray(xi)), sub_kernel,
                            stride=stride, padding=padding).data[0]
    return Tensor._wrap(out), active_counts


def moe_oracle(x, kernel, gates) -> np.ndarray:
    """Reference gated conv for one example: z = sum_i g_i (K_i * x_i).

    Literal direct summation, one channel at a time — no im2col, no matmul.
    Only for tests.
    """
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    kd = kernel.data if isinstance(kernel, Tensor) else np.asarray(kernel)
    g = gates.data if isinstance(gates, Tensor) else np.asarray(gates)
    c_in, h, w = xd.shape
    k, c_out = kd.shape[1], kd.shape[3]
    h_out, w_out = h - k + 1, w - k + 1
    out = np.zeros((c_out, h_out, w_out), dtype=np.float64)
    for i in range(c_in):
        expert = np.zeros((c_out, h_out, w_out), dtype=np.float64)
        for o in range(c_out):
            for s in range(h_out):
                for t in range(w_out):
                    acc = 0.0
                    for u in range(k):
                        for v in range(k):
                            acc += float(kd[i, u, v, o]) * float(xd[i, s + u, t + v])
                    expert[o, s, t] = acc
        out += float(g[i]) * expert
    return out.astype(xd.dtype)


def l1_gate_penalty(gates: Sequence[Tensor]) -> Tensor:
    """Sum of all gate values across layers (the L1 norm, since gates >= 0)."""
    total = None
    for g in gates:
        term = ops.sum_all(g)
        total = term if total is None else ops.add(total, term)
    if total is None:
        raise ShapeError("l1_gate_penalty: no gate vectors given")
    return total


def write_gate_trace(path: str, gates_per_layer: List[np.ndarray]) -> None:
    """CSV dump of nonzero gate values: example_id, layer, channel, gate_value."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["example_id", "layer", "channel", "gate_value"])
        for layer, g in enumerate(gates_per_layer):
            rows, cols = np.nonzero(g)
            for r, c in zip(rows, cols):
                writer.writerow([int(r), layer, int(c), repr(float(g[r, c]))])
    os.replace(tmp, path)
