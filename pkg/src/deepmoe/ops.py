"""Differentiable operations over :class:`~deepmoe.tensor.Tensor`.

Each op computes its forward result eagerly and, when a tape is active,
records one backward closure. Convolution is cross-correlation (no kernel
flip): for kernel K of layout [C_in, k, k, C_out],

    z[o, s, t] = sum_{i, u, v} K[i, u, v, o] * x[i, s*stride + u, t*stride + v]

over the zero-padded input. The fast path lowers to im2col + matmul; the
naive direct-summation form lives in :mod:`deepmoe.moe` as the test oracle.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import kernels
from .errors import NumericError, ShapeError
from .tensor import Tensor, accumulate_grad, active_tape


def _check_finite(arr: np.ndarray, op_name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op_name} produced non-finite values")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape`, inverting numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(x: Tensor, y: Tensor) -> Tensor:
    out = Tensor._wrap(x.data + y.data)
    tape = active_tape()
    if tape is not None:
        def _backward():
            g = out.grad
            if g is None:
                return
            accumulate_grad(x, _unbroadcast(g, x.data.shape))
            accumulate_grad(y, _unbroadcast(g, y.data.shape))
        tape.record(_backward)
    return out


def mul(x: Tensor, y: Tensor) -> Tensor:
    out = Tensor._wrap(x.data * y.data)
    tape = active_tape()
    if tape is not None:
        def _backward():
            g = out.grad
            if g is None:
                return
            accumulate_grad(x, _unbroadcast(g * y.data, x.data.shape))
            accumulate_grad(y, _unbroadcast(g * x.data, y.data.shape))
        tape.record(_backward)
    return out


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar (not differentiated w.r.t. c)."""
    c = x.data.dtype.type(c)
    out = Tensor._wrap(x.data * c)
    tape = active_tape()
    if tape is not None:
        def _backward():
            if out.grad is not None:
                accumulate_grad(x, out.grad * c)
        tape.record(_backward)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor._wrap(x.data.reshape(shape))
    tape = active_tape()
    if tape is not None:
        def _backward():
            if out.grad is not None:
                accumulate_grad(x, out.grad.reshape(x.data.shape))
        tape.record(_backward)
    return out


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); subgradient at exactly 0 is fixed to 0."""
    out = Tensor._wrap(np.maximum(x.data, 0))
    tape = active_tape()
    if tape is not None:
        mask = x.data > 0
        def _backward():
            if out.grad is not None:
                accumulate_grad(x, out.grad * mask)
        tape.record(_backward)
    return out


def sum_all(x: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    out = Tensor._wrap(np.asarray(x.data.sum(), dtype=x.data.dtype))
    tape = active_tape()
    if tape is not None:
        def _backward():
            if out.grad is not None:
                accumulate_grad(x, np.broadcast_to(out.grad, x.data.shape))
        tape.record(_backward)
    return out


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map x @ weight (+ bias) for x of shape [d] or [B, d]."""
    xd = x.data
    squeeze = xd.ndim == 1
    if squeeze:
        xd = xd[None, :]
    if xd.ndim != 2 or weight.data.ndim != 2 or xd.shape[1] != weight.data.shape[0]:
        raise ShapeError(
            f"linear: x {x.data.shape} incompatible with weight {weight.data.shape}"
        )
    if bias is not None and bias.data.shape != (weight.data.shape[1],):
        raise ShapeError(
            f"linear: bias {bias.data.shape} incompatible with weight {weight.data.shape}"
        )
    y = xd @ weight.data
    if bias is not None:
        y = y + bias.data
    out = Tensor._wrap(y[0] if squeeze else y)
    tape = active_tape()
    if tape is not None:
        def _backward():
            g = out.grad
            if g is None:
                return
            g2 = g[None, :] if squeeze else g
            accumulate_grad(weight, xd.T @ g2)
            if bias is not None:
                accumulate_grad(bias, g2.sum(axis=0))
            gx = g2 @ weight.data.T
            accumulate_grad(x, gx[0] if squeeze else gx)
        tape.record(_backward)
    return out


# --- convolution ----------------------------------------------------------

def conv_out_hw(h: int, w: int, k: int, stride: int, padding: int) -> tuple:
    return (h + 2 * padding - k) // stride + 1, (w + 2 * padding - k) // stride + 1


def _conv_forward_raw(xd: np.ndarray, kd: np.ndarray, stride: int, padding: int):
    """Unrecorded conv on raw arrays; returns (out, cols, padded shape)."""
    b, c_in, h, w = xd.shape
    k = kd.shape[1]
    h_out, w_out = conv_out_hw(h, w, k, stride, padding)
    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xd
    cols = kernels.im2col(xp, k, stride, h_out, w_out)
    kmat = kd.reshape(c_in * k * k, kd.shape[3])
    out = np.matmul(kmat.T, cols)  # [B, C_out, h_out*w_out]
    return out.reshape(b, kd.shape[3], h_out, w_out), cols, xp.shape


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of x [C,H,W] or [B,C,H,W] with kernel [C_in,k,k,C_out]."""
    if kernel.data.ndim != 4 or kernel.data.shape[1] != kernel.data.shape[2]:
        raise ShapeError(f"conv2d: kernel must be [C_in,k,k,C_out], got {kernel.data.shape}")
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d: input must be [C,H,W] or [B,C,H,W], got {x.data.shape}")
    c_in, k = kernel.data.shape[0], kernel.data.shape[1]
    b, cx, h, w = xd.shape
    if cx != c_in:
        raise ShapeError(f"conv2d: input has {cx} channels but kernel expects {c_in}")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError(
            f"conv2d: kernel size {k} exceeds padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")

    y, cols, xp_shape = _conv_forward_raw(xd, kernel.data, stride, padding)
    _check_finite(y, "conv2d")
    out = Tensor._wrap(y[0] if single else y)

    tape = active_tape()
    if tape is not None:
        c_out = kernel.data.shape[3]
        h_out, w_out = y.shape[2], y.shape[3]

        def _backward():
            g = out.grad
            if g is None:
                return
            g3 = (g[None] if single else g).reshape(b, c_out, h_out * w_out)
            # dK = sum_b cols_b @ g_b^T, reshaped to [C_in,k,k,C_out]
            dk = np.matmul(cols, g3.transpose(0, 2, 1)).sum(axis=0)
            accumulate_grad(kernel, dk.reshape(kernel.data.shape))
            kmat = kernel.data.reshape(c_in * k * k, c_out)
            dcols = np.matmul(kmat, g3)
            dxp = kernels.col2im(
                dcols, c_in, k, stride, xp_shape[2], xp_shape[3], h_out, w_out
            )
            dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
            accumulate_grad(x, dx[0] if single else dx)

        tape.record(_backward)
    return out


# --- pooling --------------------------------------------------------------

def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pool with stride 2; spatial dims must be even.

    Gradient routes to the first maximum of each window (deterministic on
    ties).
    """
    b, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d: spatial dims must be even, got {h}x{w}")
    windows = (
        x.data.reshape(b, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, h // 2, w // 2, 4)
    )
    idx = windows.argmax(axis=-1)
    out = Tensor._wrap(np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0])
    tape = active_tape()
    if tape is not None:
        def _backward():
            g = out.grad
            if g is None:
                return
            dwin = np.zeros_like(windows)
            np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
            dx = (
                dwin.reshape(b, c, h // 2, w // 2, 2, 2)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(b, c, h, w)
            )
            accumulate_grad(x, dx)
        tape.record(_backward)
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over spatial dims: [B,C,H,W] -> [B,C]."""
    b, c, h, w = x.data.shape
    out = Tensor._wrap(x.data.mean(axis=(2, 3)))
    tape = active_tape()
    if tape is not None:
        inv = 1.0 / (h * w)
        def _backward():
            g = out.grad
            if g is None:
                return
            accumulate_grad(
                x, np.broadcast_to((g * inv)[:, :, None, None], x.data.shape)
            )
        tape.record(_backward)
    return out


# --- batch normalization ---------------------------------------------------

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
) -> Tensor:
    """Per-channel batch norm over [B,C,H,W].

    Training mode normalizes with batch statistics (biased variance) and
    updates the running buffers in place as a side effect; eval mode uses the
    frozen running statistics so inference stays a pure per-example function.
    """
    xd = x.data
    if training:
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1.0 - BN_MOMENTUM
        running_mean += BN_MOMENTUM * mean
        running_var *= 1.0 - BN_MOMENTUM
        running_var += BN_MOMENTUM * var
    else:
        mean = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (xd - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = Tensor._wrap(
        xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    )
    tape = active_tape()
    if tape is not None:
        n = xd.shape[0] * xd.shape[2] * xd.shape[3]

        def _backward():
            g = out.grad
            if g is None:
                return
            accumulate_grad(beta, g.sum(axis=(0, 2, 3)))
            accumulate_grad(gamma, (g * xhat).sum(axis=(0, 2, 3)))
            gxhat = g * gamma.data[None, :, None, None]
            if training:
                s1 = gxhat.sum(axis=(0, 2, 3))
                s2 = (gxhat * xhat).sum(axis=(0, 2, 3))
                dx = (
                    gxhat
                    - (s1 / n)[None, :, None, None]
                    - xhat * (s2 / n)[None, :, None, None]
                ) * inv_std[None, :, None, None]
            else:
                dx = gxhat * inv_std[None, :, None, None]
            accumulate_grad(x, dx)

        tape.record(_backward)
    return out


# --- loss -----------------------------------------------------------------

def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log softmax, stabilized by max subtraction."""
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    ld = logits.data
    if ld.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be [B,C], got {ld.shape}")
    labels = np.asarray(labels)
    b, c = ld.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0,{c}), got range "
                         f"[{labels.min()},{labels.max()}]")
    logp = log_softmax(ld)
    _check_finite(logp, "softmax_cross_entropy")
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()
    out = Tensor._wrap(np.asarray(loss, dtype=ld.dtype))
    tape = active_tape()
    if tape is not None:
        def _backward():
            g = out.grad
            if g is None:
                return
            d = np.exp(logp)
            d[rows, labels] -= 1.0
            accumulate_grad(logits, d * (g / b))
        tape.record(_backward)
    return out
