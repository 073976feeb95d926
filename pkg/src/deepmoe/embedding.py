"""Shallow embedding network.

A stack of 3x3 stride-2 conv + ReLU layers over the raw image, global average
pooling, and a linear projection to the embedding vector e that every gate
head shares. A single linear auxiliary classifier over e provides the
embedding classification loss that keeps e predictive of the label (and so
keeps expert utilization balanced).

Convs here carry biases and no batch norm, so the whole net is a pure
function of (params, image).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .tensor import Tensor, kaiming_conv, kaiming_linear, parameter


@dataclass
class EmbeddingConfig:
    channels: tuple = (32, 64, 128, 128)  # one entry per stride-2 layer
    embed_dim: int = 64
    num_classes: int = 10
    in_channels: int = 3
    softmax_embedding: bool = False  # optional squash of e before the gate heads

    def __post_init__(self):
        if len(self.channels) < 1:
            raise ConfigError("embedding needs at least one conv layer")
        if any(c < 1 for c in self.channels):
            raise ConfigError(f"channel counts must be >= 1, got {self.channels}")
        if self.embed_dim < 1:
            raise ConfigError(f"embed_dim must be >= 1, got {self.embed_dim}")

    @property
    def num_layers(self) -> int:
        return len(self.channels)


def build_embedding_net(
    cfg: EmbeddingConfig, seed: int, dtype=np.float32
) -> Dict[str, Tensor]:
    """Deterministically initialized parameters, names prefixed ``embed.``."""
    rng = np.random.default_rng(seed)
    params: Dict[str, Tensor] = {}
    c_prev = cfg.in_channels
    for i, c in enumerate(cfg.channels):
        params[f"embed.conv{i}.weight"] = parameter(kaiming_conv(rng, c_prev, 3, c, dtype))
        params[f"embed.conv{i}.bias"] = parameter(np.zeros(c, dtype=dtype))
        c_prev = c
    params["embed.proj.weight"] = parameter(kaiming_linear(rng, c_prev, cfg.embed_dim, dtype))
    params["embed.proj.bias"] = parameter(np.zeros(cfg.embed_dim, dtype=dtype))
    params["embed.aux.weight"] = parameter(
        kaiming_linear(rng, cfg.embed_dim, cfg.num_classes, dtype)
    )
    params["embed.aux.bias"] = parameter(np.zeros(cfg.num_classes, dtype=dtype))
    return params


def embed_forward(cfg: EmbeddingConfig, params: Dict[str, Tensor], image: Tensor) -> Tensor:
    """Map images [B,C,H,W] to embeddings [B, embed_dim]."""
    h, w = image.data.shape[2], image.data.shape[3]
    if h < 2 ** cfg.num_layers or w < 2 ** cfg.num_layers:
        raise ShapeError(
            f"image {h}x{w} too small for {cfg.num_layers} stride-2 layers"
        )
    x = image
    for i in range(cfg.num_layers):
        x = ops.conv2d(x, params[f"embed.conv{i}.weight"], stride=2, padding=1)
        bias = params[f"embed.conv{i}.bias"]
        x = ops.add(x, ops.reshape(bias, (1, bias.data.shape[0], 1, 1)))
        x = ops.relu(x)
    pooled = ops.global_avg_pool(x)
    e = ops.linear(pooled, params["embed.proj.weight"], params["embed.proj.bias"])
    if cfg.softmax_embedding:
        e = _softmax_rows(e)
    return e


def _softmax_rows(x: Tensor) -> Tensor:
    # Differentiable row softmax built from existing primitives is not needed
    # elsewhere; implement directly.
    from .tensor import accumulate_grad, active_tape

    y = ops.softmax(x.data)
    out = Tensor._wrap(y)
    tape = active_tape()
    if tape is not None:
        def _backward():
            g = out.grad
            if g is None:
                return
            dot = (g * y).sum(axis=1, keepdims=True)
            accumulate_grad(x, y * (g - dot))
        tape.record(_backward)
    return out


def aux_classify(e: Tensor, params: Dict[str, Tensor]) -> Tensor:
    """Linear head over the embedding; feeds the embedding cross-entropy loss."""
    return ops.linear(e, params["embed.aux.weight"], params["embed.aux.bias"])


def embedding_param_count(cfg: EmbeddingConfig) -> int:
    """Closed-form parameter count: sum(9*c_in*c_out + c_out) + head terms."""
    total = 0
    c_prev = cfg.in_channels
    for c in cfg.channels:
        total += 9 * c_prev * c + c
        c_prev = c
    total += c_prev * cfg.embed_dim + cfg.embed_dim
    total += cfg.embed_dim * cfg.num_classes + cfg.num_classes
    return total


def write_embedding_dump(path: str, embeddings: np.ndarray, labels: np.ndarray) -> None:
    """CSV dump: example_id, class, e[0..embed_dim)."""
    import csv
    import os

    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f)
        dim = embeddings.shape[1]
        writer.writerow(["example_id", "class"] + [f"e{j}" for j in range(dim)])
        for i in range(embeddings.shape[0]):
            writer.writerow(
                [i, int(labels[i])] + [repr(float(v)) for v in embeddings[i]]
            )
    os.replace(tmp, path)
