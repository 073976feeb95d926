"""Model assembly: gated VGG-style and residual backbones plus presets.

A built model is three parameter groups wired together:

* ``base.*``   — the convolutional backbone and its classifier,
* ``embed.*``  — the shallow embedding network producing e,
* ``gate.*``   — one linear+ReLU head per gated interface, all reading e.

Gate placement follows "one gating header after each gated conv": the head
attached after conv l produces the weights that scale the INPUT channels of
whatever consumes conv l's output (the next conv, or the classifier for the
last one). The first conv's input is the raw image and is never gated.

Residual blocks gate only branch-internal interfaces so the skip addition
shape never changes:

    out = relu(bn2(conv2(g2 * relu(bn1(conv1(g1 * x)))))) + shortcut(x)

Bottleneck variant A gates both inner interfaces (3x3 input and final 1x1
input); variant B gates only the 3x3 input. Widening touches branch-internal
channels only. All gate positions are config fields, not hard-coded.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from . import ops
from .embedding import (
    EmbeddingConfig,
    aux_classify,
    build_embedding_net,
    embed_forward,
)
from .errors import ConfigError, ShapeError
from .moe import GateHead, gate_forward, gated_conv_sparse
from .tensor import Tensor, kaiming_conv, kaiming_linear, parameter

VGG16_CHANNELS = [64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512]
VGG16_POOL_AFTER = [2, 4, 7, 10, 13]

# Channel counts per widening strategy for the 13-conv feed-forward backbone.
WIDENING_PRESETS = {
    "W1-High": [64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 1536, 512, 512],
    "W1-Mid": [64, 64, 128, 128, 2990, 256, 256, 512, 512, 512, 512, 512, 512],
    "W4-Low": [512, 512, 615, 615, 256, 256, 256, 512, 512, 512, 512, 512, 512],
    "W13-All": [128, 128, 256, 256, 405, 405, 405, 615, 615, 615, 615, 615, 615],
}
# Which convs each strategy widens (0-based); gates go on their consumers.
_WIDENED_CONVS = {
    "W1-High": [10],
    "W1-Mid": [4],
    "W4-Low": [0, 1, 2, 3],
    "W13-All": list(range(13)),
}

BACKBONES = ("vgg", "resnet-basic", "resnet-bottleneck-a", "resnet-bottleneck-b")


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def widen_channels(
    counts: Sequence[int],
    factor: Union[float, Sequence[float], None] = None,
    preset: Optional[str] = None,
) -> List[int]:
    """Scale per-layer channel counts, or substitute a named preset.

    Scaled counts round half up and never drop below the original.
    """
    if preset is not None:
        if preset not in WIDENING_PRESETS:
            raise ConfigError(f"unknown widening preset {preset!r}")
        return list(WIDENING_PRESETS[preset])
    if factor is None:
        return list(counts)
    factors = [factor] * len(counts) if np.isscalar(factor) else list(factor)
    if len(factors) != len(counts):
        raise ConfigError("one widen factor per layer required")
    if any(f < 1 for f in factors):
        raise ConfigError("widen factors must be >= 1")
    return [max(c, round_half_up(c * f)) for c, f in zip(counts, factors)]


# --- configuration ----------------------------------------------------------

@dataclass
class ModelConfig:
    backbone: str
    channels: List[int]  # vgg: per-conv widths; resnet: per-stage widths
    num_classes: int = 10
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    input_hw: int = 32
    in_channels: int = 3
    norm: str = "batchnorm"  # "batchnorm" | "none"
    # vgg-only
    gated: Optional[List[bool]] = None  # per conv: is this conv's INPUT gated
    gate_classifier: bool = True
    pool_after: Optional[List[int]] = None  # 1-based conv positions
    # resnet-only
    blocks_per_stage: Optional[List[int]] = None
    internal_widen: float = 1.0
    bottleneck_reduce: int = 4
    gate_positions: Optional[List[bool]] = None  # per conv inside a block

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.norm not in ("batchnorm", "none"):
            raise ConfigError(f"unknown norm {self.norm!r}")
        if any(c < 1 for c in self.channels):
            raise ConfigError("channel counts must be positive")
        if self.backbone == "vgg":
            if self.gated is None:
                self.gated = [False] + [True] * (len(self.channels) - 1)
            if len(self.gated) != len(self.channels):
                raise ConfigError("gated flags must match conv count")
            if self.gated[0]:
                raise ConfigError("the first conv reads the raw image; it cannot be gated")
            if self.pool_after is None:
                self.pool_after = list(VGG16_POOL_AFTER)
        else:
            if self.blocks_per_stage is None:
                self.blocks_per_stage = [1] * len(self.channels)
            if len(self.blocks_per_stage) != len(self.channels):
                raise ConfigError("blocks_per_stage must match stage count")
            n_conv = 2 if self.backbone == "resnet-basic" else 3
            if self.gate_positions is None:
                self.gate_positions = {
                    "resnet-basic": [True, True],
                    "resnet-bottleneck-a": [False, True, True],
                    "resnet-bottleneck-b": [False, True, False],
                }[self.backbone]
            if len(self.gate_positions) != n_conv:
                raise ConfigError(
                    f"gate_positions needs {n_conv} flags for {self.backbone}"
                )

    def to_json(self) -> str:
        d = asdict(self)
        d["embedding"]["channels"] = list(self.embedding.channels)
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        d = json.loads(text)
        emb = d.pop("embedding")
        emb["channels"] = tuple(emb["channels"])
        return cls(embedding=EmbeddingConfig(**emb), **d)


# --- execution plans --------------------------------------------------------

@dataclass
class ConvMeta:
    name: str
    c_in: int
    c_out: int
    k: int
    stride: int
    padding: int
    h_out: int
    w_out: int
    in_gate: Optional[int] = None   # head whose gates scale this conv's input
    out_gate: Optional[int] = None  # head gating this conv's output downstream
    out_gate_exclusive: bool = False  # every consumer sees the gated value


@dataclass
class LinearMeta:
    name: str
    d_in: int
    d_out: int
    in_gate: Optional[int] = None


@dataclass
class HeadMeta:
    index: int
    name: str
    width: int


@dataclass
class VggPlan:
    convs: List[ConvMeta]
    pool_after: List[int]
    classifier: LinearMeta
    heads: List[HeadMeta]


@dataclass
class BlockPlan:
    name: str
    convs: List[ConvMeta]
    gate_idx: List[Optional[int]]  # head index per conv input (None = ungated)
    shortcut: Optional[ConvMeta]


@dataclass
class ResnetPlan:
    stem: ConvMeta
    blocks: List[BlockPlan]
    classifier: LinearMeta
    heads: List[HeadMeta]


def _plan_vgg(cfg: ModelConfig) -> VggPlan:
    heads: List[HeadMeta] = []
    convs: List[ConvMeta] = []
    gate_of_conv: Dict[int, int] = {}
    for l, is_gated in enumerate(cfg.gated):
        if is_gated:
            gate_of_conv[l] = len(heads)
            heads.append(HeadMeta(len(heads), f"gate.h{len(heads):02d}", cfg.channels[l - 1]))
    cls_gate = None
    if cfg.gate_classifier:
        cls_gate = len(heads)
        heads.append(HeadMeta(cls_gate, f"gate.h{cls_gate:02d}", cfg.channels[-1]))

    hw = cfg.input_hw
    c_prev = cfg.in_channels
    n = len(cfg.channels)
    for l, c in enumerate(cfg.channels):
        out_gate = gate_of_conv.get(l + 1) if l + 1 < n else cls_gate
        convs.append(
            ConvMeta(
                name=f"base.conv{l + 1:02d}",
                c_in=c_prev,
                c_out=c,
                k=3,
                stride=1,
                padding=1,
                h_out=hw,
                w_out=hw,
                in_gate=gate_of_conv.get(l),
                out_gate=out_gate,
                out_gate_exclusive=out_gate is not None,
            )
        )
        if (l + 1) in cfg.pool_after:
            hw //= 2
        c_prev = c
    classifier = LinearMeta("base.fc", cfg.channels[-1], cfg.num_classes, in_gate=cls_gate)
    return VggPlan(convs, list(cfg.pool_after), classifier, heads)


def _plan_resnet(cfg: ModelConfig) -> ResnetPlan:
    heads: List[HeadMeta] = []
    blocks: List[BlockPlan] = []

    def new_head(width: int) -> int:
        idx = len(heads)
        heads.append(HeadMeta(idx, f"gate.h{idx:02d}", width))
        return idx

    hw = cfg.input_hw
    stem = ConvMeta("base.stem", cfg.in_channels, cfg.channels[0], 3, 1, 1, hw, hw)
    c_prev = cfg.channels[0]
    basic = cfg.backbone == "resnet-basic"
    for si, (width, n_blocks) in enumerate(zip(cfg.channels, cfg.blocks_per_stage)):
        for bi in range(n_blocks):
            stride = 2 if (si > 0 and bi == 0) else 1
            hw_out = hw // stride
            name = f"base.s{si + 1}b{bi + 1}"
            if basic:
                m = round_half_up(width * cfg.internal_widen)
                widths = [(c_prev, m, 3, stride, 1), (m, width, 3, 1, 1)]
            else:
                m = max(1, round_half_up(width * cfg.internal_widen / cfg.bottleneck_reduce))
                widths = [
                    (c_prev, m, 1, 1, 0),
                    (m, m, 3, stride, 1),
                    (m, width, 1, 1, 0),
                ]
            gate_idx = [
                new_head(w_in) if gated else None
                for gated, (w_in, *_rest) in zip(cfg.gate_positions, widths)
            ]
            convs = []
            cur = hw
            for ci, (w_in, w_out, k, s, p) in enumerate(widths):
                cur //= s
                nxt = gate_idx[ci + 1] if ci + 1 < len(widths) else None
                convs.append(
                    ConvMeta(
                        name=f"{name}.conv{ci + 1}",
                        c_in=w_in,
                        c_out=w_out,
                        k=k,
                        stride=s,
                        padding=p,
                        h_out=cur,
                        w_out=cur,
                        in_gate=gate_idx[ci],
                        out_gate=nxt,
                        out_gate_exclusive=nxt is not None,
                    )
                )
            shortcut = None
            if stride != 1 or c_prev != width:
                shortcut = ConvMeta(
                    f"{name}.shortcut", c_prev, width, 1, stride, 0, hw_out, hw_out
                )
            blocks.append(BlockPlan(name, convs, gate_idx, shortcut))
            c_prev = width
            hw = hw_out
    classifier = LinearMeta("base.fc", cfg.channels[-1], cfg.num_classes)
    return ResnetPlan(stem, blocks, classifier, heads)


# --- build ------------------------------------------------------------------

@dataclass
class ForwardOut:
    logits: Tensor
    aux_logits: Tensor
    gates: List[Tensor]
    embedding: Tensor


@dataclass
class SparseOut:
    logits: np.ndarray
    aux_logits: np.ndarray
    gates: List[np.ndarray]
    active_counts: Dict[str, np.ndarray]  # per gated conv/linear name, [B]
    embedding: np.ndarray


class DeepMoE:
    """A built model: config, execution plan, parameters, and BN buffers."""

    def __init__(self, cfg: ModelConfig, params: Dict[str, Tensor],
                 buffers: Dict[str, np.ndarray], dtype):
        self.cfg = cfg
        self.params = params
        self.buffers = buffers
        self.dtype = dtype
        self.plan = _plan_vgg(cfg) if cfg.backbone == "vgg" else _plan_resnet(cfg)

    # -- bookkeeping --------------------------------------------------------

    @property
    def heads(self) -> List[HeadMeta]:
        return self.plan.heads

    def gate_head(self, idx: int) -> GateHead:
        return GateHead(self.params[f"gate.h{idx:02d}.weight"])

    def state(self) -> Dict[str, np.ndarray]:
        out = {n: p.data for n, p in self.params.items()}
        out.update(self.buffers)
        return out

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in state:
                raise KeyError(f"checkpoint is missing {name}")
            if tuple(state[name].shape) != tuple(p.data.shape):
                raise ShapeError(
                    f"{name}: checkpoint shape {state[name].shape} != {p.data.shape}"
                )
            p.data = state[name].astype(self.dtype)
        for name in self.buffers:
            if name in state:
                self.buffers[name] = state[name].astype(self.dtype)

    def param_count(self, prefix: str = "") -> int:
        return sum(p.data.size for n, p in self.params.items() if n.startswith(prefix))

    # -- gating helpers ------------------------------------------------------

    def _as_tensor_batch(self, images) -> Tensor:
        arr = np.asarray(images, dtype=self.dtype)
        if arr.ndim != 4:
            raise ShapeError(f"images must be [B,C,H,W], got {arr.shape}")
        return Tensor._wrap(arr)

    def compute_gates(self, images, training: bool = False):
        """Embedding and per-head gate tensors for a batch."""
        x = self._as_tensor_batch(images)
        e = embed_forward(self.cfg.embedding, self.params, x)
        gates = [gate_forward(self.gate_head(h.index), e) for h in self.heads]
        return e, gates

    @staticmethod
    def _apply_gate(x: Tensor, gate) -> Tensor:
        if gate is None:
            return x
        gt = gate if isinstance(gate, Tensor) else Tensor._wrap(np.asarray(gate))
        if x.data.ndim == 4:
            g4 = ops.reshape(gt, (gt.data.shape[0], gt.data.shape[1], 1, 1))
            return ops.mul(x, g4)
        return ops.mul(x, gt)

    def _post_conv(self, x: Tensor, name: str, training: bool) -> Tensor:
        if self.cfg.norm == "batchnorm":
            x = ops.batchnorm2d(
                x,
                self.params[f"{name}.bn_gamma"],
                self.params[f"{name}.bn_beta"],
                self.buffers[f"{name}.bn_mean"],
                self.buffers[f"{name}.bn_var"],
                training,
            )
        else:
            bias = self.params[f"{name}.bias"]
            x = ops.add(x, ops.reshape(bias, (1, bias.data.shape[0], 1, 1)))
        return x

    # -- dense (training / reference) path -----------------------------------

    def forward(self, images, training: bool = False) -> ForwardOut:
        """Full dense pass: embedding, gates, gated base network."""
        e, gates = self.compute_gates(images, training)
        logits = self._base_forward(self._as_tensor_batch(images), gates, training)
        aux = aux_classify(e, self.params)
        return ForwardOut(logits, aux, gates, e)

    def forward_with_gates(self, images, gates, training: bool = False) -> Tensor:
        """Base-network pass with externally supplied gate vectors.

        ``gates=None`` runs the ungated baseline network (no multiplies at
        all); otherwise one array/Tensor of shape [B, width] per head.
        """
        if gates is not None and len(gates) != len(self.heads):
            raise ShapeError(
                f"expected {len(self.heads)} gate vectors, got {len(gates)}"
            )
        return self._base_forward(self._as_tensor_batch(images), gates, training)

    def _base_forward(self, x: Tensor, gates, training: bool) -> Tensor:
        def gate_of(idx: Optional[int]):
            if idx is None or gates is None:
                return None
            return gates[idx]

        if self.cfg.backbone == "vgg":
            plan: VggPlan = self.plan
            for l, conv in enumerate(plan.convs):
                x = self._apply_gate(x, gate_of(conv.in_gate))
                x = ops.conv2d(x, self.params[f"{conv.name}.weight"],
                               stride=conv.stride, padding=conv.padding)
                x = ops.relu(self._post_conv(x, conv.name, training))
                if (l + 1) in plan.pool_after:
                    x = ops.maxpool2d(x)
            feat = ops.global_avg_pool(x)
            feat = self._apply_gate(feat, gate_of(plan.classifier.in_gate))
            return ops.linear(feat, self.params["base.fc.weight"],
                              self.params["base.fc.bias"])

        plan: ResnetPlan = self.plan
        x = ops.conv2d(x, self.params["base.stem.weight"],
                       stride=1, padding=1)
        x = ops.relu(self._post_conv(x, "base.stem", training))
        for block in plan.blocks:
            idn = x
            h = x
            for conv in block.convs:
                h = self._apply_gate(h, gate_of(conv.in_gate))
                h = ops.conv2d(h, self.params[f"{conv.name}.weight"],
                               stride=conv.stride, padding=conv.padding)
                h = ops.relu(self._post_conv(h, conv.name, training))
            if block.shortcut is not None:
                sc = block.shortcut
                idn = ops.conv2d(idn, self.params[f"{sc.name}.weight"],
                                 stride=sc.stride, padding=sc.padding)
                idn = self._post_conv(idn, sc.name, training)
            x = ops.add(h, idn)
        feat = ops.global_avg_pool(x)
        return ops.linear(feat, self.params["base.fc.weight"],
                          self.params["base.fc.bias"])

    # -- sparse (inference) path ----------------------------------------------

    def forward_sparse(self, images) -> SparseOut:
        """Inference pass that skips zero-gated channels in every gated conv."""
        e, gate_tensors = self.compute_gates(images, training=False)
        gates = [g.data for g in gate_tensors]
        aux = aux_classify(e, self.params).data
        active: Dict[str, np.ndarray] = {}

        def gate_of(idx: Optional[int]):
            return None if idx is None else gates[idx]

        def run_conv(x: Tensor, conv: ConvMeta) -> Tensor:
            g = gate_of(conv.in_gate)
            kernel = self.params[f"{conv.name}.weight"]
            if g is None:
                return ops.conv2d(x, kernel, stride=conv.stride, padding=conv.padding)
            out, counts = gated_conv_sparse(x, kernel, g,
                                            stride=conv.stride, padding=conv.padding)
            active[conv.name] = counts
            return out

        x = self._as_tensor_batch(images)
        if self.cfg.backbone == "vgg":
            plan: VggPlan = self.plan
            for l, conv in enumerate(plan.convs):
                x = run_conv(x, conv)
                x = ops.relu(self._post_conv(x, conv.name, training=False))
                if (l + 1) in plan.pool_after:
                    x = ops.maxpool2d(x)
            feat = ops.global_avg_pool(x)
            cg = gate_of(plan.classifier.in_gate)
            if cg is not None:
                active["base.fc"] = np.count_nonzero(cg, axis=1).astype(np.int64)
                feat = Tensor._wrap(feat.data * cg)
            logits = ops.linear(feat, self.params["base.fc.weight"],
                                self.params["base.fc.bias"])
            return SparseOut(logits.data, aux, gates, active, e.data)

        plan: ResnetPlan = self.plan
        x = ops.conv2d(x, self.params["base.stem.weight"], stride=1, padding=1)
        x = ops.relu(self._post_conv(x, "base.stem", training=False))
        for block in plan.blocks:
            idn = x
            h = x
            for conv in block.convs:
                h = run_conv(h, conv)
                h = ops.relu(self._post_conv(h, conv.name, training=False))
            if block.shortcut is not None:
                sc = block.shortcut
                idn = ops.conv2d(idn, self.params[f"{sc.name}.weight"],
                                 stride=sc.stride, padding=sc.padding)
                idn = self._post_conv(idn, sc.name, training=False)
            x = ops.add(h, idn)
        feat = ops.global_avg_pool(x)
        logits = ops.linear(feat, self.params["base.fc.weight"],
                            self.params["base.fc.bias"])
        return SparseOut(logits.data, aux, gates, active, e.data)


def gated_basic_block_forward(model: DeepMoE, block: BlockPlan, x: Tensor,
                              gates, training: bool = False) -> Tensor:
    """Run one residual block of `model` on x with explicit gate vectors.

    ``gates`` is one array/Tensor per gated conv in the block, in order.
    Exposed for block-level verification; the full forward uses the same code
    path internally.
    """
    it = iter(gates) if gates is not None else None
    h = x
    for conv, gidx in zip(block.convs, block.gate_idx):
        if gidx is not None and it is not None:
            h = model._apply_gate(h, next(it))
        h = ops.conv2d(h, model.params[f"{conv.name}.weight"],
                       stride=conv.stride, padding=conv.padding)
        h = ops.relu(model._post_conv(h, conv.name, training))
    idn = x
    if block.shortcut is not None:
        sc = block.shortcut
        idn = ops.conv2d(idn, model.params[f"{sc.name}.weight"],
                         stride=sc.stride, padding=sc.padding)
        idn = model._post_conv(idn, sc.name, training)
    return ops.add(h, idn)


def build_deepmoe(cfg: ModelConfig, seed: int, dtype=np.float32) -> DeepMoE:
    """Deterministically initialized DeepMoE model for a config and seed."""
    plan = _plan_vgg(cfg) if cfg.backbone == "vgg" else _plan_resnet(cfg)
    rng_base = np.random.default_rng([seed, 0])
    rng_heads = np.random.default_rng([seed, 2])

    params: Dict[str, Tensor] = {}
    buffers: Dict[str, np.ndarray] = {}

    def add_conv(meta: ConvMeta):
        params[f"{meta.name}.weight"] = parameter(
            kaiming_conv(rng_base, meta.c_in, meta.k, meta.c_out, dtype)
        )
        if cfg.norm == "batchnorm":
            params[f"{meta.name}.bn_gamma"] = parameter(np.ones(meta.c_out, dtype=dtype))
            params[f"{meta.name}.bn_beta"] = parameter(np.zeros(meta.c_out, dtype=dtype))
            buffers[f"{meta.name}.bn_mean"] = np.zeros(meta.c_out, dtype=dtype)
            buffers[f"{meta.name}.bn_var"] = np.ones(meta.c_out, dtype=dtype)
        else:
            params[f"{meta.name}.bias"] = parameter(np.zeros(meta.c_out, dtype=dtype))

    if cfg.backbone == "vgg":
        for conv in plan.convs:
            add_conv(conv)
    else:
        add_conv(plan.stem)
        for block in plan.blocks:
            for conv in block.convs:
                add_conv(conv)
            if block.shortcut is not None:
                add_conv(block.shortcut)
    params["base.fc.weight"] = parameter(
        kaiming_linear(rng_base, plan.classifier.d_in, plan.classifier.d_out, dtype)
    )
    params["base.fc.bias"] = parameter(np.zeros(plan.classifier.d_out, dtype=dtype))

    params.update(build_embedding_net(cfg.embedding, seed=_derive_seed(seed, 1), dtype=dtype))

    for head in plan.heads:
        params[head.name + ".weight"] = parameter(
            kaiming_linear(rng_heads, cfg.embedding.embed_dim, head.width, dtype)
        )
    return DeepMoE(cfg, params, buffers, dtype)


def _derive_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


# --- presets ------------------------------------------------------------------

def _cifar_embedding(num_classes: int) -> EmbeddingConfig:
    # ~1-3% of the static cost of the 32x32 backbones shipped here.
    return EmbeddingConfig(channels=(32, 64, 128, 128), embed_dim=64,
                           num_classes=num_classes)


def _toy_embedding(num_classes: int) -> EmbeddingConfig:
    return EmbeddingConfig(channels=(8, 16), embed_dim=16, num_classes=num_classes)


def widening_preset_config(name: str, num_classes: int = 100) -> ModelConfig:
    """Feed-forward backbone with one of the named widening strategies.

    Gates sit on the consumers of every widened conv's output, so a strategy
    that widens all 13 convs carries 13 gate heads (the last one scales the
    classifier input).
    """
    channels = widen_channels(VGG16_CHANNELS, preset=name)
    gated = [False] * 13
    gate_classifier = False
    for l in _WIDENED_CONVS[name]:
        if l + 1 < 13:
            gated[l + 1] = True
        else:
            gate_classifier = True
    return ModelConfig(
        backbone="vgg",
        channels=channels,
        num_classes=num_classes,
        embedding=_cifar_embedding(num_classes),
        gated=gated,
        gate_classifier=gate_classifier,
    )


def _vgg16(num_classes: int, widen: float = 1.0) -> ModelConfig:
    return ModelConfig(
        backbone="vgg",
        channels=widen_channels(VGG16_CHANNELS, widen),
        num_classes=num_classes,
        embedding=_cifar_embedding(num_classes),
    )


def _resnet56(num_classes: int, internal_widen: float = 1.0) -> ModelConfig:
    return ModelConfig(
        backbone="resnet-basic",
        channels=[16, 32, 64],
        blocks_per_stage=[9, 9, 9],
        num_classes=num_classes,
        embedding=_cifar_embedding(num_classes),
        internal_widen=internal_widen,
    )


def _toy_vgg(channels, pool_after, num_classes, gate_classifier=True) -> ModelConfig:
    return ModelConfig(
        backbone="vgg",
        channels=list(channels),
        pool_after=list(pool_after),
        num_classes=num_classes,
        input_hw=16,
        embedding=_toy_embedding(num_classes),
        gate_classifier=gate_classifier,
    )


MODEL_PRESETS = {
    # full CIFAR-scale configurations (buildable and meterable at desk scale;
    # training them is not part of the test suite)
    "vgg16-cifar10": lambda: _vgg16(10),
    "vgg16-cifar100": lambda: _vgg16(100),
    "wide-vgg16-cifar10": lambda: _vgg16(10, widen=2.0),
    "wide-vgg16-cifar100": lambda: _vgg16(100, widen=2.0),
    "w1-high-cifar100": lambda: widening_preset_config("W1-High"),
    "w1-mid-cifar100": lambda: widening_preset_config("W1-Mid"),
    "w4-low-cifar100": lambda: widening_preset_config("W4-Low"),
    "w13-all-cifar100": lambda: widening_preset_config("W13-All"),
    "resnet56-cifar10": lambda: _resnet56(10),
    "resnet56-cifar100": lambda: _resnet56(100),
    "wide-resnet56-cifar10": lambda: _resnet56(10, internal_widen=2.0),
    "wide-resnet56-cifar100": lambda: _resnet56(100, internal_widen=2.0),
    # toy configurations sized for single-core experiments and the test suite
    "toy-vgg": lambda: _toy_vgg([16, 16, 32], [1, 3], num_classes=4),
    "toy-sweep": lambda: _toy_vgg([16, 32, 32], [1, 3], num_classes=8),
    "toy-shuffle": lambda: _toy_vgg([16, 32, 32, 48], [1, 3], num_classes=10),
    "toy-resnet": lambda: ModelConfig(
        backbone="resnet-basic", channels=[8, 16], blocks_per_stage=[1, 1],
        num_classes=4, input_hw=16, embedding=_toy_embedding(4)),
    "toy-bottleneck-a": lambda: ModelConfig(
        backbone="resnet-bottleneck-a", channels=[8, 16], blocks_per_stage=[1, 1],
        num_classes=4, input_hw=16, embedding=_toy_embedding(4),
        bottleneck_reduce=2),
    "toy-bottleneck-b": lambda: ModelConfig(
        backbone="resnet-bottleneck-b", channels=[8, 16], blocks_per_stage=[1, 1],
        num_classes=4, input_hw=16, embedding=_toy_embedding(4),
        bottleneck_reduce=2),
}

# presets at full 32x32 CIFAR scale, used by the embedding-budget checks
CIFAR_PRESET_NAMES = [
    "vgg16-cifar10", "vgg16-cifar100",
    "wide-vgg16-cifar10", "wide-vgg16-cifar100",
    "w1-high-cifar100", "w1-mid-cifar100", "w4-low-cifar100", "w13-all-cifar100",
    "resnet56-cifar10", "resnet56-cifar100",
    "wide-resnet56-cifar10", "wide-resnet56-cifar100",
]


def preset(name: str) -> ModelConfig:
    if name not in MODEL_PRESETS:
        raise ConfigError(
            f"unknown preset {name!r}; available: {', '.join(sorted(MODEL_PRESETS))}"
        )
    return MODEL_PRESETS[name]()


def preset_names() -> List[str]:
    return sorted(MODEL_PRESETS)


def scaled_widening_config(
    name: str, num_classes: int, channel_scale: float, input_hw: int = 16
) -> ModelConfig:
    """Toy-scale analog of a widening strategy: channels scaled down uniformly.

    Keeps the gating pattern of the full preset; channel counts round half up
    with a floor of 4 so relative proportions survive.
    """
    cfg = widening_preset_config(name, num_classes)
    scaled = [max(4, round_half_up(c * channel_scale)) for c in cfg.channels]
    emb = _toy_embedding(num_classes) if input_hw < 32 else cfg.embedding
    return replace(cfg, channels=scaled, input_hw=input_hw, embedding=emb)
