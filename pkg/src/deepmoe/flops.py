"""Static and per-example dynamic multiply-accumulate accounting.

Counting convention (stated in every report): only conv and linear layers
count; one output MAC costs k^2 * C_in per spatial position for convs and
d_in per output unit for linears; 1 MAC = 2 FLOPs. Biases, ReLU, batch norm
and pooling are excluded.

Dynamic counts per example: a gated layer reads only its active input
channels (gate > 0), and a gated conv whose output feeds exclusively through
the next gate also skips producing output channels that gate turns off —
gate decisions are known before the layer runs, so a producer need not
compute channels every consumer will zero. Ungated layers, the embedding
network and the gate heads always count at full static cost.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ConfigError
from .models import ConvMeta, DeepMoE, ModelConfig, ResnetPlan, VggPlan, _plan_resnet, _plan_vgg

FLOPS_PER_MAC = 2


@dataclass
class FlopsRow:
    name: str
    section: str  # base | embedding | gate-head
    kind: str  # conv | linear
    c_in: int
    c_out: int
    unit: int  # MACs per (input-channel, output-channel) pair
    in_gate: Optional[int] = None
    out_gate: Optional[int] = None  # only set when output skipping is sound

    @property
    def macs_static(self) -> int:
        return self.unit * self.c_in * self.c_out

    @property
    def gated(self) -> bool:
        return self.in_gate is not None


@dataclass
class ReportRow:
    name: str
    section: str
    kind: str
    gated: bool
    macs_static: int
    macs_dynamic: float

    @property
    def flops_static(self) -> int:
        return FLOPS_PER_MAC * self.macs_static

    @property
    def flops_dynamic(self) -> float:
        return FLOPS_PER_MAC * self.macs_dynamic


@dataclass
class FlopsReport:
    rows: List[ReportRow]
    reference_static_macs: int
    reference_label: str
    flops_per_mac: int = FLOPS_PER_MAC

    @property
    def static_macs(self) -> int:
        return sum(r.macs_static for r in self.rows)

    @property
    def dynamic_macs(self) -> float:
        return sum(r.macs_dynamic for r in self.rows)

    @property
    def static_flops(self) -> int:
        return FLOPS_PER_MAC * self.static_macs

    @property
    def dynamic_flops(self) -> float:
        return FLOPS_PER_MAC * self.dynamic_macs

    @property
    def reduction_percent(self) -> float:
        return reduction_percent(self.dynamic_macs, self.reference_static_macs)

    def section_static(self, section: str) -> int:
        return sum(r.macs_static for r in self.rows if r.section == section)

    def section_dynamic(self, section: str) -> float:
        return sum(r.macs_dynamic for r in self.rows if r.section == section)

    def to_csv(self, path: str) -> None:
        tmp = f"{path}.tmp"
        with open(tmp, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["layer", "section", "kind", "gated",
                        "macs_static", "macs_dynamic", "flops_static", "flops_dynamic"])
            for r in self.rows:
                w.writerow([r.name, r.section, r.kind, int(r.gated),
                            r.macs_static, repr(r.macs_dynamic),
                            r.flops_static, repr(r.flops_dynamic)])
        os.replace(tmp, path)

    def summary(self) -> Dict:
        return {
            "convention": f"1 MAC = {self.flops_per_mac} FLOPs; conv and linear layers only",
            "static_macs": int(self.static_macs),
            "dynamic_macs": float(self.dynamic_macs),
            "static_flops": int(self.static_flops),
            "dynamic_flops": float(self.dynamic_flops),
            "reference_label": self.reference_label,
            "reference_static_macs": int(self.reference_static_macs),
            "reduction_percent": float(self.reduction_percent),
            "sections": {
                s: {"static_macs": int(self.section_static(s)),
                    "dynamic_macs": float(self.section_dynamic(s))}
                for s in ("base", "embedding", "gate-head")
            },
        }

    def to_json(self, path: str) -> None:
        tmp = f"{path}.tmp"
        with open(tmp, "w") as f:
            json.dump(self.summary(), f, indent=2)
        os.replace(tmp, path)


def reduction_percent(dynamic_total: float, reference_static_total: float) -> float:
    """100 * (1 - dynamic / reference)."""
    if reference_static_total <= 0:
        raise ConfigError("reference static total must be positive")
    return 100.0 * (1.0 - dynamic_total / reference_static_total)


def _embedding_rows(cfg: ModelConfig) -> List[FlopsRow]:
    rows = []
    emb = cfg.embedding
    hw = cfg.input_hw
    c_prev = emb.in_channels
    for i, c in enumerate(emb.channels):
        hw = (hw - 1) // 2 + 1  # 3x3, stride 2, pad 1
        rows.append(FlopsRow(f"embed.conv{i}", "embedding", "conv",
                             c_prev, c, 9 * hw * hw))
        c_prev = c
    rows.append(FlopsRow("embed.proj", "embedding", "linear", c_prev, emb.embed_dim, 1))
    rows.append(FlopsRow("embed.aux", "embedding", "linear",
                         emb.embed_dim, emb.num_classes, 1))
    return rows


def _conv_row(meta: ConvMeta) -> FlopsRow:
    out_gate = meta.out_gate if (meta.in_gate is not None and meta.out_gate_exclusive) else None
    return FlopsRow(meta.name, "base", "conv", meta.c_in, meta.c_out,
                    meta.k * meta.k * meta.h_out * meta.w_out,
                    in_gate=meta.in_gate, out_gate=out_gate)


def model_rows(cfg: ModelConfig) -> List[FlopsRow]:
    """One accounting row per conv/linear layer of the whole model."""
    plan = _plan_vgg(cfg) if cfg.backbone == "vgg" else _plan_resnet(cfg)
    rows: List[FlopsRow] = []
    if isinstance(plan, VggPlan):
        rows.extend(_conv_row(m) for m in plan.convs)
    else:
        rows.append(_conv_row(plan.stem))
        for block in plan.blocks:
            rows.extend(_conv_row(m) for m in block.convs)
            if block.shortcut is not None:
                rows.append(_conv_row(block.shortcut))
    cls = plan.classifier
    rows.append(FlopsRow(cls.name, "base", "linear", cls.d_in, cls.d_out, 1,
                         in_gate=cls.in_gate))
    rows.extend(_embedding_rows(cfg))
    for head in plan.heads:
        rows.append(FlopsRow(head.name, "gate-head", "linear",
                             cfg.embedding.embed_dim, head.width, 1))
    return rows


def static_flops(cfg: ModelConfig) -> FlopsReport:
    """Static report: every layer at full cost (dynamic column == static)."""
    rows = [
        ReportRow(r.name, r.section, r.kind, r.gated,
                  r.macs_static, float(r.macs_static))
        for r in model_rows(cfg)
    ]
    total = sum(r.macs_static for r in rows)
    return FlopsReport(rows, total, "self-static")


def report_from_gates(
    cfg: ModelConfig,
    head_gates: Sequence[np.ndarray],
    reference_static_macs: Optional[int] = None,
    reference_label: str = "self-static",
) -> FlopsReport:
    """Dynamic report from gate values [N, width] per head (pure function)."""
    rows = model_rows(cfg)
    counts = [np.count_nonzero(g, axis=1).astype(np.int64) for g in head_gates]
    out_rows: List[ReportRow] = []
    for r in rows:
        if r.in_gate is None:
            dyn = float(r.macs_static)
        else:
            in_act = counts[r.in_gate]
            out_act = counts[r.out_gate] if r.out_gate is not None else r.c_out
            dyn = float(np.mean(r.unit * in_act * out_act))
        out_rows.append(ReportRow(r.name, r.section, r.kind, r.gated,
                                  r.macs_static, dyn))
    if reference_static_macs is None:
        reference_static_macs = sum(r.macs_static for r in out_rows)
    return FlopsReport(out_rows, reference_static_macs, reference_label)


def dynamic_flops(
    model: DeepMoE,
    images: np.ndarray,
    batch_size: int = 128,
    reference_static_macs: Optional[int] = None,
    reference_label: str = "self-static",
) -> FlopsReport:
    """Measure mean per-example dynamic cost over a dataset via the sparse path."""
    gates: List[List[np.ndarray]] = [[] for _ in model.heads]
    for start in range(0, images.shape[0], batch_size):
        out = model.forward_sparse(images[start : start + batch_size])
        for i, g in enumerate(out.gates):
            gates[i].append(g)
    stacked = [np.concatenate(g, axis=0) for g in gates]
    return report_from_gates(model.cfg, stacked, reference_static_macs, reference_label)
