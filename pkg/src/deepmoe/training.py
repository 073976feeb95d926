"""Objective, two-phase training schedule, augmentation, evaluation.

The objective is

    J = L_base + gate_weight * L_gate + aux_weight * L_embed

where L_base and L_embed are softmax cross-entropies (base classifier and
embedding auxiliary classifier) and L_gate is the summed L1 norm of all gate
vectors, averaged over the batch but NOT normalized by channel count — the
documented gate_weight range [0.001, 8] presumes this scale.

Training runs in two phases. Phase 1 jointly optimizes everything on the full
objective. Phase 2 freezes the embedding network and every gate head (they
stay in the forward graph, still producing gates), zeroes both penalty
weights, and fine-tunes the base network alone.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import flops as flops_mod
from . import ops
from .data import Dataset
from .errors import ConfigError, TrainingDiverged
from .models import DeepMoE
from .moe import l1_gate_penalty
from .optim import sgd_momentum_step, trainable_subset
from .tensor import Tape, Tensor, backward, checksum, zero_grads

FROZEN_PREFIXES = ("gate.", "embed.")

METRICS_COLUMNS = [
    "epoch", "phase", "lr", "train_loss", "val_loss", "val_top1",
    "mean_gate_sparsity", "dynamic_flops", "static_flops",
]


@dataclass
class TrainConfig:
    gate_weight: float = 0.1   # sparsity pressure on the gates ("lambda")
    aux_weight: float = 1.0    # embedding classifier weight ("mu")
    lr: float = 0.05
    lr_decay_epochs: Tuple[int, ...] = ()
    lr_decay_factor: float = 0.1
    joint_epochs: int = 10      # phase 1 length
    finetune_epochs: int = 0    # phase 2 length
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    precision: str = "float32"
    augment: bool = False
    shift_max: int = 4

    def __post_init__(self):
        if self.gate_weight < 0 or self.aux_weight < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.joint_epochs < 0 or self.finetune_epochs < 0:
            raise ConfigError("epoch counts must be nonnegative")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"unknown precision {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for d in self.lr_decay_epochs if epoch >= d)
        return self.lr * self.lr_decay_factor ** drops

    def to_json(self) -> str:
        d = asdict(self)
        d["lambda"] = d.pop("gate_weight")
        d["mu"] = d.pop("aux_weight")
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        d = json.loads(text)
        if "lambda" in d:
            d["gate_weight"] = d.pop("lambda")
        if "mu" in d:
            d["aux_weight"] = d.pop("mu")
        if "lr_decay_epochs" in d:
            d["lr_decay_epochs"] = tuple(d["lr_decay_epochs"])
        d.pop("dataset", None)  # dataset section is handled by the CLI
        return cls(**d)


def deepmoe_loss(
    logits: Tensor,
    aux_logits: Tensor,
    gates: Sequence[Tensor],
    labels: np.ndarray,
    gate_weight: float,
    aux_weight: float,
) -> Tensor:
    """Scalar objective; see module docstring for the three terms."""
    total, _ = deepmoe_loss_terms(logits, aux_logits, gates, labels,
                                  gate_weight, aux_weight)
    return total


def deepmoe_loss_terms(
    logits: Tensor,
    aux_logits: Tensor,
    gates: Sequence[Tensor],
    labels: np.ndarray,
    gate_weight: float,
    aux_weight: float,
):
    """(total, dict of raw term values) — the trainer logs the parts."""
    if gate_weight < 0 or aux_weight < 0:
        raise ConfigError("loss weights must be nonnegative")
    batch = logits.data.shape[0]
    base = ops.softmax_cross_entropy(logits, labels)
    total = base
    parts = {"base": base.item(), "gate_l1": 0.0, "embed": 0.0}
    if gates:
        penalty = ops.scale(l1_gate_penalty(gates), 1.0 / batch)
        parts["gate_l1"] = penalty.item()
        if gate_weight != 0.0:
            total = ops.add(total, ops.scale(penalty, gate_weight))
    if aux_weight != 0.0:
        aux = ops.softmax_cross_entropy(aux_logits, labels)
        parts["embed"] = aux.item()
        total = ops.add(total, ops.scale(aux, aux_weight))
    return total, parts


# --- augmentation -----------------------------------------------------------

def apply_augment(image: np.ndarray, flip: bool, dx: int, dy: int) -> np.ndarray:
    """Deterministic core of augment(): horizontal flip then zero-padded shift."""
    out = image[:, :, ::-1] if flip else image
    if dx or dy:
        h, w = out.shape[1], out.shape[2]
        shifted = np.zeros_like(out)
        src_y = slice(max(0, -dy), min(h, h - dy))
        src_x = slice(max(0, -dx), min(w, w - dx))
        dst_y = slice(max(0, dy), min(h, h + dy))
        dst_x = slice(max(0, dx), min(w, w + dx))
        shifted[:, dst_y, dst_x] = out[:, src_y, src_x]
        out = shifted
    return np.ascontiguousarray(out)


def augment(image: np.ndarray, rng: np.random.Generator, shift_max: int = 4) -> np.ndarray:
    """Random horizontal flip (p=0.5) and shift up to +-shift_max, zero padded."""
    flip = bool(rng.integers(0, 2))
    dx = int(rng.integers(-shift_max, shift_max + 1))
    dy = int(rng.integers(-shift_max, shift_max + 1))
    return apply_augment(image, flip, dx, dy)


def _augment_batch(images: np.ndarray, rng, shift_max: int) -> np.ndarray:
    return np.stack([augment(img, rng, shift_max) for img in images])


# --- evaluation -------------------------------------------------------------

@dataclass
class EvalResult:
    top1_error: float
    mean_loss: float
    active_fraction: Dict[str, float]  # per gated layer
    mean_active_fraction: float
    mean_gate_sparsity: float
    dynamic_macs: float
    static_macs: int
    report: flops_mod.FlopsReport

    @property
    def top1_accuracy(self) -> float:
        return 1.0 - self.top1_error


def evaluate(model: DeepMoE, data: Dataset, batch_size: int = 256) -> EvalResult:
    """Inference-mode metrics over a split, using the sparse path."""
    correct = 0
    loss_sum = 0.0
    all_gates: List[List[np.ndarray]] = [[] for _ in model.heads]
    for start in range(0, len(data), batch_size):
        x = data.images[start : start + batch_size]
        y = data.labels[start : start + batch_size]
        out = model.forward_sparse(x)
        correct += int((out.logits.argmax(axis=1) == y).sum())
        logp = ops.log_softmax(out.logits.astype(np.float64))
        loss_sum += float(-logp[np.arange(len(y)), y].sum())
        for i, g in enumerate(out.gates):
            all_gates[i].append(g)
    gates = [np.concatenate(g) for g in all_gates] if all_gates else []
    report = flops_mod.report_from_gates(model.cfg, gates)
    zeros = sum(float((g == 0).sum()) for g in gates)
    total = sum(g.size for g in gates)
    fractions = {
        f"head{i:02d}": float(np.count_nonzero(g, axis=1).mean() / g.shape[1])
        for i, g in enumerate(gates)
    }
    mean_frac = float(np.mean(list(fractions.values()))) if fractions else 1.0
    return EvalResult(
        top1_error=1.0 - correct / len(data),
        mean_loss=loss_sum / len(data),
        active_fraction=fractions,
        mean_active_fraction=mean_frac,
        mean_gate_sparsity=zeros / total if total else 0.0,
        dynamic_macs=report.dynamic_macs,
        static_macs=report.static_macs,
        report=report,
    )


# --- the two-phase procedure --------------------------------------------------

def train_procedure1(
    model: DeepMoE,
    train_data: Dataset,
    cfg: TrainConfig,
    val_data: Optional[Dataset] = None,
    metrics_path: Optional[str] = None,
    verbose: bool = False,
) -> List[Dict]:
    """Joint phase then frozen-gate fine-tuning; returns per-epoch metric rows.

    Phase 2 freezes every ``gate.*`` and ``embed.*`` parameter bitwise (they
    still run in the forward graph) and sets both penalty weights to zero.
    Raises :class:`TrainingDiverged` if the objective becomes non-finite.
    """
    rng = np.random.default_rng([cfg.seed, 17])
    aug_rng = np.random.default_rng([cfg.seed, 23])
    eval_data = val_data if val_data is not None else train_data
    velocities: Dict[str, np.ndarray] = {}
    static_macs = flops_mod.static_flops(model.cfg).static_macs
    rows: List[Dict] = []

    total_epochs = cfg.joint_epochs + cfg.finetune_epochs
    for epoch in range(total_epochs):
        phase = 1 if epoch < cfg.joint_epochs else 2
        lr = cfg.lr_at(epoch)
        if phase == 1:
            gate_w, aux_w = cfg.gate_weight, cfg.aux_weight
            trainable = dict(model.params)
        else:
            gate_w, aux_w = 0.0, 0.0
            trainable = trainable_subset(model.params, FROZEN_PREFIXES)

        order = rng.permutation(len(train_data))
        loss_accum, n_batches = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x = train_data.images[idx]
            if cfg.augment:
                x = _augment_batch(x, aug_rng, cfg.shift_max)
            y = train_data.labels[idx]
            with Tape() as tape:
                out = model.forward(x, training=True)
                loss, _ = deepmoe_loss_terms(out.logits, out.aux_logits, out.gates,
                                             y, gate_w, aux_w)
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingDiverged(
                        f"non-finite objective {value} at epoch {epoch}, "
                        f"batch {n_batches} (lr={lr}, phase={phase})"
                    )
                zero_grads(trainable.values())
                backward(loss, tape)
            sgd_momentum_step(trainable, velocities, lr, cfg.momentum,
                              cfg.weight_decay)
            loss_accum += value
            n_batches += 1

        ev = evaluate(model, eval_data)
        row = {
            "epoch": epoch,
            "phase": phase,
            "lr": lr,
            "train_loss": loss_accum / max(1, n_batches),
            "val_loss": ev.mean_loss,
            "val_top1": ev.top1_accuracy,
            "mean_gate_sparsity": ev.mean_gate_sparsity,
            "dynamic_flops": flops_mod.FLOPS_PER_MAC * ev.dynamic_macs,
            "static_flops": flops_mod.FLOPS_PER_MAC * static_macs,
        }
        rows.append(row)
        if verbose:
            print(
                f"epoch {epoch:3d} phase {phase} lr {lr:.4g} "
                f"loss {row['train_loss']:.4f} val_top1 {row['val_top1']:.3f} "
                f"sparsity {row['mean_gate_sparsity']:.3f}"
            )
    if metrics_path is not None:
        write_metrics_csv(metrics_path, rows)
    return rows


def write_metrics_csv(path: str, rows: List[Dict]) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRICS_COLUMNS)
        for row in rows:
            w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c]
                        for c in METRICS_COLUMNS])
    os.replace(tmp, path)


def frozen_checksum(model: DeepMoE) -> str:
    """Digest of the embedding-net and gate-head parameters."""
    subset = {
        n: p for n, p in model.params.items()
        if any(n.startswith(pre) for pre in FROZEN_PREFIXES)
    }
    return checksum(subset)
