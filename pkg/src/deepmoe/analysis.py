"""Gate-behavior analyses: embedding shuffling, sparsity sweeps, gate stats.

All experiments are deterministic functions of (config, seed). Donor drawing
in the shuffling experiment is seeded per (seed, target example, donor-class
pool), so two pools with identical class content produce identical draws.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import flops as flops_mod
from .data import Dataset
from .errors import ConfigError, TrainingDiverged
from .models import DeepMoE, ModelConfig, build_deepmoe, scaled_widening_config
from .moe import gate_forward
from .tensor import Tensor
from .training import TrainConfig, evaluate, train_procedure1


def _embed_all(model: DeepMoE, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    from .embedding import embed_forward

    chunks = []
    for start in range(0, images.shape[0], batch_size):
        x = model._as_tensor_batch(images[start : start + batch_size])
        chunks.append(embed_forward(model.cfg.embedding, model.params, x).data)
    return np.concatenate(chunks)


def gates_from_embedding(model: DeepMoE, e: np.ndarray) -> List[np.ndarray]:
    """Per-head gate arrays for externally chosen embedding rows."""
    et = Tensor._wrap(np.ascontiguousarray(e, dtype=model.dtype))
    return [gate_forward(model.gate_head(h.index), et).data for h in model.heads]


def class_group_map(data: Dataset) -> Dict[int, int]:
    """Fine-class -> coarse-group map; every class must sit in one group."""
    if data.coarse_labels is None:
        raise ConfigError("dataset has no coarse labels")
    mapping: Dict[int, int] = {}
    for fine, coarse in zip(data.labels, data.coarse_labels):
        fine, coarse = int(fine), int(coarse)
        if mapping.setdefault(fine, coarse) != coarse:
            raise ConfigError(f"class {fine} appears in multiple coarse groups")
    return mapping


@dataclass
class ShuffleResult:
    target_class: int
    n_examples: int
    baseline_acc: float
    in_group_acc: float
    out_group_acc: float


def shuffle_embedding_experiment(
    model: DeepMoE,
    data: Dataset,
    target_classes: Sequence[int],
    repeats: int = 20,
    seed: int = 0,
) -> List[ShuffleResult]:
    """Evaluate target classes with donor gate embeddings.

    For every example of a target class, its gates are recomputed from the
    embedding of a donor example drawn either from other classes of the same
    coarse group (in-group) or from classes of different groups
    (out-of-group); the base network forward is otherwise unchanged. Donors
    are drawn without replacement from the pool (wrapping only when the pool
    is smaller than `repeats`). When a dataset has a single coarse group the
    out-of-group pool falls back to the in-group pool.
    """
    groups = class_group_map(data)
    e_all = _embed_all(model, data.images)
    results = []
    for target in target_classes:
        target = int(target)
        if target not in groups:
            raise ConfigError(f"class {target} absent from dataset")
        t_idx = np.flatnonzero(data.labels == target)
        x_t = data.images[t_idx]
        own_gates = gates_from_embedding(model, e_all[t_idx])
        baseline_logits = model.forward_with_gates(x_t, own_gates).data
        baseline_acc = float((baseline_logits.argmax(axis=1) == target).mean())

        in_classes = sorted(c for c, g in groups.items() if g == groups[target] and c != target)
        out_classes = sorted(c for c, g in groups.items() if g != groups[target])
        if not out_classes:
            out_classes = in_classes
        if not in_classes:
            in_classes = out_classes
        if not in_classes:
            raise ConfigError("no donor classes available")

        accs = {}
        for kind, pool_classes in (("in", in_classes), ("out", out_classes)):
            pool_idx = np.flatnonzero(np.isin(data.labels, pool_classes))
            donors = np.empty((len(t_idx), repeats), dtype=np.int64)
            for j, t in enumerate(t_idx):
                rng = np.random.default_rng([seed, int(t)] + list(pool_classes))
                perm = rng.permutation(pool_idx.size)
                take = np.resize(perm, repeats)  # wraps only if pool < repeats
                donors[j] = pool_idx[take]
            correct = 0
            for r in range(repeats):
                gates = gates_from_embedding(model, e_all[donors[:, r]])
                logits = model.forward_with_gates(x_t, gates).data
                correct += int((logits.argmax(axis=1) == target).sum())
            accs[kind] = correct / (len(t_idx) * repeats)
        results.append(
            ShuffleResult(target, len(t_idx), baseline_acc, accs["in"], accs["out"])
        )
    return results


def write_shuffle_csv(path: str, results: List[ShuffleResult]) -> None:
    _write_csv(
        path,
        ["target_class", "n_examples", "baseline_acc", "in_group_acc", "out_group_acc"],
        [[r.target_class, r.n_examples, repr(r.baseline_acc),
          repr(r.in_group_acc), repr(r.out_group_acc)] for r in results],
    )


# --- sparsity sweep -----------------------------------------------------------

@dataclass
class SweepRow:
    gate_weight: float
    seed: int
    status: str  # ok | diverged
    mean_active_fraction: float
    dynamic_flops: float
    static_flops: float
    val_top1: float


def lambda_sweep(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    grid: Sequence[float],
    seeds: Sequence[int],
    train_data: Dataset,
    val_data: Optional[Dataset] = None,
) -> List[SweepRow]:
    """Train one model per (gate_weight, seed) and tabulate the trade-off."""
    if list(grid) != sorted(grid):
        raise ConfigError("gate weight grid must be ascending")
    rows: List[SweepRow] = []
    for lam in grid:
        for seed in seeds:
            cfg = replace(train_cfg, gate_weight=float(lam), seed=int(seed))
            model = build_deepmoe(model_cfg, seed=int(seed), dtype=cfg.dtype)
            try:
                train_procedure1(model, train_data, cfg, val_data)
            except TrainingDiverged:
                rows.append(SweepRow(float(lam), int(seed), "diverged",
                                     float("nan"), float("nan"), float("nan"),
                                     float("nan")))
                continue
            ev = evaluate(model, val_data if val_data is not None else train_data)
            rows.append(
                SweepRow(
                    float(lam), int(seed), "ok",
                    ev.mean_active_fraction,
                    flops_mod.FLOPS_PER_MAC * ev.dynamic_macs,
                    float(flops_mod.FLOPS_PER_MAC * ev.static_macs),
                    ev.top1_accuracy,
                )
            )
    return rows


def write_sweep_csv(path: str, rows: List[SweepRow]) -> None:
    _write_csv(
        path,
        ["lambda", "seed", "status", "mean_active_fraction",
         "dynamic_flops", "static_flops", "val_top1"],
        [[repr(r.gate_weight), r.seed, r.status, repr(r.mean_active_fraction),
          repr(r.dynamic_flops), repr(r.static_flops), repr(r.val_top1)]
         for r in rows],
    )


# --- gate statistics ------------------------------------------------------------

def gate_stats(
    model: DeepMoE,
    data: Dataset,
    max_pairs: int = 2000,
    seed: int = 0,
    batch_size: int = 256,
) -> Dict:
    """Support diversity per gated layer: the empirical face of data-dependent
    sparsity patterns.

    Reports, per head: the active-fraction histogram, how many distinct
    supports (sets of active channels) occur across examples, and the
    distribution of pairwise Jaccard similarities between supports.
    """
    per_head: List[List[np.ndarray]] = [[] for _ in model.heads]
    for start in range(0, len(data), batch_size):
        out = model.forward_sparse(data.images[start : start + batch_size])
        for i, g in enumerate(out.gates):
            per_head[i].append(g != 0)
    rng = np.random.default_rng(seed)
    stats = {}
    for i, chunks in enumerate(per_head):
        supports = np.concatenate(chunks)  # [N, width] bool
        n, width = supports.shape
        fractions = supports.sum(axis=1) / width
        hist, edges = np.histogram(fractions, bins=10, range=(0.0, 1.0))
        distinct = len({row.tobytes() for row in supports})
        if n >= 2:
            k = min(max_pairs, n * (n - 1) // 2)
            a = rng.integers(0, n, size=k)
            b = rng.integers(0, n, size=k)
            keep = a != b
            a, b = a[keep], b[keep]
            inter = np.logical_and(supports[a], supports[b]).sum(axis=1)
            union = np.logical_or(supports[a], supports[b]).sum(axis=1)
            jac = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
            jaccard = {
                "mean": float(jac.mean()) if jac.size else 1.0,
                "p10": float(np.percentile(jac, 10)) if jac.size else 1.0,
                "p90": float(np.percentile(jac, 90)) if jac.size else 1.0,
                "pairs": int(jac.size),
            }
        else:
            jaccard = {"mean": 1.0, "p10": 1.0, "p90": 1.0, "pairs": 0}
        stats[f"head{i:02d}"] = {
            "width": int(width),
            "mean_active_fraction": float(fractions.mean()),
            "active_fraction_hist": {
                "edges": [float(e) for e in edges],
                "counts": [int(c) for c in hist],
            },
            "distinct_supports": distinct,
            "jaccard": jaccard,
        }
    return stats


# --- widening comparison ---------------------------------------------------------

@dataclass
class WideningRow:
    control: str
    preset: str
    params_base: int
    params_total: int
    gated_convs: int
    static_flops: int
    dynamic_flops: float
    val_top1: float
    status: str


def widening_comparison(
    preset_names: Sequence[str],
    budget_mode: str,
    train_cfg: TrainConfig,
    train_data: Dataset,
    val_data: Optional[Dataset] = None,
    channel_scale: float = 1.0 / 16.0,
    input_hw: int = 16,
    num_classes: Optional[int] = None,
) -> List[WideningRow]:
    """Train toy-scale analogs of the widening strategies and tabulate.

    ``budget_mode='params'`` trains every strategy with the same gate weight;
    ``'params+flops'`` additionally scales the gate weight of costlier
    strategies proportionally to their static cost, pressuring their dynamic
    cost toward the cheapest one.
    """
    if budget_mode not in ("params", "params+flops"):
        raise ConfigError(f"unknown budget mode {budget_mode!r}")
    nc = num_classes if num_classes is not None else train_data.num_classes
    cfgs = {
        name: scaled_widening_config(name, nc, channel_scale, input_hw)
        for name in preset_names
    }
    statics = {name: flops_mod.static_flops(cfg).static_macs for name, cfg in cfgs.items()}
    floor = min(statics.values())
    rows: List[WideningRow] = []
    for name, cfg in cfgs.items():
        lam = train_cfg.gate_weight
        if budget_mode == "params+flops":
            lam = train_cfg.gate_weight * statics[name] / floor
        run_cfg = replace(train_cfg, gate_weight=lam)
        model = build_deepmoe(cfg, seed=run_cfg.seed, dtype=run_cfg.dtype)
        status = "ok"
        try:
            train_procedure1(model, train_data, run_cfg, val_data)
            ev = evaluate(model, val_data if val_data is not None else train_data)
            dyn = flops_mod.FLOPS_PER_MAC * ev.dynamic_macs
            top1 = ev.top1_accuracy
        except TrainingDiverged:
            status, dyn, top1 = "diverged", float("nan"), float("nan")
        rows.append(
            WideningRow(
                control=budget_mode,
                preset=name,
                params_base=model.param_count("base."),
                params_total=model.param_count(),
                gated_convs=len(model.heads),
                static_flops=flops_mod.FLOPS_PER_MAC * statics[name],
                dynamic_flops=dyn,
                val_top1=top1,
                status=status,
            )
        )
    return rows


def write_widening_csv(path: str, rows: List[WideningRow]) -> None:
    _write_csv(
        path,
        ["control", "preset", "params_base", "params_total", "gated_convs",
         "static_flops", "dynamic_flops", "val_top1", "status"],
        [[r.control, r.preset, r.params_base, r.params_total, r.gated_convs,
          r.static_flops, repr(r.dynamic_flops), repr(r.val_top1), r.status]
         for r in rows],
    )


def _write_csv(path: str, header: List[str], rows: List[List]) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
    os.replace(tmp, path)
