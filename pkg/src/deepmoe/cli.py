"""Command-line front end.

Subcommands: train, eval, flops, gradcheck, shuffle, sweep, gatestats.
Model configs come either from a JSON file (--model path) or a named preset
(--model toy-vgg). Training configs are JSON; their optional "dataset"
section selects data:

    {"type": "synthetic", "n": 1000, "classes": 8, "image_size": 16,
     "seed": 0, "noise": 0.25, "val_n": 256}
    {"type": "cifar10-bin", "train_paths": [...], "test_paths": [...]}

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional, Tuple

import numpy as np

from . import analysis, flops as flops_mod, models, training
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, load_cifar10_bin, make_synthetic
from .embedding import write_embedding_dump
from .gradcheck import finite_diff_gradcheck
from .moe import write_gate_trace


def _load_model_config(value: str) -> models.ModelConfig:
    if os.path.exists(value):
        with open(value) as f:
            return models.ModelConfig.from_json(f.read())
    return models.preset(value)


def _load_train_config(path: Optional[str]) -> Tuple[training.TrainConfig, dict]:
    if path is None:
        return training.TrainConfig(), {}
    with open(path) as f:
        raw = json.load(f)
    dataset_spec = raw.get("dataset", {})
    cfg = training.TrainConfig.from_json(json.dumps(raw))
    return cfg, dataset_spec


def _resolve_dataset(spec: dict, fallback_classes: int) -> Tuple[Dataset, Optional[Dataset]]:
    kind = spec.get("type", "synthetic")
    if kind == "synthetic":
        n = int(spec.get("n", 1000))
        classes = int(spec.get("classes", fallback_classes))
        size = int(spec.get("image_size", 16))
        seed = int(spec.get("seed", 0))
        noise = float(spec.get("noise", 0.25))
        train = make_synthetic(n, classes, size, seed=seed, noise=noise)
        val = None
        val_n = int(spec.get("val_n", 0))
        if val_n:
            val = make_synthetic(val_n, classes, size, seed=seed + 1,
                                 noise=noise, split="val")
        return train, val
    if kind == "cifar10-bin":
        train = load_cifar10_bin(spec["train_paths"])
        val = None
        if spec.get("test_paths"):
            val = load_cifar10_bin(spec["test_paths"], split="val")
        return train, val
    raise ValueError(f"unknown dataset type {kind!r}")


def _eval_data(train: Dataset, val: Optional[Dataset]) -> Dataset:
    return val if val is not None else train


def _restore(model_value: str, ckpt: str, dtype) -> models.DeepMoE:
    cfg = _load_model_config(model_value)
    model = models.build_deepmoe(cfg, seed=0, dtype=dtype)
    model.load_state(load_checkpoint(ckpt))
    return model


def cmd_train(args) -> int:
    cfg, dataset_spec = _load_train_config(args.train)
    if args.seed is not None:
        cfg = training.TrainConfig(**{**_cfg_dict(cfg), "seed": args.seed})
    if args.gate_weight is not None:
        cfg = training.TrainConfig(**{**_cfg_dict(cfg), "gate_weight": args.gate_weight})
    if args.aux_weight is not None:
        cfg = training.TrainConfig(**{**_cfg_dict(cfg), "aux_weight": args.aux_weight})
    model_cfg = _load_model_config(args.model)
    train_data, val_data = _resolve_dataset(dataset_spec, model_cfg.num_classes)
    model = models.build_deepmoe(model_cfg, seed=cfg.seed, dtype=cfg.dtype)
    os.makedirs(args.out, exist_ok=True)
    training.train_procedure1(
        model, train_data, cfg, val_data,
        metrics_path=os.path.join(args.out, "metrics.csv"),
        verbose=not args.quiet,
    )
    save_checkpoint(os.path.join(args.out, "model.dmoe"), model.state())
    with open(os.path.join(args.out, "model_config.json"), "w") as f:
        f.write(model_cfg.to_json())
    with open(os.path.join(args.out, "train_config.json"), "w") as f:
        f.write(cfg.to_json())
    return 0


def _cfg_dict(cfg: training.TrainConfig) -> dict:
    from dataclasses import asdict

    return asdict(cfg)


def cmd_eval(args) -> int:
    cfg, dataset_spec = _load_train_config(args.train)
    model = _restore(args.model, args.ckpt, cfg.dtype)
    train_data, val_data = _resolve_dataset(dataset_spec, model.cfg.num_classes)
    data = _eval_data(train_data, val_data)
    ev = training.evaluate(model, data)
    os.makedirs(args.out, exist_ok=True)
    result = {
        "split": data.split,
        "n": len(data),
        "top1_error": ev.top1_error,
        "mean_loss": ev.mean_loss,
        "mean_active_fraction": ev.mean_active_fraction,
        "per_layer_active_fraction": ev.active_fraction,
        "dynamic_flops": flops_mod.FLOPS_PER_MAC * ev.dynamic_macs,
        "static_flops": flops_mod.FLOPS_PER_MAC * ev.static_macs,
        "reduction_percent": ev.report.reduction_percent,
    }
    with open(os.path.join(args.out, "eval.json"), "w") as f:
        json.dump(result, f, indent=2)
    if args.gate_trace:
        out = model.forward_sparse(data.images)
        write_gate_trace(os.path.join(args.out, "gate_trace.csv"), out.gates)
    if args.embedding_dump:
        out = model.forward_sparse(data.images)
        write_embedding_dump(os.path.join(args.out, "embeddings.csv"),
                             out.embedding, data.labels)
    if not args.quiet:
        print(json.dumps(result, indent=2))
    return 0


def cmd_flops(args) -> int:
    cfg = _load_model_config(args.model)
    report = flops_mod.static_flops(cfg)
    os.makedirs(args.out, exist_ok=True)
    report.to_csv(os.path.join(args.out, "flops.csv"))
    report.to_json(os.path.join(args.out, "flops.json"))
    if not args.quiet:
        print(json.dumps(report.summary(), indent=2))
    return 0


def cmd_gradcheck(args) -> int:
    dtype = np.float32 if args.precision == "float32" else np.float64
    cfg = _load_model_config(args.model)
    model = models.build_deepmoe(cfg, seed=args.seed, dtype=dtype)
    data = make_synthetic(args.batch, cfg.num_classes, cfg.input_hw,
                          seed=args.seed)
    x, y = data.images.astype(dtype), data.labels

    def loss_fn():
        out = model.forward(x, training=True)
        return training.deepmoe_loss(out.logits, out.aux_logits, out.gates, y,
                                     args.gate_weight, 1.0)

    res = finite_diff_gradcheck(loss_fn, model.params, seed=args.seed,
                                n_coords=args.coords)
    tol = args.tol if args.tol is not None else (1e-2 if dtype == np.float32 else 1e-6)
    print(
        f"gradcheck: max_rel_err={res.max_rel_err:.3e} checked={res.checked} "
        f"skipped_kinks={res.skipped_kinks} worst={res.worst_coord} tol={tol:g}"
    )
    return 0 if res.max_rel_err < tol else 1


def cmd_shuffle(args) -> int:
    cfg, dataset_spec = _load_train_config(args.train)
    model = _restore(args.model, args.ckpt, cfg.dtype)
    train_data, val_data = _resolve_dataset(dataset_spec, model.cfg.num_classes)
    data = _eval_data(train_data, val_data)
    if data.coarse_labels is None:
        print("shuffle requires a dataset with coarse labels", file=sys.stderr)
        return 1
    if args.classes:
        targets = [int(c) for c in args.classes.split(",")]
    else:
        targets = sorted(set(int(c) for c in data.labels))
    results = analysis.shuffle_embedding_experiment(
        model, data, targets, repeats=args.repeats, seed=args.seed or 0
    )
    os.makedirs(args.out, exist_ok=True)
    analysis.write_shuffle_csv(os.path.join(args.out, "shuffle.csv"), results)
    if not args.quiet:
        for r in results:
            print(
                f"class {r.target_class}: baseline {r.baseline_acc:.3f} "
                f"in-group {r.in_group_acc:.3f} out-group {r.out_group_acc:.3f}"
            )
    return 0


def cmd_sweep(args) -> int:
    cfg, dataset_spec = _load_train_config(args.train)
    model_cfg = _load_model_config(args.model) if args.model else None
    os.makedirs(args.out, exist_ok=True)
    if args.preset:
        names = args.preset.split(",")
        train_data, val_data = _resolve_dataset(dataset_spec, 0 or 8)
        rows = analysis.widening_comparison(
            names, args.budget, cfg, train_data, val_data,
            channel_scale=args.channel_scale,
        )
        analysis.write_widening_csv(os.path.join(args.out, "widening.csv"), rows)
        if not args.quiet:
            for r in rows:
                print(f"{r.preset}: params={r.params_base} top1={r.val_top1:.3f} "
                      f"dynamic_flops={r.dynamic_flops:.3e} [{r.status}]")
        return 0
    if model_cfg is None:
        print("sweep needs --model (or --preset for widening mode)", file=sys.stderr)
        return 2
    grid = [float(v) for v in args.grid.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    train_data, val_data = _resolve_dataset(dataset_spec, model_cfg.num_classes)
    rows = analysis.lambda_sweep(model_cfg, cfg, grid, seeds, train_data, val_data)
    analysis.write_sweep_csv(os.path.join(args.out, "sweep.csv"), rows)
    if not args.quiet:
        for r in rows:
            print(f"lambda={r.gate_weight} seed={r.seed} "
                  f"active={r.mean_active_fraction:.3f} top1={r.val_top1:.3f} "
                  f"[{r.status}]")
    return 0


def cmd_gatestats(args) -> int:
    cfg, dataset_spec = _load_train_config(args.train)
    model = _restore(args.model, args.ckpt, cfg.dtype)
    train_data, val_data = _resolve_dataset(dataset_spec, model.cfg.num_classes)
    data = _eval_data(train_data, val_data)
    stats = analysis.gate_stats(model, data, seed=args.seed or 0)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "gatestats.json")
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        json.dump(stats, f, indent=2)
    os.replace(tmp, path)
    if args.gate_trace:
        out = model.forward_sparse(data.images)
        write_gate_trace(os.path.join(args.out, "gate_trace.csv"), out.gates)
    if not args.quiet:
        print(json.dumps(stats, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deepmoe",
        description="Sparsely gated convolutional mixture-of-experts experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model=True, ckpt=False, train=True):
        if model:
            p.add_argument("--model", required=True,
                           help="model config JSON path or preset name")
        if ckpt:
            p.add_argument("--ckpt", required=True, help="checkpoint file")
        if train:
            p.add_argument("--train", help="train config JSON (with dataset section)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("train", help="run the two-phase training procedure")
    common(p)
    p.add_argument("--lambda", dest="gate_weight", type=float, default=None)
    p.add_argument("--mu", dest="aux_weight", type=float, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="sparse-path evaluation of a checkpoint")
    common(p, ckpt=True)
    p.add_argument("--gate-trace", action="store_true")
    p.add_argument("--embedding-dump", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("flops", help="static FLOPs report for a model config")
    common(p, train=False)
    p.set_defaults(fn=cmd_flops)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    common(p, train=False)
    p.add_argument("--coords", type=int, default=50)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--precision", choices=("float32", "float64"), default="float64")
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--lambda", dest="gate_weight", type=float, default=0.01)
    p.set_defaults(fn=cmd_gradcheck, seed=0)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("shuffle", help="gate-embedding shuffling experiment")
    common(p, ckpt=True)
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--classes", help="comma-separated target classes (default: all)")
    p.set_defaults(fn=cmd_shuffle)

    p = sub.add_parser("sweep", help="gate-weight sweep or widening comparison")
    common(p, model=False)
    p.add_argument("--model", help="model config JSON path or preset name")
    p.add_argument("--grid", default="0.001,8", help="ascending gate weights")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--preset", help="widening presets, e.g. W13-All,W1-High")
    p.add_argument("--budget", choices=("params", "params+flops"), default="params")
    p.add_argument("--channel-scale", type=float, default=1.0 / 16.0)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("gatestats", help="gate support diversity statistics")
    common(p, ckpt=True)
    p.add_argument("--gate-trace", action="store_true")
    p.set_defaults(fn=cmd_gatestats)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # surface a clean one-line failure, exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
