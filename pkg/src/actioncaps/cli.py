"""Command-line entry point.

Subcommands: preprocess, synth, train, eval, inspect-routing, consistency,
compare-classes, flops. Exit codes: 0 success, 1 usage error, 2 data or
parse error.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import RunConfig, load_config
from .errors import ContractError, DataError, SkeletonParseError
from .flops import REFERENCE_GFLOPS, flop_count
from .skeleton import (
    PreprocessConfig,
    load_dataset_dir,
    load_nucla_json,
    load_tensor,
    parse_ntu_skeleton,
    preprocess,
    save_tensor,
    split_protocol,
)
from .synth import synth_dataset


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def build_parser():
    parser = _Parser(prog="actioncaps", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    def common(p, checkpoint=False):
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--stages", type=int, choices=range(1, 5))
        p.add_argument("--routing-iters", "--r", dest="routing_iters", type=int)
        p.add_argument("--alpha", type=float)
        if checkpoint:
            p.add_argument("--checkpoint", type=Path, required=True)
        return p

    p = sub.add_parser("preprocess", help="raw recordings -> cached tensors")
    p.add_argument("--dataset", choices=("ntu", "nucla"), default="ntu")
    p.add_argument("--raw", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--config", type=Path)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--train-per-class", type=int, default=None)
    p.add_argument("--test-per-class", type=int, default=None)

    p = sub.add_parser("train", help="train a model on cached tensors")
    common(p)
    p.add_argument("--data", type=Path, help="dir of .actc files")
    p.add_argument("--dataset", choices=("ntu", "nucla", "synth"), default="ntu")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--protocol", choices=("xsub", "xview", "nucla-cam"))

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p, checkpoint=True)
    p.add_argument("--data", type=Path)
    p.add_argument("--dataset", choices=("ntu", "nucla", "synth"), default="ntu")
    p.add_argument("--protocol", choices=("xsub", "xview", "nucla-cam"))

    p = sub.add_parser("inspect-routing", help="per-iteration coupling exports")
    common(p, checkpoint=True)
    p.add_argument("--sample", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--stage", type=int, default=None, help="0-based; default last")
    p.add_argument("--path", choices=("global", "personalized"), default="global")
    p.add_argument("--subject", type=int, default=0)

    p = sub.add_parser("consistency", help="per-class mean coupling map")
    common(p, checkpoint=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--stage", type=int, default=None)
    p.add_argument("--path", choices=("global", "personalized"), default="global")
    p.add_argument("--subject", type=int, default=0)

    p = sub.add_parser("compare-classes", help="side-by-side couplings of two samples")
    common(p, checkpoint=True)
    p.add_argument("--sample-a", type=Path, required=True)
    p.add_argument("--sample-b", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--stage", type=int, default=None)
    p.add_argument("--path", choices=("global", "personalized"), default="global")
    p.add_argument("--subject", type=int, default=0)

    p = sub.add_parser("flops", help="closed-form per-layer FLOP table")
    common(p)
    p.add_argument("--out", type=Path, help="also write flops.csv and flops.png")

    return parser


def _load_run_config(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    model = cfg.model
    if getattr(args, "stages", None) is not None:
        model = dataclasses.replace(model, stages=args.stages)
    if getattr(args, "routing_iters", None) is not None:
        model = dataclasses.replace(model, routing_iters=args.routing_iters)
    if getattr(args, "alpha", None) is not None:
        model = dataclasses.replace(model, routing_alpha=args.alpha)
    cfg.model = model
    if getattr(args, "seed", None) is not None:
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
    return cfg


def _routing_overrides(params, args):
    """Apply inference-time overrides that need no new parameters."""
    model = params.cfg
    if getattr(args, "routing_iters", None) is not None:
        model = dataclasses.replace(model, routing_iters=args.routing_iters)
    if getattr(args, "alpha", None) is not None:
        model = dataclasses.replace(model, routing_alpha=args.alpha)
    params.cfg = model
    return params


def _load_sample(path, run_cfg):
    path = Path(path)
    if path.suffix == ".actc":
        return load_tensor(path)
    if path.suffix == ".skeleton":
        raw = parse_ntu_skeleton(path.read_text(), name=path.name)
        return preprocess(raw, run_cfg.preprocess)
    if path.suffix == ".json":
        raw = load_nucla_json(path)
        pre = dataclasses.replace(run_cfg.preprocess, joints=raw.joint_count())
        return preprocess(raw, pre)
    raise DataError(f"{path}: unsupported sample format {path.suffix!r}")


def _stage_index(args, cfg):
    stage = args.stage if args.stage is not None else cfg.stages - 1
    if not 0 <= stage < cfg.stages:
        raise DataError(f"stage {stage} outside [0, {cfg.stages})")
    return stage


def cmd_preprocess(args):
    run_cfg = load_config(args.config) if args.config else RunConfig()
    pre = run_cfg.preprocess
    args.out.mkdir(parents=True, exist_ok=True)
    suffix = ".skeleton" if args.dataset == "ntu" else ".json"
    files = sorted(p for p in args.raw.iterdir() if p.suffix == suffix)
    if not files:
        raise DataError(f"{args.raw}: no {suffix} files found")
    for path in files:
        if args.dataset == "ntu":
            raw = parse_ntu_skeleton(path.read_text(), name=path.name)
            cfg = pre
        else:
            raw = load_nucla_json(path)
            cfg = dataclasses.replace(pre, joints=raw.joint_count())
        save_tensor(preprocess(raw, cfg), args.out / (path.stem + ".actc"))
    print(f"wrote {len(files)} tensors to {args.out}")
    return 0


def cmd_synth(args):
    run_cfg = _load_run_config(args)
    spec = run_cfg.synth
    seed = run_cfg.train.seed
    for split, per_class, offset in (
        ("train", args.train_per_class, 0),
        ("test", args.test_per_class, 1),
    ):
        split_spec = spec if per_class is None else dataclasses.replace(
            spec, samples_per_class=per_class
        )
        out = args.out / split
        out.mkdir(parents=True, exist_ok=True)
        data = synth_dataset(split_spec, seed=seed * 2 + offset, pre=run_cfg.preprocess)
        for i, st in enumerate(data):
            save_tensor(st, out / f"synth_c{st.label}_{i:04d}.actc")
        print(f"wrote {len(data)} samples to {out}")
    return 0


def _resolve_dataset(args, run_cfg, split="train"):
    """Either a directory of cached tensors or a generated synthetic set."""
    if args.dataset == "synth":
        seed = run_cfg.train.seed * 2 + (0 if split == "train" else 1)
        return synth_dataset(run_cfg.synth, seed=seed, pre=run_cfg.preprocess)
    if args.data is None:
        raise UsageError(f"--data is required for --dataset {args.dataset}")
    return load_dataset_dir(args.data)


def cmd_train(args):
    from . import training

    run_cfg = _load_run_config(args)
    data = _resolve_dataset(args, run_cfg, split="train")
    if args.protocol:
        data, _ = split_protocol(data, args.protocol)
    args.out.mkdir(parents=True, exist_ok=True)
    _, metrics = training.train(run_cfg.model, run_cfg.train, data, args.out)
    last = metrics[-1]
    print(
        f"trained {run_cfg.train.total_epochs} epochs; final train "
        f"loss {last['train_loss']:.4f}, acc {last['train_acc']:.3f}"
    )
    print(f"checkpoints and metrics under {args.out}")
    return 0


def cmd_eval(args):
    from . import training

    run_cfg = load_config(args.config) if args.config else RunConfig()
    params = _routing_overrides(load_checkpoint(args.checkpoint), args)
    data = _resolve_dataset(args, run_cfg, split="test")
    if args.protocol:
        _, data = split_protocol(data, args.protocol)
        if not data:
            raise DataError(f"protocol {args.protocol} left no test samples")
    result = training.evaluate(params, data)
    print(f"top1 {result['top1']:.4f} over {len(data)} samples")
    for idx, acc in enumerate(result["per_class"]):
        print(f"class {idx}: {'n/a' if acc != acc else f'{acc:.4f}'}")
    print("confusion (rows = truth):")
    for row in result["confusion"]:
        print("  " + " ".join(f"{v:4d}" for v in row))
    return 0


def cmd_inspect_routing(args):
    from . import introspect
    from .figures import save_heatmap_figure

    run_cfg = load_config(args.config) if args.config else RunConfig()
    params = _routing_overrides(load_checkpoint(args.checkpoint), args)
    cfg = params.cfg
    stage = _stage_index(args, cfg)
    sample = _load_sample(args.sample, run_cfg)
    state = introspect.routing_states_for(
        params, sample, stage, path=args.path, subject=args.subject
    )
    labels = introspect.joint_labels(
        state.couplings.shape[1], joints_per_subject=cfg.joints
    )
    args.out.mkdir(parents=True, exist_ok=True)
    for it in range(len(state.trace)):
        base = args.out / f"coupling_stage{stage}_iter{it + 1}"
        matrix = introspect.export_coupling(
            state, it, base.with_suffix(".csv"), col_labels=labels
        )
        introspect.render_heatmap(matrix, base.with_suffix(".pgm"))
        save_heatmap_figure(
            matrix,
            base.with_suffix(".png"),
            title=f"couplings, stage {stage}, iteration {it + 1} ({args.path})",
            col_labels=labels,
        )
    print(f"wrote {len(state.trace)} coupling exports to {args.out}")
    return 0


def cmd_consistency(args):
    from . import introspect
    from .figures import save_heatmap_figure

    params = _routing_overrides(load_checkpoint(args.checkpoint), args)
    cfg = params.cfg
    stage = _stage_index(args, cfg)
    data = load_dataset_dir(args.data)
    cmap = introspect.consistency_map(
        params, data, stage, path=args.path, subject=args.subject
    )
    args.out.mkdir(parents=True, exist_ok=True)
    base = args.out / f"consistency_stage{stage}"
    introspect.write_matrix_csv(
        cmap.matrix,
        base.with_suffix(".csv"),
        cmap.slot_labels,
        absent_rows=cmap.absent_rows,
    )
    introspect.render_heatmap(cmap.matrix, base.with_suffix(".pgm"))
    save_heatmap_figure(
        cmap.matrix,
        base.with_suffix(".png"),
        title=f"consistency map, stage {stage} ({args.path})",
        row_labels=cmap.class_labels,
        col_labels=cmap.slot_labels,
    )
    absent = [i for i, p in enumerate(cmap.present) if not p]
    if absent:
        print(f"classes without samples (rows flagged absent): {absent}")
    print(f"wrote consistency map to {base}.csv/.pgm/.png")
    return 0


def cmd_compare_classes(args):
    from . import introspect
    from .figures import save_side_by_side_figure

    run_cfg = load_config(args.config) if args.config else RunConfig()
    params = _routing_overrides(load_checkpoint(args.checkpoint), args)
    cfg = params.cfg
    stage = _stage_index(args, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    matrices, titles = [], []
    labels = None
    for tag, sample_path in (("a", args.sample_a), ("b", args.sample_b)):
        sample = _load_sample(sample_path, run_cfg)
        state = introspect.routing_states_for(
            params, sample, stage, path=args.path, subject=args.subject
        )
        labels = introspect.joint_labels(
            state.couplings.shape[1], joints_per_subject=cfg.joints
        )
        base = args.out / f"compare_{tag}_stage{stage}"
        matrix = introspect.export_coupling(
            state, len(state.trace) - 1, base.with_suffix(".csv"), col_labels=labels
        )
        introspect.render_heatmap(matrix, base.with_suffix(".pgm"))
        matrices.append(matrix)
        titles.append(f"{tag}: {sample_path.name} (label {sample.label})")
    save_side_by_side_figure(
        matrices, titles, args.out / f"compare_stage{stage}.png", col_labels=labels
    )
    print(f"wrote side-by-side couplings to {args.out}")
    return 0


def cmd_flops(args):
    run_cfg = _load_run_config(args)
    report = flop_count(run_cfg.model)
    print(report.table())
    ntu_lo, ntu_hi = REFERENCE_GFLOPS["ntu"]
    print(
        f"reference full-scale totals (not asserted): "
        f"{ntu_lo} / {ntu_hi} GFLOPs (25-joint corpus, both published figures), "
        f"{REFERENCE_GFLOPS['nucla'][0]} GFLOPs (20-joint corpus)"
    )
    if args.out:
        from .figures import save_flops_figure

        args.out.mkdir(parents=True, exist_ok=True)
        csv_path = args.out / "flops.csv"
        lines = ["layer,flops"] + [f"{n},{f}" for n, f in report.rows]
        lines.append(f"total,{report.total}")
        csv_path.write_bytes(("\n".join(lines) + "\n").encode("utf-8"))
        save_flops_figure(report, args.out / "flops.png")
        print(f"wrote {csv_path} and flops.png")
    return 0


_COMMANDS = {
    "preprocess": cmd_preprocess,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "inspect-routing": cmd_inspect_routing,
    "consistency": cmd_consistency,
    "compare-classes": cmd_compare_classes,
    "flops": cmd_flops,
}


def cli_dispatch(argv):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (DataError, SkeletonParseError, ContractError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    raise SystemExit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
