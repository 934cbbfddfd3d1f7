"""Command-line front end.

Every subcommand reads the same flat key-value configuration (JSON file
via --config, overridden by repeated --set key=value), so a run is fully
described by one document whose hash lands in every CSV row it writes.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .attacks import AttackSpec, run_attack
from .container import save_tensors
from .data import generate_synthetic_dataset, load_dataset, save_dataset
from .evaluation import (
    EVAL_KINDS,
    Pipeline,
    blackbox_transfer,
    budget_sweep,
    cross_branch_grid,
    evaluate,
    model_size_report,
    report_to_dict,
    sanity_check_suite,
)
from .experiments import (
    BUILD_TAG,
    ConfigError,
    ExperimentConfig,
    PRESETS,
    PROFILES,
    _report_row,
    run_preset,
    write_csv,
)
from .training import load_checkpoint, save_checkpoint, train


def _add_config_args(p):
    p.add_argument("--config", help="JSON file of flat key=value settings")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override one config key")


def _config(args):
    return ExperimentConfig.from_sources(getattr(args, "config", None),
                                         getattr(args, "overrides", ()))


def _meta(cfg):
    return {"config_hash": cfg.config_hash(), "seed": cfg.seed, "build": BUILD_TAG}


def _dataset(args, cfg):
    if getattr(args, "data", None):
        return load_dataset(args.data)
    return generate_synthetic_dataset(cfg.dataset_manifest())


def _eval_split(dataset, cfg):
    from .data import Split

    n = min(cfg.eval_subset or len(dataset.test), len(dataset.test))
    t = dataset.test
    return Split(videos=t.videos[:n], labels=t.labels[:n], ids=t.ids[:n])


def _pipeline(path, mode, cfg):
    net, det, _, manifest = load_checkpoint(path)
    kinds = tuple(s["kind"] for s in manifest["config"]["attack_specs"])
    if mode == "auto" and det is None:
        raise ConfigError(f"{path} has no detector; auto mode needs one")
    return Pipeline(net=net, detector=det if mode == "auto" else None,
                    mode=mode, trained_kinds=kinds)


# ---------------------------------------------------------------------------
# subcommands


def cmd_data(args):
    cfg = _config(args)
    dataset = generate_synthetic_dataset(cfg.dataset_manifest())
    save_dataset(args.out, dataset)
    print(f"wrote {args.out}: train={len(dataset.train)} test={len(dataset.test)}")
    return 0


def cmd_train(args):
    cfg = _config(args)
    tc = cfg.train_config(scheme=args.scheme)
    dataset = _dataset(args, cfg)
    result = train(tc, dataset, verbose=args.verbose)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, result)
    rows = [dict(r) for r in result.metrics]
    csv_path = out.with_name(out.stem + "_metrics.csv")
    write_csv(csv_path, rows, ["epoch", "split", "input_type", "accuracy", "loss"],
              _meta(cfg))
    print(f"wrote {out} and {csv_path}")
    return 0


def cmd_attack(args):
    cfg = _config(args)
    dataset = _dataset(args, cfg)
    split = _eval_split(dataset, cfg)
    pipe = _pipeline(args.checkpoint, args.mode, cfg)
    spec = cfg.eval_suite([args.kind])[0]
    loss_fn = pipe.craft_loss_fn(args.kind)
    advs = []
    for s in range(0, len(split.labels), 32):
        advs.append(run_attack(loss_fn, split.videos[s:s + 32],
                               split.labels[s:s + 32], spec,
                               sample_ids=split.ids[s:s + 32]))
    x_adv = np.concatenate(advs, axis=0)
    save_tensors(args.out, {"videos": x_adv, "labels": split.labels, "ids": split.ids},
                 {"kind": args.kind, "t_max": spec.t_max,
                  "config_hash": cfg.config_hash(), "seed": cfg.seed,
                  "build": BUILD_TAG})
    print(f"wrote {args.out}: {len(split.labels)} {args.kind} examples")
    return 0


def cmd_eval(args):
    cfg = _config(args)
    dataset = _dataset(args, cfg)
    split = _eval_split(dataset, cfg)
    pipe = _pipeline(args.checkpoint, args.mode, cfg)
    report = evaluate(pipe, split, cfg.eval_suite(), workers=cfg.workers or None)
    row = _report_row(Path(args.checkpoint).stem, args.mode, report)
    write_csv(args.out, [row],
              ["model", "mode", "clean", "pgd", "roa", "af", "spa", "mean", "union"],
              _meta(cfg))
    Path(args.out).with_suffix(".json").write_text(
        json.dumps(report_to_dict(report), indent=2) + "\n")
    print(f"mean={report.mean_accuracy:.2f} union={report.union_accuracy:.2f} -> {args.out}")
    return 0


def cmd_grid(args):
    cfg = _config(args)
    dataset = _dataset(args, cfg)
    split = _eval_split(dataset, cfg)
    net, det, _, manifest = load_checkpoint(args.checkpoint)
    kinds = tuple(s["kind"] for s in manifest["config"]["attack_specs"])
    grid, grid_kinds = cross_branch_grid(net, split, cfg.eval_suite(),
                                         trained_kinds=kinds)
    rows = []
    for tb in range(grid.shape[0]):
        for ib in range(grid.shape[1]):
            row = {"target_branch": tb, "inference_branch": ib}
            for a, kind in enumerate(grid_kinds):
                row[kind] = grid[tb, ib, a]
            rows.append(row)
    write_csv(args.out, rows, ["target_branch", "inference_branch"] + list(grid_kinds),
              _meta(cfg))
    print(f"wrote {args.out}: {grid.shape[0]}x{grid.shape[1]} branch grid")
    return 0


def cmd_sweep(args):
    cfg = _config(args)
    dataset = _dataset(args, cfg)
    split = _eval_split(dataset, cfg)
    pipe = _pipeline(args.checkpoint, args.mode, cfg)
    values = [float(v) for v in args.values.split(",") if v.strip()]
    base = cfg.eval_suite([args.kind])[0]
    curve = budget_sweep(pipe, split, args.kind, values, args.vary, base_spec=base)
    rows = [{"kind": args.kind, "vary": args.vary, "value": v, "accuracy": acc}
            for v, acc in curve]
    write_csv(args.out, rows, ["kind", "vary", "value", "accuracy"], _meta(cfg))
    print(f"wrote {args.out}: {len(rows)} sweep points")
    return 0


def cmd_blackbox(args):
    cfg = _config(args)
    dataset = _dataset(args, cfg)
    split = _eval_split(dataset, cfg)
    target = _pipeline(args.checkpoint, args.mode, cfg)
    substitute = _pipeline(args.substitute, "manual", cfg)
    report = blackbox_transfer(substitute, target, split, cfg.eval_suite())
    row = _report_row(Path(args.checkpoint).stem, args.mode, report)
    write_csv(args.out, [row],
              ["model", "mode", "clean", "pgd", "roa", "af", "spa", "mean", "union"],
              _meta(cfg))
    print(f"transfer union={report.union_accuracy:.2f} -> {args.out}")
    return 0


def cmd_sanity(args):
    cfg = _config(args)
    dataset = _dataset(args, cfg)
    split = _eval_split(dataset, cfg)
    pipe = _pipeline(args.checkpoint, args.mode, cfg)
    substitute = _pipeline(args.substitute, "manual", cfg)
    checks = sanity_check_suite(pipe, split, substitute, seed=cfg.seed)
    rows = [{"check": name, "passed": int(info["passed"])}
            for name, info in checks.items() if name != "all_passed"]
    rows.append({"check": "all_passed", "passed": int(checks["all_passed"])})
    write_csv(args.out, rows, ["check", "passed"], _meta(cfg))
    Path(args.out).with_suffix(".json").write_text(
        json.dumps(checks, indent=2, default=float) + "\n")
    print(f"all_passed={checks['all_passed']} -> {args.out}")
    return 0 if checks["all_passed"] else 1


def cmd_size(args):
    cfg = _config(args)
    rows = model_size_report(cfg.arch(), range(1, args.kmax + 1))
    write_csv(args.out, rows,
              ["K", "shared", "bn_per_branch", "multibn_total", "ensemble_total",
               "overhead_fraction"], _meta(cfg))
    print(f"wrote {args.out}: K=1..{args.kmax}")
    return 0


def cmd_preset(args):
    out = run_preset(args.name, args.out, seed=args.seed, profile=args.profile,
                     force=args.force, overrides=args.overrides,
                     verbose=args.verbose)
    print(f"preset {args.name} -> {out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="multibn",
        description="Multi-branch BN robustness laboratory for short video clips")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("data", help="generate the synthetic clip dataset")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_data)

    p = sub.add_parser("train", help="train one model")
    _add_config_args(p)
    p.add_argument("--scheme", required=True)
    p.add_argument("--data", help="dataset container (default: generate)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("attack", help="craft adversarial examples for a checkpoint")
    _add_config_args(p)
    p.add_argument("--kind", required=True, choices=EVAL_KINDS + ("adaptive",))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--mode", default="manual", choices=("manual", "auto"))
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("eval", help="run the full per-type evaluation")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--mode", default="manual", choices=("manual", "auto"))
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("grid", help="cross-branch crafting/inference grid")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_grid)

    p = sub.add_parser("sweep", help="accuracy vs budget curve")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--mode", default="manual", choices=("manual", "auto"))
    p.add_argument("--kind", required=True)
    p.add_argument("--vary", required=True, choices=("t_max", "bound"))
    p.add_argument("--values", required=True, help="comma-separated budgets")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("blackbox", help="transfer attack from a substitute model")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--substitute", required=True)
    p.add_argument("--data")
    p.add_argument("--mode", default="manual", choices=("manual", "auto"))
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_blackbox)

    p = sub.add_parser("sanity", help="attack-correctness checks")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--substitute", required=True)
    p.add_argument("--data")
    p.add_argument("--mode", default="manual", choices=("manual", "auto"))
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sanity)

    p = sub.add_parser("size", help="parameter-count report over K")
    _add_config_args(p)
    p.add_argument("--kmax", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_size)

    p = sub.add_parser("preset", help="run one bundled experiment")
    p.add_argument("name", choices=PRESETS)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--profile", default="desk", choices=tuple(PROFILES))
    p.add_argument("--force", action="store_true",
                   help="overwrite a directory holding a different run")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_preset)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
