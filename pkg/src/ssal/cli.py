"""Command-line orchestration.

Subcommands: gen-data, train-baseline, confusion, cluster, train-ssal,
predict, sweep, baseline-suite, convergence. Exit codes: 0 success,
1 invalid configuration or usage, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from . import harness, prediction
from .config import (ConfigError, apply_overrides, derive_seed, get_path,
                     load_config, parse_value, write_manifest)
from .grouping import (ConfusionMatrix, GroupMapping, GroupingConfig,
                       balanced_greedy_cluster, confusion_from_predictions,
                       distance_matrix)
from .model import AuxBranchSpec, build_network
from .training import train, write_metrics_csv


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _load_tree(args, required=True):
    if args.config:
        tree = load_config(args.config)
    elif required:
        raise ConfigError("this command requires --config")
    else:
        tree = harness.default_benchmark_config()
    apply_overrides(tree, args.override or [])
    if getattr(args, "seed", None) is not None:
        tree.setdefault("train", {})["seed"] = args.seed
    return tree


def _train_seed(tree, args):
    if getattr(args, "seed", None) is not None:
        return args.seed
    return get_path(tree, "train.seed", 0)


def _out_dir(args):
    os.makedirs(args.out_dir, exist_ok=True)
    return args.out_dir


def _build_from_tree(tree, sample_shape, class_count, branch_specs=(), seed=0):
    arch = harness.arch_from_config(tree, sample_shape, class_count)
    return build_network(arch, branch_specs, dtype=np.float32,
                         rng=np.random.default_rng(derive_seed(seed, "init")))


def _branch_specs_from_tree(tree):
    specs = []
    branches = tree.get("branch", {})
    for key in sorted(branches, key=lambda s: int(s)):
        b = branches[key]
        mapping = GroupMapping.load(b["mapping"])
        specs.append(AuxBranchSpec(b["attach"], str(b["layers"]).split(),
                                   mapping, float(b.get("loss_weight", 1.0))))
    return specs


def cmd_gen_data(args):
    tree = _load_tree(args)
    out = _out_dir(args)
    rest, holdout, test, planted = harness.dataset_from_config(tree)
    rest.save(out, "train")
    holdout.save(out, "holdout")
    test.save(out, "test")
    if planted is not None:
        planted.save(os.path.join(out, "planted_mapping.txt"))
    write_manifest(os.path.join(out, "manifest.txt"), tree)
    print(f"wrote {len(rest)} train / {len(holdout)} holdout / "
          f"{len(test)} test samples to {out}")
    return 0


def _train_common(args, branch_specs):
    tree = _load_tree(args)
    out = _out_dir(args)
    seed = _train_seed(tree, args)
    rest, holdout, test, _ = harness.dataset_from_config(tree)
    net = _build_from_tree(tree, rest.sample_shape, rest.class_count,
                           branch_specs, seed)
    cfg = harness.train_config_from_tree(tree, seed)
    trained = train(net, rest, cfg, eval_dataset=test, run_id=f"run-s{seed}")
    write_metrics_csv(os.path.join(out, "metrics.csv"), trained.log)
    ckpt.save_arrays(os.path.join(out, "checkpoint.bin"), net.named_arrays())
    manifest = {**tree, "run": {"seed": seed, "checkpoint_digest":
                ckpt.file_digest(os.path.join(out, "checkpoint.bin"))}}
    write_manifest(os.path.join(out, "manifest.txt"), manifest)
    final = trained.log[-1]
    print(f"final accuracy: main {final['acc_main']:.4f} "
          f"joint {final['acc_joint']:.4f}")
    return 0


def cmd_train_baseline(args):
    return _train_common(args, [])


def cmd_train_ssal(args):
    tree = _load_tree(args)
    specs = _branch_specs_from_tree(tree)
    if not specs:
        raise ConfigError("train-ssal needs at least one branch.N section")
    return _train_common(args, specs)


def cmd_confusion(args):
    tree = _load_tree(args)
    seed = _train_seed(tree, args)
    rest, holdout, test, _ = harness.dataset_from_config(tree)
    net = _build_from_tree(tree, rest.sample_shape, rest.class_count, (), seed)
    net.load_named_arrays(ckpt.load_arrays(args.checkpoint))
    result = prediction.predict(net, holdout.inputs,
                                prediction.CombinerConfig(mode="main_only"))
    confusion = confusion_from_predictions(result.main_labels, holdout.labels,
                                           holdout.class_count)
    confusion.save_csv(args.out)
    print(f"wrote {confusion.class_count}x{confusion.class_count} "
          f"confusion counts to {args.out}")
    return 0


def cmd_cluster(args):
    confusion = ConfusionMatrix.load_csv(args.matrix).normalize()
    distances = distance_matrix(confusion, args.criterion)
    mapping = balanced_greedy_cluster(
        distances, GroupingConfig(k=args.k, criterion=args.criterion,
                                  tie_break_seed=args.seed or 0))
    mapping.save(args.out)
    print(f"wrote {mapping.group_count}-group mapping "
          f"(sizes {mapping.group_sizes().tolist()}) to {args.out}")
    return 0


def cmd_predict(args):
    tree = _load_tree(args)
    seed = _train_seed(tree, args)
    rest, holdout, test, _ = harness.dataset_from_config(tree)
    specs = _branch_specs_from_tree(tree)
    net = _build_from_tree(tree, rest.sample_shape, rest.class_count,
                           specs, seed)
    net.load_named_arrays(ckpt.load_arrays(args.checkpoint))
    combiner_cfg = prediction.CombinerConfig(mode=args.mode, eta=args.eta)
    combiner = None
    if args.mode == "linear_combination":
        combiner = prediction.fit_linear_combiner(
            net, rest, prediction.CombinerConfig(
                mode="linear_combination", lc_seed=derive_seed(seed, "lc")))
    result = prediction.predict(net, test.inputs, combiner_cfg, combiner)
    prediction.write_prediction_csv(args.out, result, test.labels,
                                    net.group_mappings)
    accuracy = float((result.labels == test.labels).mean())
    print(f"{args.mode} accuracy {accuracy:.4f}; wrote {args.out}")
    return 0


def cmd_sweep(args):
    tree = _load_tree(args, required=False)
    values = [parse_value(v) for v in args.values.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    rows, csv_rows = harness.run_sweep(tree, args.axis, values, seeds,
                                       workers=args.workers,
                                       out_dir=_out_dir(args))
    print("\n".join(csv_rows[-len(values):]))
    return 0


def cmd_baseline_suite(args):
    tree = _load_tree(args, required=False)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    result = harness.run_baseline_suite(tree, seeds=seeds,
                                        workers=args.workers,
                                        out_dir=_out_dir(args))
    base = result.mean("baseline")
    for variant in harness.SUITE_VARIANTS:
        acc = result.accuracy(variant)
        if acc.size:
            print(f"{variant:12s} {acc.mean():.4f} ± {acc.std():.4f} "
                  f"(diff {acc.mean() - base:+.4f})")
    return 0


def cmd_convergence(args):
    curves = harness.curves_from_csv(args.curves)
    if args.threshold is not None:
        threshold = args.threshold
    else:
        finals = [c[-1] for (v, s), c in curves.items() if v == "baseline"]
        if not finals:
            raise ConfigError("no baseline curves found; pass --threshold")
        threshold = float(np.mean(finals))
    rows, summary = harness.convergence_report(curves, threshold)
    lines = harness.convergence_csv_rows(rows, summary)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    print(lines[-1])
    return 0


def build_parser():
    parser = _Parser(prog="ssal", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True, needs_out=True):
        p.add_argument("--config", required=False)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--override", action="append", default=[],
                       metavar="KEY=VALUE")
        if needs_out:
            p.add_argument("--out-dir", required=True)

    p = sub.add_parser("gen-data", help="generate a dataset from a config")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-baseline", help="train the branch-free classifier")
    common(p)
    p.set_defaults(func=cmd_train_baseline)

    p = sub.add_parser("confusion", help="held-out confusion matrix of a checkpoint")
    common(p, needs_out=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_confusion)

    p = sub.add_parser("cluster", help="balanced grouping from a confusion CSV")
    p.add_argument("--matrix", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--criterion", default="join_similar",
                   choices=("join_similar", "split_similar"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("train-ssal", help="train with auxiliary group branches")
    common(p)
    p.set_defaults(func=cmd_train_ssal)

    p = sub.add_parser("predict", help="predict with a chosen combiner mode")
    common(p, needs_out=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", default="joint_probability",
                   choices=prediction.MODES)
    p.add_argument("--eta", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("sweep", help="meta-parameter sweep")
    common(p, config_required=False)
    p.add_argument("--axis", required=True, choices=harness.SWEEP_AXES)
    p.add_argument("--values", required=True,
                   help="comma-separated axis values")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("baseline-suite", help="comparison roster on the benchmark")
    common(p, config_required=False)
    p.add_argument("--seeds", default=None)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_baseline_suite)

    p = sub.add_parser("convergence", help="epochs-to-threshold report")
    p.add_argument("--curves", required=True,
                   help="curves.csv from baseline-suite")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_convergence)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
