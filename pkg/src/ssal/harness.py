"""Benchmark orchestration: the desk-scale synthetic benchmark, the variant
roster (capacity controls, fusion controls, branch-equipped networks), the
meta-parameter sweep runner, and the convergence report.

The default benchmark is a fixed dataset: every variant and repetition seed
trains on the same synthetic draw, mirroring how repeated runs on a fixed
image dataset differ only in initialization. A repetition seed fans out into
init / data-order / tie-break streams via `derive_seed`, so any row is
reproducible from its manifest.
"""

from __future__ import annotations

import copy
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import prediction as P
from .config import ConfigError, derive_seed, dump_config, get_path
from .data import Dataset, ImageDatasetSpec, SyntheticSpec, generate_synthetic, load_cifar_binary
from .grouping import GroupingConfig
from .model import (AuxBranchSpec, NetworkArch, TrunkSpec, build_network,
                    variant_no_ssal)
from .optim import TriangularSchedule
from .training import (TrainConfig, derive_groupings, train)

SUITE_VARIANTS = ("baseline", "wide", "deep", "deepwide", "gap_concat",
                  "concat_fc", "linear_comb", "ssal_x1", "ssal_x3")


def default_benchmark_config():
    """The frozen desk benchmark: 16 classes in 4 planted superclusters."""
    return {
        "data": {
            "kind": "synthetic",
            "class_count": 16,
            "superclusters": 4,
            "train_per_class": 125,
            "test_per_class": 500,
            "input_dim": 16,
            "cluster_spread": 0.5,
            "within_spread": 1.0,
            "seed": 28,
            "holdout_fraction": 0.25,
        },
        "arch": {
            "trunk": {"b1": "fc:48 relu", "b2": "fc:48 relu", "b3": "fc:48 relu"},
            "main_head": "fc:16",
        },
        "train": {
            "epochs": 20,
            "batch_size": 64,
            "base_rate": 0.01,
            "peak_rate": 0.1,
            "peak_epoch": 8,
            "momentum": 0.9,
        },
        "ssal_x1": {
            "attach": "b2", "body": "fc:32 relu", "k": 4,
            "criterion": "join_similar", "loss_weight": 2.0,
        },
        "ssal_x3": {
            "attach": "b1 b2 b3", "body": "fc:32 relu", "k": "4 6 8",
            "criterion": "join_similar", "loss_weight": 0.6666666666666666,
        },
        "controls": {
            "wide_factor": 1.5,
            "deep_extra_blocks": 2,
            "concat_fc_hidden": 2048,
        },
        "eval": {"eta": 1.0},
        "suite": {"seeds": "0 1 2 3 4 5 6 7 8 9", "workers": 1},
    }


def _as_int_list(value):
    if isinstance(value, (int, float)):
        return [int(value)]
    if isinstance(value, list):
        return [int(v) for v in value]
    return [int(v) for v in str(value).split()]


def _as_str_list(value):
    if isinstance(value, list):
        return [str(v) for v in value]
    return str(value).split()


def synthetic_spec_from_config(tree):
    d = tree["data"]
    return SyntheticSpec(
        class_count=d["class_count"], supercluster_count=d["superclusters"],
        train_per_class=d["train_per_class"], test_per_class=d["test_per_class"],
        input_dim=d["input_dim"], cluster_spread=d["cluster_spread"],
        within_spread=d["within_spread"], seed=d["seed"])


def dataset_from_config(tree):
    """Returns (train, holdout, test, planted mapping or None)."""
    kind = get_path(tree, "data.kind", "synthetic")
    if kind == "synthetic":
        full_train, test, planted = generate_synthetic(synthetic_spec_from_config(tree))
    elif kind == "cifar_binary":
        d = tree["data"]
        spec = ImageDatasetSpec(
            path=d["path"], class_count=d["class_count"],
            train_files=_as_str_list(d.get("train_files", [])),
            test_files=_as_str_list(d.get("test_files", [])),
            height=d.get("height", 32), width=d.get("width", 32),
            channels=d.get("channels", 3))
        full_train, test = load_cifar_binary(spec)
        planted = None
    else:
        raise ConfigError(f"unknown data.kind {kind!r}")
    fraction = get_path(tree, "data.holdout_fraction", 0.25)
    rest, holdout = full_train.split_holdout(
        fraction, seed=derive_seed(get_path(tree, "data.seed", 0), "holdout"))
    return rest, holdout, test, planted


def arch_from_config(tree, sample_shape, class_count,
                     wide_factor=1.0, extra_blocks=0):
    blocks = []
    for i in range(extra_blocks):
        width = _scaled_width("fc:48", wide_factor)
        blocks.append((f"pre{i + 1}", [width, "relu"]))
    for name, layer_text in tree["arch"]["trunk"].items():
        layers = str(layer_text).split()
        if wide_factor != 1.0:
            layers = [_scaled_width(text, wide_factor) for text in layers]
        blocks.append((name, layers))
    head = str(tree["arch"]["main_head"]).split()
    return NetworkArch(input_shape=tuple(sample_shape), class_count=class_count,
                       trunk=TrunkSpec(blocks), main_head=head)


def _scaled_width(layer_text, factor):
    if layer_text.startswith("fc:"):
        return f"fc:{int(round(int(layer_text.split(':')[1]) * factor))}"
    if layer_text.startswith("conv:"):
        parts = layer_text.split(":")
        parts[1] = str(int(round(int(parts[1]) * factor)))
        return ":".join(parts)
    return layer_text


def train_config_from_tree(tree, seed):
    t = tree["train"]
    schedule = TriangularSchedule(t["base_rate"], t["peak_rate"],
                                  t["peak_epoch"], t["epochs"])
    return TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"],
                       schedule=schedule, momentum=t.get("momentum", 0.9),
                       seed=seed, eval_eta=get_path(tree, "eval.eta", 1.0))


@dataclass
class SuiteResult:
    rows: list          # one dict per (variant, seed)
    curves: dict        # (variant, seed) -> per-epoch accuracy list
    recoveries: dict    # seed -> bool, planted-grouping recovery at k = superclusters
    config: dict

    def accuracy(self, variant):
        return np.array([r["accuracy"] for r in self.rows if r["variant"] == variant])

    def mean(self, variant):
        return float(self.accuracy(variant).mean())


def _branch_specs_x1(tree, mappings_by_k):
    c = tree["ssal_x1"]
    body = str(c["body"]).split()
    mapping = mappings_by_k[int(c["k"])]
    return [AuxBranchSpec(c["attach"], body + [f"fc:{mapping.group_count}"],
                          mapping, float(c["loss_weight"]))]


def _branch_specs_x3(tree, mappings_by_k):
    c = tree["ssal_x3"]
    attaches = _as_str_list(c["attach"])
    ks = _as_int_list(c["k"])
    body = str(c["body"]).split()
    weight = float(c["loss_weight"])
    return [AuxBranchSpec(a, body + [f"fc:{mappings_by_k[k].group_count}"],
                          mappings_by_k[k], weight)
            for a, k in zip(attaches, ks)]


def run_suite_seed(tree, seed):
    """Train the full variant roster for one repetition seed.

    The baseline run also derives the group mappings (k = 4, 6, 8 analogues
    per the x1/x3 configs) from its held-out confusion; the planted-recovery
    flag compares the k = supercluster mapping against the generator's.
    """
    rest, holdout, test, planted = dataset_from_config(tree)
    sample_shape = rest.sample_shape
    c = rest.class_count
    eta = get_path(tree, "eval.eta", 1.0)
    rows, curves = [], {}

    def record(variant, trained, net, accuracy_key="acc_main"):
        final = trained.log[-1]
        rows.append({"variant": variant, "seed": seed,
                     "accuracy": final[accuracy_key],
                     "parameters": net.parameter_counts()["total"]})
        curves[(variant, seed)] = [r[accuracy_key] for r in trained.log]
        return trained

    def init_rng(tag="init"):
        return np.random.default_rng(derive_seed(seed, tag))

    cfg = lambda: train_config_from_tree(tree, seed)

    base_arch = arch_from_config(tree, sample_shape, c)
    baseline = build_network(base_arch, [], dtype=np.float32, rng=init_rng())
    record("baseline", train(baseline, rest, cfg(), eval_dataset=test,
                             run_id=f"baseline-s{seed}"), baseline)

    wide_factor = get_path(tree, "controls.wide_factor", 1.5)
    extra = get_path(tree, "controls.deep_extra_blocks", 2)
    for variant, factor, blocks in (("wide", wide_factor, 0),
                                    ("deep", 1.0, extra),
                                    ("deepwide", wide_factor, extra)):
        arch = arch_from_config(tree, sample_shape, c, factor, blocks)
        net = build_network(arch, [], dtype=np.float32, rng=init_rng())
        record(variant, train(net, rest, cfg(), eval_dataset=test,
                              run_id=f"{variant}-s{seed}"), net)

    wanted_ks = sorted(set(_as_int_list(tree["ssal_x1"]["k"])
                           + _as_int_list(tree["ssal_x3"]["k"])))
    criterion = tree["ssal_x1"]["criterion"]
    _, mappings = derive_groupings(baseline, holdout, [
        GroupingConfig(k=k, criterion=criterion,
                       tie_break_seed=derive_seed(seed, f"tie{k}"))
        for k in wanted_ks])
    mappings_by_k = dict(zip(wanted_ks, mappings))

    recovery = None
    if planted is not None and planted.group_count in mappings_by_k:
        derived = mappings_by_k[planted.group_count]
        recovery = ({frozenset(g) for g in derived.groups()}
                    == {frozenset(g) for g in planted.groups()})

    x1 = build_network(base_arch, _branch_specs_x1(tree, mappings_by_k),
                       dtype=np.float32, rng=init_rng())
    trained_x1 = record("ssal_x1", train(x1, rest, cfg(), eval_dataset=test,
                                         run_id=f"ssal_x1-s{seed}"), x1,
                        accuracy_key="acc_joint")

    combiner = P.fit_linear_combiner(
        x1, rest, P.CombinerConfig(mode="linear_combination",
                                   lc_seed=derive_seed(seed, "lc")))
    lc_result = P.predict(x1, test.inputs,
                          P.CombinerConfig(mode="linear_combination"), combiner)
    rows.append({"variant": "linear_comb", "seed": seed,
                 "accuracy": float((lc_result.lc_labels == test.labels).mean()),
                 "parameters": x1.parameter_counts()["total"]
                 + combiner.weight.data.size + combiner.bias.data.size})
    curves[("linear_comb", seed)] = curves[("ssal_x1", seed)]

    x3 = build_network(base_arch, _branch_specs_x3(tree, mappings_by_k),
                       dtype=np.float32, rng=init_rng())
    record("ssal_x3", train(x3, rest, cfg(), eval_dataset=test,
                            run_id=f"ssal_x3-s{seed}"), x3,
           accuracy_key="acc_joint")

    hidden = get_path(tree, "controls.concat_fc_hidden", 2048)
    for fusion in ("gap_concat", "concat_fc"):
        ctl = variant_no_ssal(x1, fusion, dtype=np.float32, hidden_width=hidden,
                              rng=init_rng("init-" + fusion))
        record(fusion, train(ctl, rest, cfg(), eval_dataset=test,
                             run_id=f"{fusion}-s{seed}"), ctl)

    return rows, curves, recovery


def _suite_seed_entry(args):
    tree, seed = args
    return seed, run_suite_seed(tree, seed)


def run_baseline_suite(tree=None, seeds=None, workers=None, out_dir=None):
    """The comparison roster over repetition seeds; returns a SuiteResult.

    Worker processes split by seed; every (variant, seed) run is independent
    and seeded, so the result does not depend on the worker count.
    """
    tree = copy.deepcopy(tree) if tree else default_benchmark_config()
    if seeds is None:
        seeds = _as_int_list(get_path(tree, "suite.seeds", "0 1 2"))
    if len(seeds) < 3:
        raise ConfigError("baseline suite needs at least 3 repetition seeds")
    if workers is None:
        workers = int(get_path(tree, "suite.workers", 1))
    all_rows, all_curves, recoveries = [], {}, {}
    jobs = [(tree, seed) for seed in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = dict(pool.map(_suite_seed_entry, jobs))
        for seed in seeds:
            rows, curves, recovery = results[seed]
            all_rows += rows
            all_curves.update(curves)
            recoveries[seed] = recovery
    else:
        for job in jobs:
            seed, (rows, curves, recovery) = _suite_seed_entry(job)
            all_rows += rows
            all_curves.update(curves)
            recoveries[seed] = recovery
    result = SuiteResult(all_rows, all_curves, recoveries, tree)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "suite.csv"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(suite_csv_rows(result)) + "\n")
        with open(os.path.join(out_dir, "curves.csv"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(curves_csv_rows(all_curves)) + "\n")
        with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as fh:
            fh.write(dump_config({**tree, "suite_seeds": " ".join(map(str, seeds))}))
    return result


def curves_csv_rows(curves):
    lines = ["variant,seed,epoch,accuracy"]
    for (variant, seed), curve in sorted(curves.items()):
        for epoch, acc in enumerate(curve):
            lines.append(f"{variant},{seed},{epoch},{acc:.10g}")
    return lines


def curves_from_csv(path):
    curves = {}
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            variant, seed, epoch, acc = line.strip().split(",")
            curves.setdefault((variant, int(seed)), []).append(float(acc))
    return curves


def suite_csv_rows(result):
    """Per-run rows then aggregate rows (mean, std, diff vs baseline)."""
    lines = ["variant,seed,accuracy,parameters"]
    for row in result.rows:
        lines.append(f"{row['variant']},{row['seed']},"
                     f"{row['accuracy']:.10g},{row['parameters']}")
    base_mean = result.mean("baseline")
    for variant in SUITE_VARIANTS:
        acc = result.accuracy(variant)
        if acc.size == 0:
            continue
        params = next(r["parameters"] for r in result.rows
                      if r["variant"] == variant)
        lines.append(f"{variant},mean±std,{acc.mean():.10g}±{acc.std():.10g},"
                     f"{params}")
        lines.append(f"{variant},diff_vs_baseline,"
                     f"{acc.mean() - base_mean:+.10g},{params}")
    return lines


def convergence_report(curves, threshold, variants=("baseline", "ssal_x1")):
    """First epoch each (variant, seed) curve reaches `threshold`, plus a
    summary counting seeds where the branch-equipped run got there first."""
    rows = []
    for (variant, seed), curve in sorted(curves.items()):
        if variant not in variants:
            continue
        first = next((i for i, acc in enumerate(curve) if acc >= threshold), None)
        rows.append({"variant": variant, "seed": seed,
                     "first_epoch": "never" if first is None else first})
    by_seed = {}
    for row in rows:
        by_seed.setdefault(row["seed"], {})[row["variant"]] = row["first_epoch"]
    wins = 0
    for seed, entry in by_seed.items():
        base = entry.get("baseline", "never")
        ssal = entry.get("ssal_x1", "never")
        if ssal != "never" and (base == "never" or ssal < base):
            wins += 1
    return rows, {"ssal_first_count": wins, "seeds": len(by_seed),
                  "threshold": threshold}


def convergence_csv_rows(rows, summary):
    lines = ["variant,seed,first_epoch"]
    for row in rows:
        lines.append(f"{row['variant']},{row['seed']},{row['first_epoch']}")
    lines.append(f"summary,ssal_first {summary['ssal_first_count']}/"
                 f"{summary['seeds']},threshold {summary['threshold']:.10g}")
    return lines


SWEEP_AXES = ("group_count", "criterion", "attachment_position",
              "branch_count", "eta")


def _sweep_run(args):
    tree, axis, value, seed = args
    tree = copy.deepcopy(tree)
    if "ssal_x1" not in tree:
        raise ConfigError("sweep config needs an ssal_x1 section")
    if axis == "branch_count" and int(value) == 3 and "ssal_x3" not in tree:
        raise ConfigError("branch_count sweep over 3 needs an ssal_x3 section")
    if axis == "group_count":
        tree["ssal_x1"]["k"] = int(value)
    elif axis == "criterion":
        tree["ssal_x1"]["criterion"] = str(value)
    elif axis == "attachment_position":
        tree["ssal_x1"]["attach"] = str(value)
    elif axis == "eta":
        tree["eval"]["eta"] = float(value)
    elif axis == "branch_count":
        pass  # handled below
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}; one of {SWEEP_AXES}")

    rest, holdout, test, planted = dataset_from_config(tree)
    arch = arch_from_config(tree, rest.sample_shape, rest.class_count)
    cfg = lambda: train_config_from_tree(tree, seed)
    baseline = build_network(arch, [], dtype=np.float32,
                             rng=np.random.default_rng(derive_seed(seed, "init")))
    tb = train(baseline, rest, cfg(), eval_dataset=test,
               run_id=f"{axis}-{value}-s{seed}-baseline")
    row = {"axis": axis, "value": value, "seed": seed,
           "acc_main_only": tb.log[-1]["acc_main"]}

    branch_count = int(value) if axis == "branch_count" else 1
    if branch_count == 0:
        row.update({"acc_joint": tb.log[-1]["acc_main"], "acc_branches": [],
                    "parameters": baseline.parameter_counts()["total"]})
        return row

    wanted_ks = set(_as_int_list(tree["ssal_x1"]["k"]))
    if axis == "branch_count" and branch_count == 3:
        wanted_ks |= set(_as_int_list(tree["ssal_x3"]["k"]))
    wanted_ks = sorted(wanted_ks)
    _, mappings = derive_groupings(baseline, holdout, [
        GroupingConfig(k=k, criterion=tree["ssal_x1"]["criterion"],
                       tie_break_seed=derive_seed(seed, f"tie{k}"))
        for k in wanted_ks])
    mappings_by_k = dict(zip(wanted_ks, mappings))
    if axis == "branch_count" and branch_count == 3:
        specs = _branch_specs_x3(tree, mappings_by_k)
    else:
        specs = _branch_specs_x1(tree, mappings_by_k)
    net = build_network(arch, specs, dtype=np.float32,
                        rng=np.random.default_rng(derive_seed(seed, "init")))
    trained = train(net, rest, cfg(), eval_dataset=test,
                    run_id=f"{axis}-{value}-s{seed}-ssal")
    final = trained.log[-1]
    row.update({"acc_main_only": final["acc_main"],
                "acc_joint": final["acc_joint"],
                "acc_branches": final["acc_g"],
                "parameters": net.parameter_counts()["total"]})
    return row


def run_sweep(tree, axis, values, seeds, workers=1, out_dir=None):
    """One row per (axis value, repetition seed) plus aggregate rows.

    A failed run is recorded (error column) and skipped; each value needs at
    least one successful repetition.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; one of {SWEEP_AXES}")
    if not values or len(seeds) < 1:
        raise ConfigError("sweep needs axis values and at least one seed")
    jobs = [(tree, axis, v, s) for v in values for s in seeds]
    rows = []
    failures = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for job, row in zip(jobs, pool.map(_sweep_run_safe, jobs)):
                (rows if "error" not in row else failures).append(row)
    else:
        for job in jobs:
            row = _sweep_run_safe(job)
            (rows if "error" not in row else failures).append(row)
    for value in values:
        good = [r for r in rows if r["value"] == value]
        if not good:
            raise RuntimeError(f"sweep value {value!r}: every repetition failed")
    csv_rows = sweep_csv_rows(axis, values, rows, failures)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, f"sweep_{axis}.csv"), "w",
                  encoding="utf-8") as fh:
            fh.write("\n".join(csv_rows) + "\n")
    return rows, csv_rows


def _sweep_run_safe(args):
    try:
        return _sweep_run(args)
    except Exception as exc:  # recorded, not fatal
        tree, axis, value, seed = args
        return {"axis": axis, "value": value, "seed": seed, "error": str(exc)}


SWEEP_BRANCH_COLUMNS = 3  # widest roster variant; keeps the schema fixed


def sweep_csv_rows(axis, values, rows, failures=()):
    """Schema-stable: fixed column set regardless of axis."""
    max_branches = SWEEP_BRANCH_COLUMNS
    header = ["axis", "value", "seed", "acc_main_only", "acc_joint"]
    header += [f"acc_branch_{i}" for i in range(max_branches)]
    header += ["parameters", "error"]
    lines = [",".join(header)]

    def fmt(row):
        cells = [row["axis"], str(row["value"]), str(row["seed"])]
        if "error" in row:
            cells += [""] * (2 + max_branches) + ["", row["error"].replace(",", ";")]
            return ",".join(cells)
        cells += [f"{row['acc_main_only']:.10g}", f"{row['acc_joint']:.10g}"]
        branch = [f"{a:.10g}" for a in row["acc_branches"]]
        branch += [""] * (max_branches - len(branch))
        cells += branch + [str(row["parameters"]), ""]
        return ",".join(cells)

    for row in rows:
        lines.append(fmt(row))
    for row in failures:
        lines.append(fmt(row))
    for value in values:
        subset = [r for r in rows if r["value"] == value]
        if not subset:
            continue
        joint = np.array([r["acc_joint"] for r in subset])
        main = np.array([r["acc_main_only"] for r in subset])
        cells = [axis, f"{value}", "mean±std",
                 f"{main.mean():.10g}±{main.std():.10g}",
                 f"{joint.mean():.10g}±{joint.std():.10g}"]
        cells += [""] * max_branches + [str(subset[0]["parameters"]), ""]
        lines.append(",".join(cells))
    return lines
