"""Joint training: weighted sum of per-head cross-entropies, mini-batch SGD
with the triangular schedule, and the two-phase pipeline (baseline >
confusion > grouping > branch-equipped retraining)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import prediction as P
from . import tensor as T
from .config import derive_seed
from .grouping import (balanced_greedy_cluster, confusion_from_predictions,
                       distance_matrix)
from .model import AuxBranchSpec, build_network
from .optim import SGD, TriangularSchedule, lr_at
from .tensor import Tensor


@dataclass
class LossWeights:
    lambda_main: float = 1.0
    lambda_branches: list = field(default_factory=list)

    def __post_init__(self):
        if self.lambda_main < 0 or any(w < 0 for w in self.lambda_branches):
            raise ValueError("loss weights must be >= 0")
        if self.lambda_main == 0 and not any(self.lambda_branches):
            raise ValueError("at least one loss weight must be positive")


def default_loss_weights(branch_count):
    """Main weight 1; branch weights 1/branch_count so auxiliary gradient
    mass stays bounded as branches are added."""
    if branch_count == 0:
        return LossWeights(1.0, [])
    return LossWeights(1.0, [1.0 / branch_count] * branch_count)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    schedule: TriangularSchedule = None
    momentum: float = 0.9
    seed: int = 0
    loss_weights: LossWeights | None = None
    eval_cadence: int = 1
    eval_eta: float = 1.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.schedule is None:
            self.schedule = TriangularSchedule(0.01, 0.1, 8, max(8, self.epochs))
        if self.schedule.total_epochs < self.epochs:
            raise ValueError("schedule covers fewer epochs than the run")


def joint_loss(main_logits, branch_logits, labels, group_labels, weights,
               mappings=None, return_parts=False):
    """lambda_main * CE(main) + sum_i lambda_i * CE(branch_i).

    With `mappings` given, each branch's group-label vector is checked to be
    exactly the mapping applied to `labels` (guards pipeline wiring). With
    zero branch weights this reduces exactly to the main loss.
    """
    if len(branch_logits) != len(weights.lambda_branches):
        raise ValueError(
            f"{len(branch_logits)} branch outputs vs "
            f"{len(weights.lambda_branches)} branch loss weights")
    if len(group_labels) != len(branch_logits):
        raise ValueError("one group-label vector per branch required")
    if mappings is not None:
        for i, (mapping, groups) in enumerate(zip(mappings, group_labels)):
            if not np.array_equal(mapping.apply(labels), np.asarray(groups)):
                raise ValueError(
                    f"branch {i}: group labels are not the mapping applied "
                    "to the class labels")
    main_ce = T.cross_entropy(main_logits, labels)
    parts = [float(main_ce.data)]
    loss = main_ce * weights.lambda_main
    for logits, groups, weight in zip(branch_logits, group_labels,
                                      weights.lambda_branches):
        branch_ce = T.cross_entropy(logits, groups)
        parts.append(float(branch_ce.data))
        if weight != 0:
            loss = loss + branch_ce * weight
    if return_parts:
        return loss, parts
    return loss


def evaluate(net, dataset, eta=1.0):
    """Eval-mode accuracies: main head, joint prediction, and per branch
    both the branch head's group accuracy and the accuracy of mapping the
    main prediction through the branch's grouping."""
    main, branches, _ = P.concatenated_outputs(net, dataset.inputs)
    labels = dataset.labels
    main_pred = main.argmax(axis=1)
    metrics = {"acc_main": float((main_pred == labels).mean())}
    mappings = net.group_mappings
    if branches:
        joint = P.joint_probability(main, branches, mappings, eta)
        metrics["acc_joint"] = float((joint.argmax(axis=1) == labels).mean())
    else:
        metrics["acc_joint"] = metrics["acc_main"]
    metrics["acc_g"] = []
    metrics["acc_gmap"] = []
    for probs, mapping in zip(branches, mappings):
        true_groups = mapping.apply(labels)
        metrics["acc_g"].append(float((probs.argmax(axis=1) == true_groups).mean()))
        metrics["acc_gmap"].append(
            float((mapping.apply(main_pred) == true_groups).mean()))
    return metrics


@dataclass
class TrainedModel:
    net: object
    log: list           # one dict per evaluated epoch
    config: TrainConfig

    def final_metric(self, key):
        return self.log[-1][key]


def train(net, dataset, config, eval_dataset=None, run_id="run"):
    """One optimizer step per mini-batch over the joint loss.

    The per-epoch log records learning rate, loss components, and the
    accuracy metrics from `evaluate` on `eval_dataset` (train split if no
    eval split is given). Aborts on a non-finite loss, naming the epoch and
    batch. A branch-free network trains exactly like a plain single-loss
    classifier.
    """
    if dataset.class_count != net.class_count:
        raise ValueError(
            f"dataset has {dataset.class_count} classes, network predicts "
            f"{net.class_count}")
    mappings = net.group_mappings
    for i, mapping in enumerate(mappings):
        if mapping.class_count != dataset.class_count:
            raise ValueError(f"branch {i} mapping covers {mapping.class_count} "
                             f"classes, dataset has {dataset.class_count}")
    if config.loss_weights is not None:
        weights = config.loss_weights
    elif net.loss_weights:
        weights = LossWeights(1.0, list(net.loss_weights))
    else:
        weights = default_loss_weights(len(mappings))
    if len(weights.lambda_branches) != len(mappings):
        raise ValueError("loss weights do not match the branch count")

    params = net.parameters()
    dtype = params[0].dtype if params else np.float64
    opt = SGD(params, config.momentum)
    data_rng = np.random.default_rng(derive_seed(config.seed, "data-order"))
    group_arrays = [m.apply(dataset.labels) for m in mappings]
    eval_split = eval_dataset if eval_dataset is not None else dataset

    n = len(dataset)
    log = []
    for epoch in range(config.epochs):
        rate = lr_at(config.schedule, epoch)
        order = data_rng.permutation(n)
        loss_sums = np.zeros(1 + len(mappings))
        batches = 0
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            x = Tensor(dataset.inputs[idx].astype(dtype, copy=False))
            main_logits, branch_logits = net.forward(x, "train")
            loss, parts = joint_loss(
                main_logits, branch_logits, dataset.labels[idx],
                [g[idx] for g in group_arrays], weights, return_parts=True)
            if not np.isfinite(loss.data):
                raise FloatingPointError(
                    f"{run_id}: non-finite loss at epoch {epoch}, "
                    f"batch {lo // config.batch_size}")
            opt.zero_grad()
            T.backward(loss)
            opt.step(rate)
            loss_sums += parts
            batches += 1
        if epoch % config.eval_cadence == 0 or epoch == config.epochs - 1:
            metrics = evaluate(net, eval_split, eta=config.eval_eta)
            mean_parts = loss_sums / batches
            row = {"run_id": run_id, "epoch": epoch, "lr": rate,
                   "loss_total": float(weights.lambda_main * mean_parts[0]
                                       + np.dot(weights.lambda_branches,
                                                mean_parts[1:])),
                   "loss_main": float(mean_parts[0]),
                   "loss_g": [float(v) for v in mean_parts[1:]],
                   **metrics}
            log.append(row)
    return TrainedModel(net, log, config)


def metrics_csv_rows(log):
    """Flatten epoch logs to a schema-stable CSV (header + data rows)."""
    branch_count = len(log[0]["acc_g"]) if log else 0
    header = ["run_id", "epoch", "lr", "loss_total", "loss_main"]
    header += [f"loss_g_{i}" for i in range(branch_count)]
    header += ["acc_main"]
    header += [f"acc_g_{i}" for i in range(branch_count)]
    header += [f"acc_gmap_{i}" for i in range(branch_count)]
    header += ["acc_joint"]
    rows = [",".join(header)]
    for row in log:
        cells = [str(row["run_id"]), str(row["epoch"]), f"{row['lr']:.10g}",
                 f"{row['loss_total']:.10g}", f"{row['loss_main']:.10g}"]
        cells += [f"{v:.10g}" for v in row["loss_g"]]
        cells += [f"{row['acc_main']:.10g}"]
        cells += [f"{v:.10g}" for v in row["acc_g"]]
        cells += [f"{v:.10g}" for v in row["acc_gmap"]]
        cells += [f"{row['acc_joint']:.10g}"]
        rows.append(",".join(cells))
    return rows


def write_metrics_csv(path, log):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(metrics_csv_rows(log)) + "\n")


@dataclass
class BranchPlan:
    """Branch architecture before its group mapping exists: the final
    linear layer (width = group count) is appended once the mapping is
    derived."""

    attachment_point: str
    body_layers: list
    loss_weight: float = 1.0


def derive_groupings(net, holdout, grouping_configs):
    """Confusion matrix of `net` on the held-out split, then one balanced
    mapping per grouping config."""
    result = P.predict(net, holdout.inputs,
                       P.CombinerConfig(mode="main_only"))
    confusion = confusion_from_predictions(
        result.main_labels, holdout.labels, holdout.class_count).normalize()
    mappings = []
    for gc in grouping_configs:
        distances = distance_matrix(confusion, gc.criterion)
        mappings.append(balanced_greedy_cluster(distances, gc))
    return confusion, mappings


def two_phase_pipeline(arch, branch_plans, grouping_configs, train_set,
                       holdout_set, config, eval_set=None, dtype=np.float32):
    """Train a branch-free baseline, derive groupings from its held-out
    confusion, then train the branch-equipped network.

    Returns (mappings, trained model, report). With no grouping configs the
    pipeline degenerates to baseline training. The report binds each
    derived mapping to the baseline and dataset provenance.
    """
    if holdout_set is None or len(holdout_set) == 0:
        raise ValueError("two-phase pipeline requires a held-out split")
    if grouping_configs and len(branch_plans) != len(grouping_configs):
        raise ValueError("need exactly one branch plan per grouping config")

    baseline = build_network(arch, [], dtype=dtype,
                             rng=np.random.default_rng(
                                 derive_seed(config.seed, "init")))
    trained_baseline = train(baseline, train_set, config,
                             eval_dataset=eval_set, run_id="baseline")
    report = {"baseline": {"final": trained_baseline.log[-1],
                           "parameters": baseline.parameter_counts()["total"]}}
    if not grouping_configs:
        return [], trained_baseline, report

    confusion, mappings = derive_groupings(baseline, holdout_set, grouping_configs)
    report["confusion_digest"] = confusion.digest()
    report["groupings"] = [
        {"k": m.group_count, "criterion": m.provenance.get("criterion"),
         "seed": m.provenance.get("seed"),
         "source_digest": m.provenance.get("source_digest")}
        for m in mappings]

    branch_specs = [
        AuxBranchSpec(plan.attachment_point,
                      list(plan.body_layers) + [f"fc:{m.group_count}"],
                      m, plan.loss_weight)
        for plan, m in zip(branch_plans, mappings)]
    ssal_net = build_network(arch, branch_specs, dtype=dtype,
                             rng=np.random.default_rng(
                                 derive_seed(config.seed, "init")))
    trained = train(ssal_net, train_set, config, eval_dataset=eval_set,
                    run_id="ssal")
    report["ssal"] = {"final": trained.log[-1],
                      "parameters": ssal_net.parameter_counts()["total"]}
    return mappings, trained, report
