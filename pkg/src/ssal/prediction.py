"""Fusing main-head and branch outputs into a final prediction.

Three modes: the main head alone, the joint probability (per-class score
f_i * prod_b g_b[group_b(i)]^eta, renormalized), and a linear combiner
trained on the concatenated frozen outputs. All three are computable from
one forward pass. The combiner math is pure; fitting the linear combiner
follows the trainer's single-executor contract.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .optim import SGD, TriangularSchedule, lr_at
from .tensor import Tensor

MODES = ("main_only", "joint_probability", "linear_combination")
RENORMALIZATIONS = ("sum_normalize", "softmax")


@dataclass
class CombinerConfig:
    mode: str = "joint_probability"
    eta: float = 1.0
    renormalization: str = "sum_normalize"
    lc_epochs: int = 5
    lc_batch_size: int = 64
    lc_base_rate: float = 0.01
    lc_peak_rate: float = 0.1
    lc_seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not (0 < self.eta <= 1):
            raise ValueError(f"eta must lie in (0, 1], got {self.eta}")
        if self.renormalization not in RENORMALIZATIONS:
            raise ValueError(f"renormalization must be one of {RENORMALIZATIONS}")


def joint_probability(main_probs, branch_probs, mappings, eta,
                      renormalization="sum_normalize"):
    """Joint per-class distribution from main and branch distributions.

    Every class score is the main probability times each branch's
    probability for that class's group, the branch factors raised to `eta`.
    Both renormalizations are order-preserving, so the argmax does not
    depend on which one is configured.
    """
    if not (0 < eta <= 1):
        raise ValueError(f"eta must lie in (0, 1], got {eta}")
    if renormalization not in RENORMALIZATIONS:
        raise ValueError(f"renormalization must be one of {RENORMALIZATIONS}")
    main = np.asarray(main_probs, dtype=np.float64)
    squeeze = main.ndim == 1
    if squeeze:
        main = main[None, :]
    c = main.shape[1]
    if len(branch_probs) != len(mappings):
        raise ValueError("one group mapping per branch output required")
    scores = main.copy()
    for probs, mapping in zip(branch_probs, mappings):
        probs = np.asarray(probs, dtype=np.float64)
        if squeeze and probs.ndim == 1:
            probs = probs[None, :]
        if mapping.class_count != c:
            raise ValueError(
                f"mapping covers {mapping.class_count} classes, main head has {c}")
        if probs.shape[1] != mapping.group_count:
            raise ValueError(
                f"branch width {probs.shape[1]} != mapping group count "
                f"{mapping.group_count}")
        scores *= probs[:, mapping.class_to_group] ** eta
    if renormalization == "sum_normalize":
        out = scores / scores.sum(axis=1, keepdims=True)
    else:
        shifted = scores - scores.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=1, keepdims=True)
    return out[0] if squeeze else out


class LinearCombiner:
    """Linear map from concatenated head distributions to class logits.

    Identity-initialized on the main-head block, so before fitting it
    reproduces the main head's argmax exactly.
    """

    def __init__(self, class_count, branch_widths):
        in_width = class_count + sum(branch_widths)
        self.class_count = class_count
        self.branch_widths = list(branch_widths)
        weight = np.zeros((in_width, class_count), dtype=np.float64)
        weight[:class_count, :] = np.eye(class_count)
        self.weight = Tensor(weight, requires_grad=True, name="combiner.weight")
        self.bias = Tensor(np.zeros(class_count, dtype=np.float64),
                           requires_grad=True, name="combiner.bias")
        self.fitted = False

    def logits(self, concatenated):
        return concatenated @ self.weight.data + self.bias.data

    def probabilities(self, concatenated):
        logits = self.logits(concatenated)
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)


def concatenated_outputs(net, inputs, batch_size=256):
    """Frozen eval-mode forward: returns (main_probs, [branch_probs], concat)."""
    main_parts, branch_parts = [], None
    for lo in range(0, len(inputs), batch_size):
        x = Tensor(inputs[lo:lo + batch_size])
        main_logits, branch_logits = net.forward(x, "eval")
        main_parts.append(T.softmax(main_logits, axis=1).data)
        if branch_parts is None:
            branch_parts = [[] for _ in branch_logits]
        for part, logits in zip(branch_parts, branch_logits):
            part.append(T.softmax(logits, axis=1).data)
    main = np.concatenate(main_parts)
    branches = [np.concatenate(p) for p in (branch_parts or [])]
    concat = np.concatenate([main] + branches, axis=1) if branches else main
    return main, branches, concat


def fit_linear_combiner(net, dataset, config=None):
    """Train the linear combiner on a frozen network's outputs.

    The network is only run in eval mode; its parameters are never touched.
    """
    config = config or CombinerConfig(mode="linear_combination")
    if len(dataset) == 0:
        raise ValueError("cannot fit a combiner on an empty split")
    main, branches, concat = concatenated_outputs(net, dataset.inputs)
    combiner = LinearCombiner(net.class_count, [b.shape[1] for b in branches])

    schedule = TriangularSchedule(
        base_rate=config.lc_base_rate, peak_rate=config.lc_peak_rate,
        peak_epoch=max(1, config.lc_epochs // 2), total_epochs=config.lc_epochs)
    opt = SGD([combiner.weight, combiner.bias], momentum=0.9)
    rng = np.random.default_rng(config.lc_seed)
    n = len(dataset)
    for epoch in range(config.lc_epochs):
        rate = lr_at(schedule, epoch)
        order = rng.permutation(n)
        for lo in range(0, n, config.lc_batch_size):
            idx = order[lo:lo + config.lc_batch_size]
            x = Tensor(concat[idx])
            logits = T.matmul(x, combiner.weight) + combiner.bias
            loss = T.cross_entropy(logits, dataset.labels[idx])
            opt.zero_grad()
            T.backward(loss)
            opt.step(rate)
    combiner.fitted = True
    return combiner


@dataclass
class PredictionResult:
    labels: np.ndarray            # primary-mode prediction
    main_probs: np.ndarray
    joint_probs: np.ndarray
    lc_probs: np.ndarray | None
    main_labels: np.ndarray
    joint_labels: np.ndarray
    lc_labels: np.ndarray | None
    group_labels: list            # per-branch argmax over group distributions


def predict(net, inputs, combiner_config, linear_combiner=None):
    """Per-sample labels and distributions for every computable mode."""
    if combiner_config.mode == "linear_combination" and (
            linear_combiner is None or not linear_combiner.fitted):
        raise ValueError("linear_combination mode requires a fitted combiner")
    main, branches, concat = concatenated_outputs(net, inputs)
    if branches:
        joint = joint_probability(main, branches, net.group_mappings,
                                  combiner_config.eta,
                                  combiner_config.renormalization)
    else:
        joint = main
    lc = None
    if linear_combiner is not None and linear_combiner.fitted:
        lc = linear_combiner.probabilities(concat)
    by_mode = {"main_only": main, "joint_probability": joint,
               "linear_combination": lc}
    primary = by_mode[combiner_config.mode]
    return PredictionResult(
        labels=primary.argmax(axis=1),
        main_probs=main, joint_probs=joint, lc_probs=lc,
        main_labels=main.argmax(axis=1),
        joint_labels=joint.argmax(axis=1),
        lc_labels=None if lc is None else lc.argmax(axis=1),
        group_labels=[b.argmax(axis=1) for b in branches])


def write_prediction_csv(path, result, true_labels, mappings):
    """Prediction dump: one row per sample with per-branch group context."""
    true_labels = np.asarray(true_labels)
    header = ["sample_id", "true_label", "main_pred", "joint_pred", "lc_pred"]
    for b in range(len(mappings)):
        header += [f"group_pred_{b}", f"true_group_{b}"]
    rows = [",".join(header)]
    lc_labels = result.lc_labels
    for i in range(len(true_labels)):
        row = [str(i), str(int(true_labels[i])),
               str(int(result.main_labels[i])), str(int(result.joint_labels[i])),
               "" if lc_labels is None else str(int(lc_labels[i]))]
        for b, mapping in enumerate(mappings):
            row.append(str(int(result.group_labels[b][i])))
            row.append(str(int(mapping.class_to_group[true_labels[i]])))
        rows.append(",".join(row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(rows) + "\n")
