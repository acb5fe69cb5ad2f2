import math

import numpy as np
import pytest

from ssal import tensor as T
from ssal.config import derive_seed
from ssal.data import Dataset, SyntheticSpec, generate_synthetic
from ssal.grouping import GroupMapping, GroupingConfig
from ssal.model import AuxBranchSpec, NetworkArch, TrunkSpec, build_network
from ssal.optim import SGD, TriangularSchedule, lr_at
from ssal.tensor import Tensor
from ssal.training import (BranchPlan, LossWeights, TrainConfig,
                           default_loss_weights, joint_loss, metrics_csv_rows,
                           train, two_phase_pipeline)


def mapping(c, k):
    return GroupMapping(np.arange(c) % k, k)


def small_arch(input_dim=6, class_count=4):
    return NetworkArch(
        input_shape=(input_dim,), class_count=class_count,
        trunk=TrunkSpec([("b1", ["fc:12", "relu"]), ("b2", ["fc:12", "relu"])]),
        main_head=[f"fc:{class_count}"])


def toy_dataset(seed=0, n_per_class=40, class_count=4, dim=6, spread=0.4):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(class_count, dim)) * 2.0
    inputs = np.concatenate([centers[c] + rng.normal(size=(n_per_class, dim)) * spread
                             for c in range(class_count)])
    labels = np.repeat(np.arange(class_count), n_per_class)
    return Dataset(inputs, labels, class_count)


# -- joint loss ----------------------------------------------------------------

def test_joint_loss_reduces_to_main_with_zero_branch_weight():
    logits = Tensor(np.random.default_rng(0).normal(size=(4, 3)))
    branch = Tensor(np.random.default_rng(1).normal(size=(4, 2)))
    labels = np.array([0, 1, 2, 0])
    groups = np.array([0, 1, 0, 0])
    weights = LossWeights(1.0, [0.0])
    joint = joint_loss(logits, [branch], labels, [groups], weights)
    main_only = T.cross_entropy(Tensor(logits.data), labels)
    assert float(joint.data) == pytest.approx(float(main_only.data), abs=1e-15)


def test_joint_loss_additivity_of_equal_parts():
    logits = Tensor(np.zeros((1, 2)))
    branch = Tensor(np.zeros((1, 2)))
    weights = LossWeights(1.0, [1.0])
    joint = joint_loss(logits, [branch], np.array([0]), [np.array([1])], weights)
    assert float(joint.data) == pytest.approx(2 * math.log(2), abs=1e-12)


def test_joint_loss_weighted_sum_arithmetic():
    # CE parts of 1.0 and 0.25 with weights 0.5 and 2.0 -> 1.0
    main = Tensor(np.array([[0.0, _logit_gap_for(1.0)]]))
    branch = Tensor(np.array([[0.0, _logit_gap_for(0.25)]]))
    weights = LossWeights(0.5, [2.0])
    joint = joint_loss(main, [branch], np.array([0]), [np.array([0])], weights)
    assert float(joint.data) == pytest.approx(1.0, abs=1e-12)


def _logit_gap_for(ce_value):
    # CE for target 0 on logits [0, g] is log(1 + e^g); invert for g
    return math.log(math.expm1(ce_value))


def test_joint_loss_guards_group_label_consistency():
    m = mapping(4, 2)
    logits = Tensor(np.zeros((3, 4)))
    branch = Tensor(np.zeros((3, 2)))
    labels = np.array([0, 1, 2])
    wrong = np.array([1, 1, 0])
    with pytest.raises(ValueError, match="mapping applied"):
        joint_loss(logits, [branch], labels, [wrong], LossWeights(1.0, [1.0]),
                   mappings=[m])
    correct = m.apply(labels)
    joint_loss(logits, [branch], labels, [correct], LossWeights(1.0, [1.0]),
               mappings=[m])


def test_loss_weight_validation():
    with pytest.raises(ValueError):
        LossWeights(-0.1, [])
    with pytest.raises(ValueError):
        LossWeights(0.0, [0.0])
    assert default_loss_weights(4).lambda_branches == [0.25] * 4


# -- shared-gradient additivity -------------------------------------------------

def test_shared_gradient_additivity_two_branch_toy():
    for seed in range(3):
        arch = small_arch()
        specs = [AuxBranchSpec("b1", ["fc:6", "relu", "fc:2"], mapping(4, 2)),
                 AuxBranchSpec("b2", ["fc:6", "relu", "fc:2"], mapping(4, 2))]
        net = build_network(arch, specs, seed=seed, dtype=np.float64)
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(8, 6))
        labels = rng.integers(0, 4, size=8)
        groups = [m.apply(labels) for m in net.group_mappings]
        lam = (1.0, 0.6, 1.7)

        def trunk_grads(weights):
            for p in net.parameters():
                p.zero_grad()
            main, branches = net.forward(Tensor(x), "train")
            loss = T.cross_entropy(main, labels) * weights[0]
            for logits, g, w in zip(branches, groups, weights[1:]):
                loss = loss + T.cross_entropy(logits, g) * w
            T.backward(loss)
            return [p.grad.copy() for p in net.trunk_parameters()]

        joint = trunk_grads(lam)
        singles = [trunk_grads((1.0, 0.0, 0.0)),
                   trunk_grads((0.0, 1.0, 0.0)),
                   trunk_grads((0.0, 0.0, 1.0))]
        for i, j in enumerate(joint):
            expected = (lam[0] * singles[0][i] + lam[1] * singles[1][i]
                        + lam[2] * singles[2][i])
            scale = max(np.abs(expected).max(), 1e-9)
            assert np.abs(j - expected).max() / scale < 1e-6


# -- training loop --------------------------------------------------------------

def run_cfg(seed=0, epochs=3, rate=(0.01, 0.05)):
    return TrainConfig(epochs=epochs, batch_size=16, seed=seed,
                       schedule=TriangularSchedule(rate[0], rate[1],
                                                   max(1, epochs // 2), epochs))


def test_zero_branch_training_equals_manual_single_loss_loop():
    data = toy_dataset()
    arch = small_arch()
    net = build_network(arch, [], seed=5, dtype=np.float64)
    trained = train(net, data, run_cfg(seed=9), run_id="a")

    clone = build_network(arch, [], seed=5, dtype=np.float64)
    opt = SGD(clone.parameters(), momentum=0.9)
    rng = np.random.default_rng(derive_seed(9, "data-order"))
    cfg = run_cfg(seed=9)
    for epoch in range(cfg.epochs):
        rate = lr_at(cfg.schedule, epoch)
        order = rng.permutation(len(data))
        for lo in range(0, len(data), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            main, _ = clone.forward(Tensor(data.inputs[idx]), "train")
            loss = T.cross_entropy(main, data.labels[idx]) * 1.0
            opt.zero_grad()
            T.backward(loss)
            opt.step(rate)
    for a, b in zip(net.parameters(), clone.parameters()):
        assert np.array_equal(a.data, b.data)


def test_linearly_separable_toy_reaches_perfect_accuracy():
    rng = np.random.default_rng(2)
    centers = np.array([[-4.0] * 4, [4.0] * 4])
    inputs = np.concatenate([centers[c] + rng.normal(size=(40, 4))
                             for c in (0, 1)])
    labels = np.repeat([0, 1], 40)
    data = Dataset(inputs, labels, 2)
    # closed-form oracle: the midpoint hyperplane separates the classes
    w = centers[1] - centers[0]
    oracle = (inputs @ w > 0).astype(int)
    assert (oracle == labels).mean() == 1.0
    arch = NetworkArch(input_shape=(4,), class_count=2,
                       trunk=TrunkSpec([("b1", ["fc:8", "relu"])]),
                       main_head=["fc:2"])
    net = build_network(arch, [], seed=0, dtype=np.float64)
    # 1-epoch budget of about 50 steps at batch 2
    cfg = TrainConfig(epochs=1, batch_size=2, seed=0,
                      schedule=TriangularSchedule(0.05, 0.1, 1, 1))
    trained = train(net, data, cfg, run_id="sep")
    assert trained.log[-1]["acc_main"] == 1.0


def test_training_loss_decreases_early_with_small_rate():
    wins = 0
    for seed in range(10):
        data = toy_dataset(seed=seed, spread=1.0)
        net = build_network(small_arch(), [AuxBranchSpec(
            "b1", ["fc:6", "relu", "fc:2"], mapping(4, 2))], seed=seed,
            dtype=np.float64)
        cfg = TrainConfig(epochs=5, batch_size=16, seed=seed,
                          schedule=TriangularSchedule(1e-3, 1e-3, 1, 5))
        trained = train(net, data, cfg, run_id=f"mono-{seed}")
        losses = [row["loss_total"] for row in trained.log]
        wins += losses[-1] < losses[0]
    assert wins >= 9


def test_branch_training_logs_group_metrics_and_bound():
    data = toy_dataset()
    m = mapping(4, 2)
    net = build_network(small_arch(), [AuxBranchSpec(
        "b1", ["fc:6", "relu", "fc:2"], m)], seed=1, dtype=np.float64)
    trained = train(net, data, run_cfg(), run_id="g")
    for row in trained.log:
        assert len(row["acc_g"]) == 1 and len(row["acc_gmap"]) == 1
        best = max(row["acc_g"][0], row["acc_gmap"][0])
        assert best >= row["acc_gmap"][0]


def test_train_rejects_mismatched_class_counts():
    data = toy_dataset(class_count=4)
    arch = small_arch(class_count=4)
    bad_mapping = GroupMapping(np.arange(5) % 2, 2)
    net = build_network(arch, [AuxBranchSpec("b1", ["fc:6", "relu", "fc:2"],
                                             bad_mapping)], seed=0)
    with pytest.raises(ValueError, match="classes"):
        train(net, data, run_cfg())
    other = Dataset(np.zeros((6, 6)), np.zeros(6, dtype=int), 3)
    bare = build_network(arch, [], seed=0)
    with pytest.raises(ValueError, match="classes"):
        train(bare, other, run_cfg())


def test_nan_loss_aborts_with_context():
    data = toy_dataset()
    net = build_network(small_arch(), [], seed=0, dtype=np.float64)
    # logits overflow to +-inf, so the fused cross-entropy turns NaN
    weight = net.head_stack.layers[0].weight.data
    weight[...] = np.where(np.arange(weight.shape[1]) % 2, 1e308, -1e308)
    with np.errstate(invalid="ignore", over="ignore"):
        with pytest.raises(FloatingPointError, match="epoch 0"):
            train(net, data, run_cfg(), run_id="boom")


def test_schedule_must_cover_epochs():
    with pytest.raises(ValueError, match="covers fewer"):
        TrainConfig(epochs=30, batch_size=8,
                    schedule=TriangularSchedule(0.01, 0.1, 8, 20))


def test_metrics_csv_schema_stable():
    data = toy_dataset()
    net = build_network(small_arch(), [AuxBranchSpec(
        "b1", ["fc:6", "relu", "fc:2"], mapping(4, 2))], seed=1, dtype=np.float64)
    trained = train(net, data, run_cfg(), run_id="csv")
    rows = metrics_csv_rows(trained.log)
    header = rows[0].split(",")
    assert header == ["run_id", "epoch", "lr", "loss_total", "loss_main",
                      "loss_g_0", "acc_main", "acc_g_0", "acc_gmap_0",
                      "acc_joint"]
    assert all(len(r.split(",")) == len(header) for r in rows[1:])


def test_deterministic_trajectories_across_runs():
    data = toy_dataset()
    results = []
    for _ in range(2):
        net = build_network(small_arch(), [], seed=3, dtype=np.float32)
        train(net, data, run_cfg(seed=4), run_id="det")
        results.append(np.concatenate([p.data.ravel() for p in net.parameters()]))
    assert np.array_equal(results[0], results[1])


# -- two-phase pipeline ----------------------------------------------------------

def synth(seed=0):
    spec = SyntheticSpec(class_count=8, supercluster_count=2, train_per_class=40,
                         test_per_class=20, input_dim=8, cluster_spread=0.6,
                         within_spread=0.9, seed=seed)
    return generate_synthetic(spec)


def pipeline_arch():
    return NetworkArch(
        input_shape=(8,), class_count=8,
        trunk=TrunkSpec([("b1", ["fc:24", "relu"]), ("b2", ["fc:24", "relu"])]),
        main_head=["fc:8"])


def test_pipeline_without_groupings_is_baseline_only():
    train_set, test_set, _ = synth()
    rest, hold = train_set.split_holdout(0.2, seed=1)
    mappings, trained, report = two_phase_pipeline(
        pipeline_arch(), [], [], rest, hold, run_cfg(epochs=2), eval_set=test_set)
    assert mappings == []
    assert trained.net.branch_count == 0
    assert "groupings" not in report


def test_pipeline_requires_holdout():
    train_set, _, _ = synth()
    with pytest.raises(ValueError, match="held-out"):
        two_phase_pipeline(pipeline_arch(), [], [], train_set, None, run_cfg())


def test_pipeline_recovers_planted_superclusters():
    train_set, test_set, planted = synth(seed=11)
    rest, hold = train_set.split_holdout(0.25, seed=2)
    cfg = TrainConfig(epochs=8, batch_size=32, seed=5,
                      schedule=TriangularSchedule(0.02, 0.15, 3, 8))
    mappings, trained, report = two_phase_pipeline(
        pipeline_arch(), [BranchPlan("b1", ["fc:12", "relu"])],
        [GroupingConfig(k=2, criterion="join_similar", tie_break_seed=3)],
        rest, hold, cfg, eval_set=test_set)
    derived = {frozenset(g) for g in mappings[0].groups()}
    wanted = {frozenset(g) for g in planted.groups()}
    assert derived == wanted
    assert report["groupings"][0]["k"] == 2
    assert "confusion_digest" in report


def test_pipeline_rerun_is_identical():
    train_set, test_set, _ = synth(seed=3)
    rest, hold = train_set.split_holdout(0.2, seed=1)
    outs = []
    for _ in range(2):
        mappings, trained, report = two_phase_pipeline(
            pipeline_arch(), [BranchPlan("b1", ["fc:12", "relu"])],
            [GroupingConfig(k=2, criterion="join_similar", tie_break_seed=4)],
            rest, hold, run_cfg(epochs=2, seed=8), eval_set=test_set)
        outs.append((mappings[0].class_to_group.tolist(),
                     trained.log[-1]["acc_main"], trained.log[-1]["acc_joint"]))
    assert outs[0] == outs[1]


def test_pipeline_branch_plan_count_must_match():
    train_set, _, _ = synth()
    rest, hold = train_set.split_holdout(0.2, seed=1)
    with pytest.raises(ValueError, match="one branch plan"):
        two_phase_pipeline(pipeline_arch(), [],
                           [GroupingConfig(k=2, tie_break_seed=0)],
                           rest, hold, run_cfg())
