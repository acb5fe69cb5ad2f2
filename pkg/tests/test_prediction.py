import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssal import checkpoint as ckpt
from ssal.data import Dataset
from ssal.grouping import GroupMapping
from ssal.model import AuxBranchSpec, NetworkArch, TrunkSpec, build_network
from ssal.prediction import (CombinerConfig, LinearCombiner,
                             concatenated_outputs, fit_linear_combiner,
                             joint_probability, predict,
                             write_prediction_csv)


def mapping(c, k):
    return GroupMapping(np.arange(c) % k, k)


def test_worked_example_scores_and_argmax_flip():
    gamma = GroupMapping(np.array([0, 1, 1]), 2)  # class 0 -> A, classes 1,2 -> B
    f = np.array([0.5, 0.3, 0.2])
    g = np.array([0.2, 0.8])
    raw = f * g[gamma.class_to_group] ** 1.0
    assert np.allclose(raw, [0.10, 0.24, 0.16], atol=1e-15)
    out = joint_probability(f, [g], [gamma], eta=1.0,
                            renormalization="sum_normalize")
    assert np.allclose(out, [0.20, 0.48, 0.32], atol=1e-12)
    assert out.argmax() == 1 != f.argmax()


def test_uniform_branch_is_neutral():
    rng = np.random.default_rng(0)
    gamma = mapping(6, 3)
    for _ in range(200):
        f = rng.dirichlet(np.ones(6))
        uniform = np.full(3, 1 / 3)
        for eta in (0.1, 0.5, 1.0):
            out = joint_probability(f, [uniform], [gamma], eta=eta)
            assert out.argmax() == f.argmax()


def test_argmax_invariant_between_renormalizations():
    rng = np.random.default_rng(1)
    gamma = mapping(8, 4)
    for _ in range(1000):
        f = rng.dirichlet(np.ones(8))
        g = rng.dirichlet(np.ones(4))
        a = joint_probability(f, [g], [gamma], 1.0, "sum_normalize")
        b = joint_probability(f, [g], [gamma], 1.0, "softmax")
        assert a.argmax() == b.argmax()


@given(st.integers(min_value=0, max_value=100_000))
@settings(max_examples=200, deadline=None)
def test_joint_probability_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    gamma = mapping(5, 2)
    f = rng.dirichlet(np.ones(5), size=3)
    g = rng.dirichlet(np.ones(2), size=3)
    out = joint_probability(f, [g], [gamma], eta=rng.uniform(0.05, 1.0))
    assert np.abs(out.sum(axis=1) - 1.0).max() < 1e-9


def test_small_eta_keeps_confident_main_argmax():
    # brute-force scan: top-1 ratio >= 1.1, two groups, g within [0.4, 0.6]
    gamma = mapping(4, 2)
    grid = np.linspace(0.0, 1.0, 21)
    checked = 0
    for top in np.linspace(0.3, 0.6, 7):
        rest = (1.0 - top) / 3
        f = np.array([top, rest, rest, rest])
        if top / rest < 1.1:
            continue
        for g0 in np.linspace(0.4, 0.6, 21):
            g = np.array([g0, 1.0 - g0])
            out = joint_probability(f, [g], [gamma], eta=0.01)
            assert out.argmax() == f.argmax()
            checked += 1
    assert checked > 100


def test_multi_branch_product_applies_eta_to_all():
    gamma1, gamma2 = mapping(4, 2), GroupMapping(np.array([0, 0, 1, 1]), 2)
    f = np.array([0.25, 0.25, 0.25, 0.25])
    g1, g2 = np.array([0.9, 0.1]), np.array([0.2, 0.8])
    eta = 0.5
    out = joint_probability(f, [g1, g2], [gamma1, gamma2], eta=eta)
    scores = f * (g1[gamma1.class_to_group] ** eta) * (g2[gamma2.class_to_group] ** eta)
    assert np.allclose(out, scores / scores.sum(), atol=1e-12)


def test_eta_monotonicity_of_branch_influence():
    # single branch, fixed f and g: the set of samples where the joint
    # argmax leaves the main argmax can only grow with eta
    rng = np.random.default_rng(9)
    gamma = mapping(6, 3)
    f = rng.dirichlet(np.ones(6), size=400)
    g = rng.dirichlet(np.ones(3), size=400)
    grid = [0.1 * i for i in range(1, 11)]
    previous = np.zeros(400, dtype=bool)
    for eta in grid:
        joint = joint_probability(f, [g], [gamma], eta=eta)
        disagrees = joint.argmax(axis=1) != f.argmax(axis=1)
        assert (previous & ~disagrees).sum() == 0
        previous = disagrees


def test_joint_probability_validation():
    gamma = mapping(4, 2)
    f = np.full(4, 0.25)
    g = np.full(2, 0.5)
    for eta in (0.0, 1.2, -0.5):
        with pytest.raises(ValueError, match="eta"):
            joint_probability(f, [g], [gamma], eta=eta)
    with pytest.raises(ValueError, match="group count"):
        joint_probability(f, [np.full(3, 1 / 3)], [gamma], eta=1.0)
    with pytest.raises(ValueError, match="classes"):
        joint_probability(np.full(5, 0.2), [g], [gamma], eta=1.0)
    with pytest.raises(ValueError, match="renormalization"):
        joint_probability(f, [g], [gamma], eta=1.0, renormalization="max")
    with pytest.raises(ValueError, match="one group mapping"):
        joint_probability(f, [g, g], [gamma], eta=1.0)


def test_combiner_config_validation():
    with pytest.raises(ValueError, match="mode"):
        CombinerConfig(mode="vote")
    with pytest.raises(ValueError, match="eta"):
        CombinerConfig(eta=0.0)


# -- trained-network paths -------------------------------------------------------

def trained_toy_net(seed=0, branches=True):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(4, 6)) * 2.5
    inputs = np.concatenate([centers[c] + rng.normal(size=(30, 6)) * 0.6
                             for c in range(4)])
    labels = np.repeat(np.arange(4), 30)
    data = Dataset(inputs, labels, 4)
    arch = NetworkArch(input_shape=(6,), class_count=4,
                       trunk=TrunkSpec([("b1", ["fc:12", "relu"])]),
                       main_head=["fc:4"])
    specs = [AuxBranchSpec("b1", ["fc:8", "relu", "fc:2"], mapping(4, 2))] \
        if branches else []
    net = build_network(arch, specs, seed=seed, dtype=np.float64)
    from ssal.optim import TriangularSchedule
    from ssal.training import TrainConfig, train
    cfg = TrainConfig(epochs=5, batch_size=16, seed=seed,
                      schedule=TriangularSchedule(0.02, 0.1, 2, 5))
    train(net, data, cfg, run_id="toy")
    return net, data


def test_linear_combiner_identity_init_matches_main_only():
    net, data = trained_toy_net(branches=False)
    main, branches, concat = concatenated_outputs(net, data.inputs)
    combiner = LinearCombiner(net.class_count, [])
    assert concat.shape[1] == net.class_count
    init_labels = combiner.probabilities(concat).argmax(axis=1)
    assert np.array_equal(init_labels, main.argmax(axis=1))


def test_fit_linear_combiner_freezes_network(tmp_path):
    net, data = trained_toy_net()
    path = tmp_path / "before.bin"
    ckpt.save_arrays(path, net.named_arrays())
    digest_before = ckpt.file_digest(path)
    combiner = fit_linear_combiner(net, data)
    assert combiner.fitted
    after = tmp_path / "after.bin"
    ckpt.save_arrays(after, net.named_arrays())
    assert ckpt.file_digest(after) == digest_before


def test_fit_linear_combiner_rejects_empty_split():
    net, data = trained_toy_net()
    empty = Dataset(np.zeros((0, 6)), np.zeros(0, dtype=int), 4)
    with pytest.raises(ValueError, match="empty"):
        fit_linear_combiner(net, empty)


def test_lc_accuracy_not_far_below_main_only():
    drops = []
    for seed in range(5):
        net, data = trained_toy_net(seed=seed)
        combiner = fit_linear_combiner(net, data)
        result = predict(net, data.inputs,
                         CombinerConfig(mode="linear_combination"), combiner)
        main_acc = (result.main_labels == data.labels).mean()
        lc_acc = (result.lc_labels == data.labels).mean()
        drops.append(main_acc - lc_acc)
    assert max(drops) <= 0.005


def test_predict_modes_and_structure():
    net, data = trained_toy_net()
    result = predict(net, data.inputs, CombinerConfig(mode="main_only"))
    main, branches, _ = concatenated_outputs(net, data.inputs)
    assert np.array_equal(result.labels, main.argmax(axis=1))
    assert np.allclose(result.main_probs, main)
    assert np.abs(result.joint_probs.sum(axis=1) - 1.0).max() < 1e-9
    assert result.lc_probs is None
    assert len(result.group_labels) == 1


def test_predict_requires_fitted_combiner_for_lc_mode():
    net, data = trained_toy_net()
    with pytest.raises(ValueError, match="fitted"):
        predict(net, data.inputs, CombinerConfig(mode="linear_combination"))
    unfitted = LinearCombiner(4, [2])
    with pytest.raises(ValueError, match="fitted"):
        predict(net, data.inputs, CombinerConfig(mode="linear_combination"),
                unfitted)


def test_modes_disagree_when_branch_is_informative():
    disagreements = 0
    for seed in range(5):
        net, data = trained_toy_net(seed=seed)
        result = predict(net, data.inputs, CombinerConfig())
        disagreements += int((result.main_labels != result.joint_labels).sum())
    assert disagreements > 0


def test_prediction_csv_dump(tmp_path):
    net, data = trained_toy_net()
    combiner = fit_linear_combiner(net, data)
    result = predict(net, data.inputs, CombinerConfig(), combiner)
    path = tmp_path / "preds.csv"
    write_prediction_csv(path, result, data.labels, net.group_mappings)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == ("sample_id,true_label,main_pred,joint_pred,lc_pred,"
                        "group_pred_0,true_group_0")
    assert len(lines) == len(data) + 1
    first = lines[1].split(",")
    assert first[0] == "0"
    assert first[6] == str(net.group_mappings[0].class_to_group[data.labels[0]])
