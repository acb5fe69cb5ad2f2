"""Confusion-driven balanced grouping of class labels.

Pipeline: tally a confusion matrix from (true, predicted) label pairs,
row-normalize it with the diagonal zeroed, turn it into a pairwise matrix
(inverted for the join criterion, symmetrized either way), then run a
capacity-constrained greedy clustering. The result is a balanced surjection
from the original classes onto group labels, carried around with its
provenance (criterion, tie-break seed, source-matrix digest).

Everything here is purely functional over immutable inputs; randomness is
confined to an explicit seeded generator per call.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

CRITERIA = ("join_similar", "split_similar")


def _digest(array):
    return hashlib.sha256(np.ascontiguousarray(array, dtype=np.float64).tobytes()).hexdigest()


@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    class_count: int
    normalized: bool = False

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.float64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {self.counts.shape}")
        if self.counts.shape[0] != self.class_count:
            raise ValueError("class_count disagrees with matrix size")
        if (self.counts < 0).any():
            raise ValueError("confusion entries must be nonnegative")

    def normalize(self):
        """Scale each row by its total count, then zero the diagonal.

        Off-diagonal entries become per-class misclassification rates; a
        perfectly classified class leaves an all-zero row.
        """
        f = self.counts.copy()
        row_mass = f.sum(axis=1, keepdims=True)
        nonzero = row_mass[:, 0] > 0
        f[nonzero] /= row_mass[nonzero]
        np.fill_diagonal(f, 0.0)
        return ConfusionMatrix(f, self.class_count, normalized=True)

    def digest(self):
        return _digest(self.counts)

    def save_csv(self, path):
        np.savetxt(path, self.counts, fmt="%.17g", delimiter=",")

    @classmethod
    def load_csv(cls, path, normalized=False):
        grid = np.loadtxt(path, delimiter=",", ndmin=2)
        return cls(grid, grid.shape[0], normalized=normalized)


@dataclass
class DistanceMatrix:
    values: np.ndarray
    criterion: str
    source_digest: str

    @property
    def class_count(self):
        return self.values.shape[0]


@dataclass
class GroupingConfig:
    k: int
    criterion: str = "join_similar"
    tie_break_seed: int = 0
    linkage: str = "mean"  # "min" gathers by nearest single member instead

    def __post_init__(self):
        if self.criterion not in CRITERIA:
            raise ValueError(f"criterion must be one of {CRITERIA}")
        if self.linkage not in ("mean", "min"):
            raise ValueError("linkage must be 'mean' or 'min'")


@dataclass
class GroupMapping:
    class_to_group: np.ndarray
    group_count: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.class_to_group = np.asarray(self.class_to_group, dtype=np.int64)
        self.validate()

    @property
    def class_count(self):
        return len(self.class_to_group)

    def validate(self):
        c, k = self.class_count, self.group_count
        if c == 0:
            raise ValueError("empty mapping")
        if self.class_to_group.min() < 0 or self.class_to_group.max() >= k:
            raise ValueError("group label outside [0, k)")
        sizes = self.group_sizes()
        if (sizes == 0).any():
            raise ValueError("mapping is not surjective: empty group")
        if sizes.max() > math.ceil(c / k) or sizes.min() < c // k:
            raise ValueError(
                f"unbalanced mapping: sizes {sizes.tolist()} for c={c}, k={k}")

    def group_sizes(self):
        return np.bincount(self.class_to_group, minlength=self.group_count)

    def groups(self):
        """Members of each group, as a list of index lists."""
        return [np.flatnonzero(self.class_to_group == g).tolist()
                for g in range(self.group_count)]

    def apply(self, labels):
        labels = np.asarray(labels)
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ValueError("label outside the mapping's class range")
        return self.class_to_group[labels]

    def save(self, path):
        lines = [
            "# group mapping v1",
            f"classes = {self.class_count}",
            f"groups = {self.group_count}",
        ]
        for key in ("criterion", "seed", "source_digest"):
            if key in self.provenance:
                lines.append(f"{key} = {self.provenance[key]}")
        lines += [f"{i} {g}" for i, g in enumerate(self.class_to_group)]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        meta, pairs = {}, {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" in line:
                    key, _, value = line.partition("=")
                    meta[key.strip()] = value.strip()
                else:
                    class_id, group_id = line.split()
                    pairs[int(class_id)] = int(group_id)
        c = int(meta["classes"])
        if sorted(pairs) != list(range(c)):
            raise ValueError(f"{path}: expected one line per class in [0, {c})")
        provenance = {k: meta[k] for k in ("criterion", "seed", "source_digest") if k in meta}
        if "seed" in provenance:
            provenance["seed"] = int(provenance["seed"])
        return cls(np.array([pairs[i] for i in range(c)]), int(meta["groups"]), provenance)


def confusion_from_predictions(predicted_labels, true_labels, class_count):
    """Tally counts[i, j] = number of samples with true label i predicted j."""
    predicted = np.asarray(predicted_labels)
    true = np.asarray(true_labels)
    if predicted.size == 0:
        raise ValueError("no predictions to tally")
    if predicted.shape != true.shape:
        raise ValueError("prediction/label vectors differ in length")
    for name, vec in (("predicted", predicted), ("true", true)):
        if vec.min() < 0 or vec.max() >= class_count:
            raise ValueError(f"{name} label outside [0, {class_count})")
    counts = np.zeros((class_count, class_count), dtype=np.float64)
    np.add.at(counts, (true, predicted), 1.0)
    return ConfusionMatrix(counts, class_count)


def distance_matrix(confusion, criterion):
    """Pairwise matrix driving the clustering.

    join_similar inverts the normalized confusion (1 - F) before
    symmetrizing, so often-confused classes come out close and end up
    grouped together. split_similar symmetrizes F itself; the greedy
    "nearest first" step then gathers rarely-confused classes, spreading
    visually similar ones across groups.
    """
    if criterion not in CRITERIA:
        raise ValueError(f"criterion must be one of {CRITERIA}")
    if not confusion.normalized:
        raise ValueError("distance_matrix needs a normalized confusion matrix")
    f = confusion.counts
    if np.abs(np.diag(f)).max() > 0:
        raise ValueError("normalized confusion must have a zero diagonal")
    if f.max() > 1.0 + 1e-9 or f.sum(axis=1).max() > 1.0 + 1e-9:
        raise ValueError("confusion rows must be rate-normalized (row mass <= 1)")
    base = (1.0 - f) if criterion == "join_similar" else f
    values = 0.5 * (base + base.T)
    np.fill_diagonal(values, 0.0)  # self-distance never consulted, kept sane
    return DistanceMatrix(values, criterion, confusion.digest())


def balanced_greedy_cluster(distances, config):
    """Capacity-constrained greedy clustering of class labels.

    Each cluster is seeded with one of the k labels of highest average
    distance to all other labels (chosen greedily, ties broken by the
    seeded generator). Remaining labels are then assigned one at a time:
    the (label, cluster) pair of smallest label-to-cluster distance wins,
    restricted to clusters below the ceil(c/k) capacity. A feasibility
    guard keeps enough open slots that every group finishes with at least
    floor(c/k) members.
    """
    values = distances.values
    c = values.shape[0]
    if values.shape != (c, c):
        raise ValueError("distance matrix must be square")
    if not np.array_equal(values, values.T):
        raise ValueError("distance matrix must be symmetric")
    k = config.k
    if not (2 <= k <= c // 2):
        raise ValueError(f"group count k={k} outside [2, {c // 2}] for {c} classes")

    rng = np.random.default_rng(config.tie_break_seed)
    capacity = math.ceil(c / k)
    floor_size = c // k

    def pick(candidates):
        if len(candidates) == 1:
            return candidates[0]
        return candidates[rng.integers(len(candidates))]

    # Seeds, farthest-first: the first maximizes average distance to all
    # other labels; each later seed maximizes average distance to the seeds
    # chosen so far. Keeps seeds spread apart even on heavily tied matrices.
    assignment = np.full(c, -1, dtype=np.int64)
    open_labels = np.ones(c, dtype=bool)
    score = values.sum(axis=1) / (c - 1)
    seed_dist_sum = np.zeros(c)
    for group in range(k):
        best = score[open_labels].max()
        tied = np.flatnonzero(open_labels & (score == best))
        seed_label = pick(tied)
        assignment[seed_label] = group
        open_labels[seed_label] = False
        seed_dist_sum += values[:, seed_label]
        score = seed_dist_sum / (group + 1)

    sizes = np.bincount(assignment[assignment >= 0], minlength=k)
    # dist_sum[l, q] = total distance from label l to current members of q
    dist_sum = np.zeros((c, k))
    for label in np.flatnonzero(assignment >= 0):
        dist_sum[:, assignment[label]] += values[:, label]

    while open_labels.any():
        remaining = int(open_labels.sum())
        deficit = int(np.maximum(floor_size - sizes, 0).sum())
        if deficit == remaining:
            eligible = sizes < floor_size  # must top up deficient groups now
        else:
            eligible = sizes < capacity
        if config.linkage == "mean":
            cluster_dist = dist_sum / sizes
        else:
            cluster_dist = np.full((c, k), np.inf)
            for group in range(k):
                members = np.flatnonzero(assignment == group)
                cluster_dist[:, group] = values[:, members].min(axis=1)
        label_ids = np.flatnonzero(open_labels)
        group_ids = np.flatnonzero(eligible)
        candidates = cluster_dist[np.ix_(label_ids, group_ids)]
        best = candidates.min()
        tie_rows, tie_cols = np.nonzero(candidates == best)
        choice = pick(np.arange(len(tie_rows)))
        label = label_ids[tie_rows[choice]]
        group = group_ids[tie_cols[choice]]
        assignment[label] = group
        open_labels[label] = False
        sizes[group] += 1
        dist_sum[:, group] += values[:, label]

    mapping = GroupMapping(
        assignment, k,
        provenance={"criterion": distances.criterion,
                    "seed": config.tie_break_seed,
                    "source_digest": distances.source_digest})
    return mapping


def compose_triplets(dataset_labels, mapping):
    """Per-sample (index, class label, group label) triplets."""
    labels = np.asarray(dataset_labels)
    groups = mapping.apply(labels) if labels.size else np.array([], dtype=np.int64)
    return [(i, int(y), int(g)) for i, (y, g) in enumerate(zip(labels, groups))]
