"""Datasets: the planted-structure synthetic generator and the CIFAR-style
binary image reader."""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .grouping import GroupMapping


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels differ in length")
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= self.class_count):
            raise ValueError(f"label outside [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self):
        return tuple(self.inputs.shape[1:])

    def subset(self, indices):
        return Dataset(self.inputs[indices], self.labels[indices], self.class_count)

    def split_holdout(self, fraction, seed):
        """Deterministic (rest, holdout) split, stratified nowhere: a plain
        seeded shuffle, `fraction` of samples going to the holdout."""
        if not (0 < fraction < 1):
            raise ValueError("holdout fraction must lie in (0, 1)")
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(self))
        cut = max(1, int(round(fraction * len(self))))
        return self.subset(order[cut:]), self.subset(order[:cut])

    def save(self, directory, prefix):
        os.makedirs(directory, exist_ok=True)
        np.save(os.path.join(directory, f"{prefix}_inputs.npy"), self.inputs)
        np.save(os.path.join(directory, f"{prefix}_labels.npy"), self.labels)

    @classmethod
    def load(cls, directory, prefix, class_count):
        inputs = np.load(os.path.join(directory, f"{prefix}_inputs.npy"))
        labels = np.load(os.path.join(directory, f"{prefix}_labels.npy"))
        return cls(inputs, labels, class_count)


@dataclass
class SyntheticSpec:
    """Gaussian classes nested inside Gaussian superclusters.

    Supercluster centers are drawn from a unit normal; class centers around
    their supercluster center with `cluster_spread`; samples around their
    class center with `within_spread`. The planted class-to-supercluster
    map is returned as the grouping oracle.
    """

    class_count: int = 16
    supercluster_count: int = 4
    train_per_class: int = 125
    test_per_class: int = 63
    input_dim: int = 16
    cluster_spread: float = 0.5
    within_spread: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.class_count % self.supercluster_count:
            raise ValueError("supercluster_count must divide class_count")
        if self.cluster_spread <= 0 or self.within_spread <= 0:
            raise ValueError("spreads must be positive")
        if min(self.train_per_class, self.test_per_class) < 1:
            raise ValueError("need at least one sample per class and split")
        # expected within-supercluster class-center gap in `input_dim` dims
        center_gap = self.cluster_spread * np.sqrt(2 * self.input_dim)
        if self.within_spread >= center_gap / 2:
            warnings.warn("within-class spread rivals the class-center gap; "
                          "generating a hard (heavily overlapping) instance")


def generate_synthetic(spec):
    """Returns (train, test, planted GroupMapping)."""
    rng = np.random.default_rng(spec.seed)
    c, s, d = spec.class_count, spec.supercluster_count, spec.input_dim
    per_super = c // s
    super_centers = rng.normal(size=(s, d))
    planted = np.arange(c) // per_super
    class_centers = (super_centers[planted]
                     + rng.normal(size=(c, d)) * spec.cluster_spread)

    def draw(per_class):
        inputs = np.empty((c * per_class, d), dtype=np.float64)
        labels = np.empty(c * per_class, dtype=np.int64)
        for ci in range(c):
            lo = ci * per_class
            inputs[lo:lo + per_class] = (
                class_centers[ci] + rng.normal(size=(per_class, d)) * spec.within_spread)
            labels[lo:lo + per_class] = ci
        return Dataset(inputs, labels, c)

    train = draw(spec.train_per_class)
    test = draw(spec.test_per_class)
    mapping = GroupMapping(planted, s, provenance={"criterion": "planted",
                                                   "seed": spec.seed,
                                                   "source_digest": "generator"})
    return train, test, mapping


@dataclass
class ImageDatasetSpec:
    """CIFAR-binary layout: each record is one label byte followed by
    height*width bytes per channel, channels planar in R,G,B order."""

    path: str
    class_count: int
    train_files: list = field(default_factory=list)
    test_files: list = field(default_factory=list)
    height: int = 32
    width: int = 32
    channels: int = 3

    @property
    def record_bytes(self):
        return 1 + self.height * self.width * self.channels


def _load_cifar_file(path, spec):
    with open(path, "rb") as fh:
        blob = fh.read()
    rec = spec.record_bytes
    if len(blob) % rec:
        complete = (len(blob) // rec) * rec
        raise ValueError(
            f"{path}: truncated record at byte offset {complete} "
            f"({len(blob) - complete} trailing bytes, record size {rec})")
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(-1, rec)
    labels = raw[:, 0].astype(np.int64)
    if labels.size and labels.max() >= spec.class_count:
        bad = int(np.argmax(labels >= spec.class_count))
        raise ValueError(
            f"{path}: record {bad} has label {labels[bad]} "
            f">= class_count {spec.class_count}")
    images = raw[:, 1:].reshape(-1, spec.channels, spec.height, spec.width)
    return images.astype(np.float32) / 255.0, labels


def load_cifar_binary(spec):
    """Returns (train, test) datasets scaled to [0, 1]."""
    if not spec.train_files and not spec.test_files:
        raise ValueError("split definition names no files")
    splits = []
    for files in (spec.train_files, spec.test_files):
        chunks = [_load_cifar_file(os.path.join(spec.path, f), spec) for f in files]
        if chunks:
            inputs = np.concatenate([c[0] for c in chunks])
            labels = np.concatenate([c[1] for c in chunks])
        else:
            shape = (0, spec.channels, spec.height, spec.width)
            inputs = np.empty(shape, dtype=np.float32)
            labels = np.empty(0, dtype=np.int64)
        splits.append(Dataset(inputs, labels, spec.class_count))
    return splits[0], splits[1]
