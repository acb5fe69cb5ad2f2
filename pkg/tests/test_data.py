import numpy as np
import pytest

from ssal.data import (Dataset, ImageDatasetSpec, SyntheticSpec,
                       generate_synthetic, load_cifar_binary)


def test_planted_mapping_is_balanced_by_construction():
    spec = SyntheticSpec(class_count=16, supercluster_count=4, train_per_class=5,
                         test_per_class=3, seed=0)
    train, test, planted = generate_synthetic(spec)
    assert planted.group_count == 4
    assert planted.group_sizes().tolist() == [4, 4, 4, 4]
    assert len(train) == 80 and len(test) == 48


def test_fixed_seed_gives_byte_identical_files(tmp_path):
    spec = SyntheticSpec(class_count=8, supercluster_count=2, train_per_class=10,
                         test_per_class=5, input_dim=4, seed=42)
    dirs = []
    for name in ("a", "b"):
        train, test, _ = generate_synthetic(spec)
        out = tmp_path / name
        train.save(out, "train")
        test.save(out, "test")
        dirs.append(out)
    for fname in ("train_inputs.npy", "train_labels.npy",
                  "test_inputs.npy", "test_labels.npy"):
        assert (dirs[0] / fname).read_bytes() == (dirs[1] / fname).read_bytes()


def test_vanishing_within_spread_is_nearest_centroid_solvable():
    spec = SyntheticSpec(class_count=8, supercluster_count=2, train_per_class=20,
                         test_per_class=10, input_dim=6, cluster_spread=1.0,
                         within_spread=1e-9, seed=1)
    train, test, _ = generate_synthetic(spec)
    centroids = np.stack([train.inputs[train.labels == c].mean(axis=0)
                          for c in range(8)])
    distances = ((test.inputs[:, None, :] - centroids[None]) ** 2).sum(axis=2)
    predictions = distances.argmin(axis=1)
    assert (predictions == test.labels).mean() == 1.0


def test_overlapping_spreads_warn_but_generate():
    spec_kwargs = dict(class_count=4, supercluster_count=2, train_per_class=3,
                       test_per_class=2, input_dim=4, cluster_spread=0.1,
                       within_spread=5.0, seed=0)
    with pytest.warns(UserWarning, match="hard"):
        spec = SyntheticSpec(**spec_kwargs)
    train, _, _ = generate_synthetic(spec)
    assert len(train) == 12


def test_supercluster_count_must_divide_class_count():
    with pytest.raises(ValueError, match="divide"):
        SyntheticSpec(class_count=10, supercluster_count=3)


def test_dataset_validation_and_split():
    data = Dataset(np.zeros((10, 2)), np.arange(10) % 5, 5)
    rest, hold = data.split_holdout(0.3, seed=0)
    assert len(rest) == 7 and len(hold) == 3
    assert set(rest.labels.tolist() + hold.labels.tolist()) == set(range(5))
    with pytest.raises(ValueError, match="fraction"):
        data.split_holdout(1.5, seed=0)
    with pytest.raises(ValueError, match="label"):
        Dataset(np.zeros((2, 2)), np.array([0, 9]), 5)
    with pytest.raises(ValueError, match="length"):
        Dataset(np.zeros((3, 2)), np.array([0, 1]), 5)


# -- CIFAR-style binary reader ----------------------------------------------------

def write_records(path, labels, pixel_fn, height=4, width=4, channels=3):
    blob = bytearray()
    for i, label in enumerate(labels):
        blob.append(label)
        blob.extend(pixel_fn(i))
    path.write_bytes(bytes(blob))
    return height * width * channels


def test_reader_parses_records_and_scales(tmp_path):
    pixels = 4 * 4 * 3
    path = tmp_path / "batch.bin"
    write_records(path, [7, 2],
                  lambda i: bytes([255 if i == 0 else 0] * pixels))
    spec = ImageDatasetSpec(path=str(tmp_path), class_count=10,
                            train_files=["batch.bin"], height=4, width=4)
    train, test = load_cifar_binary(spec)
    assert len(train) == 2 and len(test) == 0
    assert train.labels.tolist() == [7, 2]
    assert train.inputs.shape == (2, 3, 4, 4)
    assert train.inputs.dtype == np.float32
    assert train.inputs[0].max() == 1.0 and train.inputs[0].min() == 1.0
    assert train.inputs[1].max() == 0.0


def test_reader_preserves_channel_planar_layout(tmp_path):
    # R plane 10s, G plane 20s, B plane 30s
    plane = 4 * 4
    path = tmp_path / "batch.bin"
    write_records(path, [0],
                  lambda i: bytes([10] * plane + [20] * plane + [30] * plane))
    spec = ImageDatasetSpec(path=str(tmp_path), class_count=2,
                            train_files=["batch.bin"], height=4, width=4)
    train, _ = load_cifar_binary(spec)
    assert np.allclose(train.inputs[0, 0], 10 / 255)
    assert np.allclose(train.inputs[0, 1], 20 / 255)
    assert np.allclose(train.inputs[0, 2], 30 / 255)


def test_record_count_matches_file_size(tmp_path):
    pixels = 4 * 4 * 3
    path = tmp_path / "batch.bin"
    write_records(path, list(range(5)), lambda i: bytes(pixels))
    spec = ImageDatasetSpec(path=str(tmp_path), class_count=10,
                            train_files=["batch.bin"], height=4, width=4)
    train, _ = load_cifar_binary(spec)
    assert len(train) == 5


def test_truncated_file_rejected_with_offset(tmp_path):
    pixels = 4 * 4 * 3
    path = tmp_path / "batch.bin"
    write_records(path, [1, 2], lambda i: bytes(pixels))
    path.write_bytes(path.read_bytes()[:-5])
    spec = ImageDatasetSpec(path=str(tmp_path), class_count=10,
                            train_files=["batch.bin"], height=4, width=4)
    with pytest.raises(ValueError, match=f"offset {1 * (pixels + 1)}"):
        load_cifar_binary(spec)


def test_label_out_of_range_rejected(tmp_path):
    pixels = 4 * 4 * 3
    path = tmp_path / "batch.bin"
    write_records(path, [9], lambda i: bytes(pixels))
    spec = ImageDatasetSpec(path=str(tmp_path), class_count=5,
                            train_files=["batch.bin"], height=4, width=4)
    with pytest.raises(ValueError, match="label 9"):
        load_cifar_binary(spec)


def test_empty_split_definition_rejected(tmp_path):
    spec = ImageDatasetSpec(path=str(tmp_path), class_count=5)
    with pytest.raises(ValueError, match="no files"):
        load_cifar_binary(spec)
