import struct

import numpy as np
import pytest

from fedsim.data import (
    IdxCountMismatchError,
    IdxMagicError,
    IdxTruncatedError,
    PartitionError,
    generate_synthetic,
    load_dataset,
    load_mnist_idx,
    partition_label_shards,
    save_dataset,
)


def test_synthetic_shapes_and_invariants():
    ds = generate_synthetic(0.0, 0.0, 30, seed=7)
    assert ds.n_clients == 30
    assert ds.d_feat == 60 and ds.n_classes == 10
    for c in ds.clients:
        assert c.m >= 1
        assert c.x.shape == (c.m, 60)
        assert c.y.max() < 10 and c.y.min() >= 0
    assert len(ds.test_y) > 0
    assert ds.test_x.shape[1] == 60


def test_synthetic_deterministic():
    a = generate_synthetic(0.0, 0.0, 30, seed=7)
    b = generate_synthetic(0.0, 0.0, 30, seed=7)
    for ca, cb in zip(a.clients, b.clients):
        assert ca.x.tobytes() == cb.x.tobytes()
        assert ca.y.tobytes() == cb.y.tobytes()
    assert a.test_x.tobytes() == b.test_x.tobytes()
    c = generate_synthetic(0.0, 0.0, 30, seed=8)
    assert a.clients[0].x.tobytes() != c.clients[0].x.tobytes()


def test_synthetic_single_client():
    ds = generate_synthetic(1.0, 1.0, 1, seed=0)
    assert ds.n_clients == 1
    assert ds.clients[0].m >= 1


def test_synthetic_mean_size_calibration():
    # Seed-averaged over 30 seeds: mean training-set size within 20% of 670.
    means = []
    for seed in range(30):
        ds = generate_synthetic(0.0, 0.0, 30, seed)
        means.append(np.mean([c.m for c in ds.clients]))
    overall = float(np.mean(means))
    assert 670 * 0.8 <= overall <= 670 * 1.2, overall


def test_synthetic_heterogeneity_parameters_change_data():
    a = generate_synthetic(0.0, 0.0, 5, seed=3)
    b = generate_synthetic(1.0, 1.0, 5, seed=3)
    assert a.clients[0].x.tobytes() != b.clients[0].x.tobytes()


def _write_idx(tmp_path, images, labels, img_magic=0x803, lab_magic=0x801,
               truncate_images=False, label_count=None):
    n, rows, cols = images.shape
    img_path = tmp_path / "img.idx"
    lab_path = tmp_path / "lab.idx"
    img = struct.pack(">iiii", img_magic, n, rows, cols) + images.tobytes()
    if truncate_images:
        img = img[: 16 + n * rows * cols // 2]
    img_path.write_bytes(img)
    cnt = label_count if label_count is not None else len(labels)
    lab_path.write_bytes(struct.pack(">ii", lab_magic, cnt) + labels.tobytes())
    return img_path, lab_path


@pytest.fixture
def idx_files(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(50, 4, 5), dtype=np.uint8)
    labels = rng.integers(0, 10, size=50, dtype=np.uint8)
    return tmp_path, images, labels


def test_idx_roundtrip(idx_files):
    tmp_path, images, labels = idx_files
    img_path, lab_path = _write_idx(tmp_path, images, labels)
    x, y = load_mnist_idx(img_path, lab_path)
    assert x.shape == (50, 20)
    assert x.min() >= 0.0 and x.max() <= 1.0
    assert np.array_equal(y, labels)
    # header counts drive the parsed shape, matching the published format
    assert x.shape[0] == struct.unpack(">i", img_path.read_bytes()[4:8])[0]


def test_idx_bad_magic(idx_files):
    tmp_path, images, labels = idx_files
    img_path, lab_path = _write_idx(tmp_path, images, labels, lab_magic=0x9999)
    with pytest.raises(IdxMagicError):
        load_mnist_idx(img_path, lab_path)
    img_path, lab_path = _write_idx(tmp_path, images, labels, img_magic=0x1234)
    with pytest.raises(IdxMagicError):
        load_mnist_idx(img_path, lab_path)


def test_idx_truncated(idx_files):
    tmp_path, images, labels = idx_files
    img_path, lab_path = _write_idx(tmp_path, images, labels, truncate_images=True)
    with pytest.raises(IdxTruncatedError):
        load_mnist_idx(img_path, lab_path)


def test_idx_count_mismatch(idx_files):
    tmp_path, images, labels = idx_files
    img_path, lab_path = _write_idx(tmp_path, images, labels[:30])
    with pytest.raises(IdxCountMismatchError):
        load_mnist_idx(img_path, lab_path)


@pytest.fixture
def shard_pool():
    rng = np.random.default_rng(5)
    n = 2000
    features = rng.standard_normal((n, 12))
    labels = rng.integers(0, 10, size=n).astype(np.int64)
    return features, labels


def test_partition_label_cardinality(shard_pool):
    features, labels = shard_pool
    ds = partition_label_shards(features, labels, 20, 2, seed=1)
    for c in ds.clients:
        assert len(np.unique(c.y)) == 2


def test_partition_exhaustive_disjoint(shard_pool):
    features, labels = shard_pool
    ds = partition_label_shards(features, labels, 20, 2, seed=1)
    rows = [c.x for c in ds.clients] + [ds.test_x]
    all_rows = np.vstack(rows)
    assert all_rows.shape[0] == features.shape[0]
    want = np.sort(features.view([("", features.dtype)] * 12), axis=0)
    got = np.sort(all_rows.view([("", features.dtype)] * 12), axis=0)
    assert np.array_equal(want, got)


def test_partition_deterministic(shard_pool):
    features, labels = shard_pool
    a = partition_label_shards(features, labels, 20, 2, seed=1)
    b = partition_label_shards(features, labels, 20, 2, seed=1)
    for ca, cb in zip(a.clients, b.clients):
        assert ca.x.tobytes() == cb.x.tobytes()


def test_partition_hundred_clients_two_labels():
    rng = np.random.default_rng(8)
    n = 6000
    features = rng.standard_normal((n, 8))
    labels = rng.integers(0, 10, size=n).astype(np.int64)
    ds = partition_label_shards(features, labels, 100, 2, seed=1)
    assert ds.n_clients == 100
    for c in ds.clients:
        assert len(np.unique(c.y)) == 2


def test_partition_single_client_holds_everything(shard_pool):
    features, labels = shard_pool
    ds = partition_label_shards(features, labels, 1, 10, seed=0)
    assert ds.n_clients == 1
    assert ds.clients[0].m + len(ds.test_y) == len(labels)


def test_partition_insufficient():
    features = np.ones((5, 3))
    labels = np.arange(5, dtype=np.int64) % 5
    with pytest.raises(PartitionError):
        partition_label_shards(features, labels, 4, 1, seed=0)  # can't cover 5 classes


def test_container_roundtrip(tmp_path):
    ds = generate_synthetic(0.5, 0.5, 4, seed=11)
    path = tmp_path / "ds.txt"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.n_clients == ds.n_clients
    assert back.provenance == ds.provenance
    for ca, cb in zip(ds.clients, back.clients):
        assert ca.client_id == cb.client_id
        assert ca.x.tobytes() == cb.x.tobytes()
        assert ca.y.tobytes() == cb.y.tobytes()
    assert back.test_x.tobytes() == ds.test_x.tobytes()
