import math
import struct

import numpy as np
import pytest

from sgdlab import datagen
from sgdlab.errors import FormatError, InputError


# ---------------------------------------------------------------------------
# Gauss-k generation


def test_gauss10_shape_and_balance():
    ds = datagen.generate_gauss_k(100, 50, 10, seed=1)
    assert ds.features.shape == (100, 50)
    assert ds.labels.shape == (100,)
    counts = np.bincount(ds.labels, minlength=10)
    assert (counts == 10).all()


def test_gauss2_configuration():
    ds = datagen.generate_gauss_k(100, 50, 2, seed=1)
    assert ds.k == 2
    assert (np.bincount(ds.labels) == 50).all()


def test_gauss_rejects_unbalanced_n():
    with pytest.raises(InputError):
        datagen.generate_gauss_k(101, 50, 10, seed=1)


def test_class_means_concentrate_around_planted_means():
    n, d, k = 1000, 20, 10
    ds = datagen.generate_gauss_k(n, d, k, seed=3)
    means = np.asarray(ds.meta["class_means"])
    per = n // k
    bound = 4.0 / math.sqrt(per)
    for c in range(k):
        sample_mean = ds.features[ds.labels == c].mean(axis=0)
        assert np.abs(sample_mean - means[c]).max() <= bound


def test_generation_is_deterministic():
    a = datagen.generate_gauss_k(60, 10, 3, seed=11)
    b = datagen.generate_gauss_k(60, 10, 3, seed=11)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.labels, b.labels)
    c = datagen.generate_gauss_k(60, 10, 3, seed=12)
    assert not np.array_equal(a.features, c.features)


# ---------------------------------------------------------------------------
# label corruption


def test_zero_corruption_is_identity():
    ds = datagen.generate_gauss_k(50, 5, 5, seed=0)
    out = datagen.corrupt_labels(ds, 0.0, seed=1)
    np.testing.assert_array_equal(out.labels, ds.labels)


def test_corruption_counts_are_per_class_ceilings():
    ds = datagen.generate_gauss_k(100, 5, 10, seed=0)
    out = datagen.corrupt_labels(ds, 0.15, seed=1)
    assert out.meta["labels_redrawn"] == 20  # ceil(0.15 * 10) = 2 per class
    for c in range(10):
        changed = np.sum(out.labels[ds.labels == c] != c)
        assert changed <= 2


def test_corruption_preserves_features_bit_exactly():
    ds = datagen.generate_gauss_k(50, 5, 5, seed=0)
    out = datagen.corrupt_labels(ds, 0.4, seed=1)
    assert out.features is ds.features or np.array_equal(out.features, ds.features)
    assert out.features.tobytes() == ds.features.tobytes()


def test_full_corruption_coincidence_rate():
    # redrawn labels land on the original ~1/k of the time
    ds = datagen.generate_gauss_k(10000, 2, 10, seed=5)
    out = datagen.corrupt_labels(ds, 1.0, seed=6)
    frac_same = np.mean(out.labels == ds.labels)
    # binomial(10000, 0.1): five sigma is ~0.015
    assert abs(frac_same - 0.1) < 0.015


def test_corruption_determinism():
    ds = datagen.generate_gauss_k(100, 5, 10, seed=0)
    a = datagen.corrupt_labels(ds, 0.3, seed=9)
    b = datagen.corrupt_labels(ds, 0.3, seed=9)
    np.testing.assert_array_equal(a.labels, b.labels)


# ---------------------------------------------------------------------------
# IDX loader


def _idx_fixture_bytes():
    # two 2x2 images and two labels, written by hand
    imgs = struct.pack(">IIII", 0x00000803, 2, 2, 2) + bytes([0, 64, 128, 255,
                                                              10, 20, 30, 40])
    labels = struct.pack(">II", 0x00000801, 2) + bytes([3, 7])
    return imgs, labels


def test_idx_loader_on_handcrafted_fixture(tmp_path):
    imgs, labels = _idx_fixture_bytes()
    ip = tmp_path / "imgs.idx"
    lp = tmp_path / "labels.idx"
    ip.write_bytes(imgs)
    lp.write_bytes(labels)
    ds = datagen.load_idx(ip, lp)
    assert ds.features.shape == (2, 4)
    np.testing.assert_array_equal(ds.features[0], [0.0, 64.0, 128.0, 255.0])
    np.testing.assert_array_equal(ds.features[1], [10.0, 20.0, 30.0, 40.0])
    np.testing.assert_array_equal(ds.labels, [3, 7])


def test_idx_rejects_bad_magic(tmp_path):
    imgs, labels = _idx_fixture_bytes()
    ip = tmp_path / "imgs.idx"
    lp = tmp_path / "labels.idx"
    ip.write_bytes(b"\x00\x00\x08\x04" + imgs[4:])
    lp.write_bytes(labels)
    with pytest.raises(FormatError) as err:
        datagen.load_idx(ip, lp)
    assert err.value.offset == 0


def test_idx_rejects_truncated_payload(tmp_path):
    imgs, labels = _idx_fixture_bytes()
    ip = tmp_path / "imgs.idx"
    lp = tmp_path / "labels.idx"
    ip.write_bytes(imgs[:-3])  # declared counts disagree with byte length
    lp.write_bytes(labels)
    with pytest.raises(FormatError):
        datagen.load_idx(ip, lp)


# ---------------------------------------------------------------------------
# CIFAR loader


def test_cifar_loader_on_handcrafted_records(tmp_path):
    rec0 = bytes([4]) + bytes(range(256)) * 12
    rec1 = bytes([9]) + bytes([255] * 3072)
    path = tmp_path / "batch.bin"
    path.write_bytes(rec0 + rec1)
    ds = datagen.load_cifar_bin([path])
    assert ds.features.shape == (2, 3072)
    np.testing.assert_array_equal(ds.labels, [4, 9])
    assert ds.features.max() <= 1.0
    assert ds.features[1, 0] == 1.0
    assert ds.features[0, 1] == pytest.approx(1.0 / 255.0)


def test_cifar_rejects_bad_record_size(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(bytes(3073 + 17))
    with pytest.raises(FormatError):
        datagen.load_cifar_bin([path])


# ---------------------------------------------------------------------------
# normalization


def test_normalize_centers_exactly():
    rng = np.random.default_rng(0)
    ds = datagen.Dataset(rng.standard_normal((40, 6)) * 3 + 1.5,
                         rng.integers(0, 2, 40), 2)
    out = datagen.normalize(ds)
    assert abs(out.features.mean()) <= 1e-10
    assert abs(out.features.std() - 1.0) <= 1e-6


def test_normalize_is_idempotent():
    rng = np.random.default_rng(1)
    ds = datagen.Dataset(rng.standard_normal((30, 4)) * 2 - 7,
                         rng.integers(0, 2, 30), 2)
    once = datagen.normalize(ds)
    twice = datagen.normalize(once)
    np.testing.assert_allclose(twice.features, once.features, atol=1e-9)


def test_normalization_stats_reapply_to_held_out_rows():
    rng = np.random.default_rng(2)
    ds = datagen.Dataset(rng.standard_normal((50, 4)) * 5 + 2,
                         rng.integers(0, 2, 50), 2)
    stats = datagen.fit_normalization(ds)
    first = datagen.apply_normalization(ds, stats)
    held = datagen.Dataset(ds.features[10:20], ds.labels[10:20], 2)
    re = datagen.apply_normalization(held, stats)
    np.testing.assert_array_equal(re.features, first.features[10:20])


def test_cifar_normalization_is_per_channel():
    rng = np.random.default_rng(3)
    feats = np.concatenate([rng.random((20, 4)) * 0.2,
                            rng.random((20, 4)) * 0.5 + 0.3,
                            rng.random((20, 4)) * 0.9], axis=1)
    ds = datagen.Dataset(feats, rng.integers(0, 10, 20), 10,
                         {"source": "cifar", "channels": 3, "channel_size": 4})
    out = datagen.normalize(ds)
    for c in range(3):
        block = out.features[:, c * 4:(c + 1) * 4]
        assert abs(block.mean()) <= 1e-10
        assert abs(block.std() - 1.0) <= 1e-6


def test_normalize_rejects_zero_std():
    ds = datagen.Dataset(np.ones((10, 3)), np.zeros(10, dtype=int), 1)
    with pytest.raises(InputError):
        datagen.normalize(ds)


# ---------------------------------------------------------------------------
# container and split


def test_dataset_container_roundtrip(tmp_path):
    ds = datagen.generate_gauss_k(30, 7, 3, seed=4)
    ds = datagen.corrupt_labels(ds, 0.2, seed=5)
    path = tmp_path / "ds.dsc"
    datagen.save_dataset(path, ds)
    back = datagen.load_dataset(path)
    np.testing.assert_array_equal(back.features, ds.features)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.k == ds.k
    assert back.meta["corruption_fraction"] == 0.2


def test_container_rejects_garbage(tmp_path):
    path = tmp_path / "junk.dsc"
    path.write_bytes(b"\x89PNG not a dataset")
    with pytest.raises(FormatError):
        datagen.load_dataset(path)


def test_split_is_stratified_and_deterministic():
    ds = datagen.generate_gauss_k(50, 4, 5, seed=8)
    train, test = datagen.split_dataset(ds, 30)
    assert train.n == 30 and test.n == 20
    assert (np.bincount(train.labels) == 6).all()
    assert (np.bincount(test.labels) == 4).all()
    train2, _ = datagen.split_dataset(ds, 30)
    np.testing.assert_array_equal(train.features, train2.features)
