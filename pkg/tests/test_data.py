import io

import numpy as np
import pytest

from afinet import data
from afinet.data import (NormStats, augment, checksum, encode_cifar, iter_cifar_records, load_cifar,
                         prefetch, shift_flip, synthetic_dataset)
from afinet.errors import ContractError, DataError, FormatError

# sha256 of images + labels for synthetic_dataset(256, 4, seed=0) on this numpy build
SYNTHETIC_CHECKSUM = "f81e7c6ce5edeceb5aab39d250f485b7a48338f5a29dc3c0a9c1cbaf7beeba9a"


def random_records(n, variant, seed=0):
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, size=(n, 3, 32, 32), dtype=np.uint8)
    classes = data.VARIANTS[variant][1]
    labels = rng.integers(0, classes, size=n)
    coarse = rng.integers(0, 20, size=n) if variant == "cifar100" else None
    return pixels, labels, coarse, encode_cifar(pixels, labels, variant, coarse)


def test_record_arithmetic():
    assert data.record_size("cifar10") == 3073
    assert data.record_size("cifar100") == 3074
    assert 30_730_000 // data.record_size("cifar10") == 10_000
    with pytest.raises(DataError):
        data.record_size("svhn")


def test_all_zero_record(tmp_path):
    raw = bytes(3073) + bytes([1]) + bytes([255] * 3072)
    path = tmp_path / "b.bin"
    path.write_bytes(raw)
    ds = load_cifar(path, "cifar10")
    assert ds.labels.tolist() == [0, 1]
    s = ds.stats
    np.testing.assert_allclose(ds.images[0], np.broadcast_to(((0 - s.mean) / s.std)[:, None, None], (3, 32, 32)),
                               rtol=1e-6)


@pytest.mark.parametrize("variant", ["cifar10", "cifar100"])
def test_round_trip_bytes(tmp_path, variant):
    pixels, labels, coarse, raw = random_records(17, variant)
    path = tmp_path / "x.bin"
    path.write_bytes(raw)
    ds = load_cifar(path, variant, batch_size=5)
    np.testing.assert_array_equal(ds.labels, labels)
    if variant == "cifar100":
        np.testing.assert_array_equal(ds.coarse_labels, coarse)
        assert ds.num_classes == 100
    assert data.dump_cifar(ds) == raw


def test_format_and_label_errors():
    _, _, _, raw = random_records(3, "cifar10")
    with pytest.raises(FormatError):
        load_cifar(io.BytesIO(raw[:-1]), "cifar10")
    bad = bytearray(raw)
    bad[0] = 10
    with pytest.raises(DataError):
        load_cifar(io.BytesIO(bytes(bad)), "cifar10")
    with pytest.raises(DataError):
        load_cifar(io.BytesIO(b""), "cifar10")


class CountingReader(io.BytesIO):
    def __init__(self, raw):
        super().__init__(raw)
        self.reads = []

    def read(self, n=-1):
        self.reads.append(n)
        return super().read(n)


def test_streaming_reads_one_batch_per_step():
    _, _, _, raw = random_records(10, "cifar10")
    reader = CountingReader(raw)
    it = iter_cifar_records(reader, "cifar10", batch_size=4)
    assert reader.reads == []
    next(it)
    assert reader.reads == [4 * 3073]
    next(it)
    assert reader.reads == [4 * 3073, 4 * 3073]
    rest = list(it)
    assert len(rest) == 1 and len(rest[0][1]) == 2


def test_leakage_guard(tmp_path):
    _, _, _, raw = random_records(4, "cifar10")
    path = tmp_path / "t.bin"
    path.write_bytes(raw)
    with pytest.raises(ContractError):
        load_cifar(path, "cifar10", split="test")
    train = load_cifar(path, "cifar10")
    test = load_cifar(path, "cifar10", split="test", stats=train.stats)
    np.testing.assert_array_equal(test.images, train.images)
    with pytest.raises(ContractError):
        load_cifar(path, "cifar10", split="test", stats=NormStats(train.stats.mean, train.stats.std, "test"))


def test_shift_flip_identity_and_mirror():
    img = np.random.default_rng(0).standard_normal((3, 32, 32)).astype(np.float32)
    np.testing.assert_array_equal(shift_flip(img, 4, 4, False), img)
    np.testing.assert_array_equal(shift_flip(img, 4, 4, True), img[:, :, ::-1])
    shifted = shift_flip(img, 0, 8, False)
    np.testing.assert_array_equal(shifted[:, 4:, :28], img[:, :28, 4:])
    assert np.all(shifted[:, :4] == 0) and np.all(shifted[:, :, 28:] == 0)


def test_augment_preserves_values_and_is_seeded():
    img = np.random.default_rng(1).integers(1, 100, size=(3, 32, 32)).astype(np.float32)
    for seed in range(20):
        out = augment(img, np.random.default_rng(seed))
        assert out.shape == img.shape
        assert set(np.unique(out)) <= set(np.unique(img)) | {0.0}
    batch = np.stack([img] * 5)
    a = data.augment_batch(batch, np.random.default_rng(7))
    b = data.augment_batch(batch, np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)


def test_synthetic_dataset_contract():
    ds = synthetic_dataset(256, 4, 0)
    assert ds.images.shape == (256, 3, 32, 32) and ds.images.dtype == np.float32
    assert checksum(ds) == SYNTHETIC_CHECKSUM
    assert checksum(synthetic_dataset(256, 4, 0)) == SYNTHETIC_CHECKSUM
    assert checksum(synthetic_dataset(256, 4, 1)) != SYNTHETIC_CHECKSUM
    counts = np.bincount(synthetic_dataset(103, 4, 0).labels)
    assert counts.max() - counts.min() <= 1
    with pytest.raises(ContractError):
        synthetic_dataset(3, 4, 0)


def test_synthetic_is_not_linearly_trivial_in_pixels():
    # nearest class-mean in pixel space should fall short of perfect accuracy
    ds = synthetic_dataset(256, 4, 0)
    x = ds.images.reshape(len(ds), -1)
    means = np.stack([x[ds.labels == k].mean(axis=0) for k in range(4)])
    pred = np.argmin(((x[:, None, :] - means[None]) ** 2).sum(-1), axis=1)
    assert (pred == ds.labels).mean() < 1.0


def test_dataset_invariants():
    with pytest.raises(DataError):
        data.Dataset(np.zeros((2, 3, 32, 32), np.float32), np.array([0, 5]), 4)
    with pytest.raises(DataError):
        data.Dataset(np.full((1, 3, 32, 32), np.nan, np.float32), np.array([0]), 4)


def test_batches_and_prefetch_preserve_order():
    ds = synthetic_dataset(40, 4, 0)
    plain = list(data.iterate_batches(ds, 16, np.random.default_rng(3), True))
    fetched = list(prefetch(data.iterate_batches(ds, 16, np.random.default_rng(3), True), depth=2))
    assert [len(y) for _, y in plain] == [16, 16, 8]
    for (xa, ya), (xb, yb) in zip(plain, fetched):
        np.testing.assert_array_equal(xa, xb)
        np.testing.assert_array_equal(ya, yb)


def test_prefetch_propagates_errors():
    def broken():
        yield 1
        raise DataError("boom")

    with pytest.raises(DataError):
        list(prefetch(broken()))
