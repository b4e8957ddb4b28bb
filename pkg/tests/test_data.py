import gzip
import os
import struct
import tempfile

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advtrain.data import (BadMagicError, CountMismatchError, DataFormatError, Dataset, TruncatedFileError,
                           load_cifar10, load_dataset, load_idx, load_mnist, make_cv_plan, read_idx,
                           save_idx_dataset, split_holdout, subsample, write_idx)

MNIST_ROOT = os.environ.get("ADVTRAIN_DATA", "/root/data")


def idx_bytes(code, dims, payload):
    # header: two zero bytes, type code, rank, then big-endian uint32 dims
    return bytes([0, 0, code, len(dims)]) + b"".join(d.to_bytes(4, "big") for d in dims) + bytes(payload)


@pytest.fixture
def two_images(tmp_path):
    pixels = list(range(0, 217, 7)) + [255]  # two 4x4 images
    imgs = tmp_path / "imgs"
    labs = tmp_path / "labs"
    imgs.write_bytes(idx_bytes(0x08, [2, 4, 4], pixels))
    labs.write_bytes(idx_bytes(0x08, [2], [7, 3]))
    return imgs, labs, pixels


def test_idx_magic_for_images():
    assert int.from_bytes(idx_bytes(0x08, [1, 1, 1], [0])[:4], "big") == 0x00000803


def test_load_idx_fixture(two_images):
    imgs, labs, pixels = two_images
    ds = load_idx(imgs, labs)
    assert ds.images.shape == (2, 1, 4, 4) and ds.images.dtype == np.float32
    assert ds.labels.tolist() == [7, 3]
    expect = np.array(pixels, np.float32).reshape(2, 1, 4, 4) / np.float32(255)
    assert np.array_equal(ds.images, expect)
    assert ds.images[0, 0, 0, 1] == np.float32(7) / np.float32(255)


def test_gzipped_idx(two_images, tmp_path):
    imgs, labs, _ = two_images
    gz = tmp_path / "imgs.gz"
    gz.write_bytes(gzip.compress(imgs.read_bytes()))
    assert np.array_equal(read_idx(gz), read_idx(imgs))


def test_idx_errors_are_distinct(tmp_path, two_images):
    imgs, labs, _ = two_images
    bad = tmp_path / "bad"
    bad.write_bytes(b"\x01\x00\x08\x01" + b"\x00" * 8)
    with pytest.raises(BadMagicError):
        read_idx(bad)
    short = tmp_path / "short"
    short.write_bytes(imgs.read_bytes()[:-3])
    with pytest.raises(TruncatedFileError):
        read_idx(short)
    three = tmp_path / "three"
    three.write_bytes(idx_bytes(0x08, [3], [1, 2, 3]))
    with pytest.raises(CountMismatchError):
        load_idx(imgs, three)
    for cls in (BadMagicError, TruncatedFileError, CountMismatchError):
        assert issubclass(cls, DataFormatError)
    assert len({BadMagicError, TruncatedFileError, CountMismatchError}) == 3


def test_write_idx_byte_layout(tmp_path):
    p = tmp_path / "a"
    write_idx(p, np.array([[1, 2, 3], [4, 5, 6]], np.uint8))
    assert p.read_bytes() == idx_bytes(0x08, [2, 3], [1, 2, 3, 4, 5, 6])
    write_idx(p, np.array([1.5, -2.0], np.float32))
    assert p.read_bytes() == bytes([0, 0, 0x0D, 1, 0, 0, 0, 2]) + struct.pack(">2f", 1.5, -2.0)


@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 2**31))
@settings(max_examples=25, deadline=None)
def test_idx_round_trip(n, hw, seed):
    rng = np.random.default_rng(seed)
    pix = rng.integers(0, 256, (n, 1, hw, hw), dtype=np.uint8)
    ds = Dataset(pix.astype(np.float32) / np.float32(255), rng.integers(0, 10, n))
    with tempfile.TemporaryDirectory() as d:
        save_idx_dataset(ds, os.path.join(d, "i.gz"), os.path.join(d, "l"))
        back = load_idx(os.path.join(d, "i.gz"), os.path.join(d, "l"))
    assert np.array_equal(back.images, ds.images)
    assert np.array_equal(back.labels, ds.labels)


def test_dataset_is_immutable_and_validated():
    ds = Dataset(np.zeros((2, 1, 2, 2), np.float32), np.array([0, 1]))
    with pytest.raises(ValueError):
        ds.images[0, 0, 0, 0] = 1
    with pytest.raises(DataFormatError):
        Dataset(np.full((1, 1, 2, 2), 2.0, np.float32), np.array([0])).validate()
    with pytest.raises(DataFormatError):
        Dataset(np.zeros((1, 1, 2, 2), np.float32), np.array([10])).validate()
    assert len(subsample(ds, 1)) == 1 and subsample(ds, None) is ds


def test_split_holdout_takes_the_tail():
    ds = Dataset(np.zeros((20, 1, 2, 2), np.float32), np.arange(20) % 10)
    tr, val = split_holdout(ds, 5)
    assert (len(tr), len(val)) == (15, 5)
    assert val.labels.tolist() == [5, 6, 7, 8, 9] and val.split == "val"
    assert len(split_holdout(ds, None)[1]) == 2 and len(split_holdout(ds, 0)[1]) == 0
    with pytest.raises(ValueError):
        split_holdout(ds, 20)


# ---------------------------------------------------------------------------
# CIFAR-10


def cifar_record(label, rng):
    pix = rng.integers(0, 256, 3072, dtype=np.uint8)
    return bytes([label]) + pix.tobytes(), pix


def test_cifar_single_record(tmp_path):
    rng = np.random.default_rng(0)
    rec, pix = cifar_record(6, rng)
    p = tmp_path / "b.bin"
    p.write_bytes(rec)
    ds = load_cifar10([p], expected_per_batch=1)
    assert ds.images.shape == (1, 3, 32, 32)
    assert ds.labels.tolist() == [6]
    # first byte after the label is red (0, 0), last is blue (31, 31)
    assert ds.images[0, 0, 0, 0] == np.float32(rec[1]) / np.float32(255)
    assert ds.images[0, 2, 31, 31] == np.float32(rec[-1]) / np.float32(255)
    assert ds.images[0, 1, 0, 0] == np.float32(rec[1 + 1024]) / np.float32(255)
    assert 0 <= ds.images.min() and ds.images.max() <= 1


def test_cifar_record_count_errors(tmp_path):
    rng = np.random.default_rng(1)
    p = tmp_path / "b.bin"
    p.write_bytes(cifar_record(1, rng)[0] + cifar_record(2, rng)[0])
    assert load_cifar10([p, p], expected_per_batch=2).labels.tolist() == [1, 2, 1, 2]
    with pytest.raises(CountMismatchError):
        load_cifar10([p], expected_per_batch=3)
    p.write_bytes(cifar_record(1, rng)[0][:-1])
    with pytest.raises(TruncatedFileError):
        load_cifar10([p], expected_per_batch=None)


# ---------------------------------------------------------------------------
# real MNIST (skipped when the files are not present)

needs_mnist = pytest.mark.skipif(not os.path.exists(os.path.join(MNIST_ROOT, "mnist")),
                                 reason="MNIST IDX files not available")


@needs_mnist
def test_mnist_sizes():
    tr = load_mnist(MNIST_ROOT, "train")
    te = load_dataset("mnist", "test", MNIST_ROOT)
    assert tr.images.shape == (60000, 1, 28, 28) and len(te) == 10000
    assert set(np.unique(tr.labels)) == set(range(10))


# ---------------------------------------------------------------------------
# cross-validation plan


@pytest.mark.parametrize("n_train,n_test", [(60000, 10000), (101, 7)])
def test_cv_plan_partitions(n_train, n_test):
    plan = make_cv_plan(n_train, n_test, repeats=5, seed=3)
    assert len(plan) == 10
    for r in range(5):
        runs = [run for run in plan if run.repeat == r]
        assert [run.fold for run in runs] == [0, 1]
        a, b = runs[0].train_idx, runs[1].train_idx
        assert not np.intersect1d(a, b).size
        assert np.array_equal(np.union1d(a, b), np.arange(n_train))
        ta, tb = runs[0].test_idx, runs[1].test_idx
        assert not np.intersect1d(ta, tb).size
        assert np.array_equal(np.union1d(ta, tb), np.arange(n_test))
        assert abs(len(ta) - len(tb)) <= 1


def test_cv_plan_train_and_test_never_share_samples():
    # index the training set as 0..n_train-1 and the test set after it
    plan = make_cv_plan(50, 20, seed=1)
    for run in plan:
        assert not np.intersect1d(run.train_idx, run.test_idx + 50).size


def test_cv_plan_determinism():
    a, b = make_cv_plan(100, 30, seed=8), make_cv_plan(100, 30, seed=8)
    for ra, rb in zip(a, b):
        assert np.array_equal(ra.train_idx, rb.train_idx) and np.array_equal(ra.test_idx, rb.test_idx)
    c = make_cv_plan(100, 30, seed=9)
    assert not np.array_equal(a.runs[0].train_idx, c.runs[0].train_idx)
    # repeats draw fresh permutations
    assert not np.array_equal(a.runs[0].train_idx, a.runs[2].train_idx)


def test_cv_plan_needs_test_split():
    with pytest.raises(ValueError):
        make_cv_plan(10)
