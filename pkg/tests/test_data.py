import gzip
import os

import numpy as np
import pytest

from flopnet import data


@pytest.fixture
def idx_pair(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(2, 28, 28), dtype=np.uint8)
    labels = np.array([3, 7], dtype=np.uint8)
    ip = tmp_path / "imgs.idx"
    lp = tmp_path / "labs.idx"
    data.write_idx_images(ip, images)
    data.write_idx_labels(lp, labels)
    return ip, lp, images, labels


def test_round_trip_is_bit_exact(idx_pair):
    ip, lp, images, labels = idx_pair
    ds = data.load_idx(ip, lp, normalize=False, dtype=np.float64)
    np.testing.assert_array_equal((ds.images * 255.0).round().astype(np.uint8)[:, 0], images)
    np.testing.assert_array_equal(ds.labels, labels)


def test_known_pixel_normalization(tmp_path):
    images = np.zeros((2, 28, 28), dtype=np.uint8)
    images[0, 0, 0] = 255
    images[1, 3, 4] = 128
    ip, lp = tmp_path / "i.idx", tmp_path / "l.idx"
    data.write_idx_images(ip, images)
    data.write_idx_labels(lp, np.array([0, 1], dtype=np.uint8))
    ds = data.load_idx(ip, lp, dtype=np.float64)
    assert ds.images.shape == (2, 1, 28, 28)
    # pixel 255 -> (1.0 - 0.1307) / 0.3081
    assert ds.images[0, 0, 0, 0] == pytest.approx((1.0 - 0.1307) / 0.3081, rel=1e-12)
    assert ds.images[0, 0, 0, 0] == pytest.approx(2.8214865, abs=1e-6)
    assert ds.images[1, 0, 3, 4] == pytest.approx((128 / 255.0 - 0.1307) / 0.3081, rel=1e-12)
    # background pixels standardize to -mean/std
    assert ds.images[0, 0, 1, 1] == pytest.approx(-0.1307 / 0.3081, rel=1e-12)


def test_gzip_files_accepted(idx_pair, tmp_path):
    ip, lp, images, labels = idx_pair
    gz_ip, gz_lp = tmp_path / "i.gz", tmp_path / "l.gz"
    for src, dst in ((ip, gz_ip), (lp, gz_lp)):
        with open(src, "rb") as f, gzip.open(dst, "wb") as g:
            g.write(f.read())
    ds = data.load_idx(gz_ip, gz_lp, normalize=False)
    np.testing.assert_array_equal(ds.labels, labels)


def test_wrong_magic_is_typed_error(idx_pair):
    ip, lp, _, _ = idx_pair
    with pytest.raises(ValueError, match="not an IDX file"):
        data.load_idx(lp, lp)  # labels magic on the images path


def test_truncated_payload(tmp_path, idx_pair):
    ip, lp, _, _ = idx_pair
    blob = open(ip, "rb").read()
    short = tmp_path / "short.idx"
    short.write_bytes(blob[:-10])
    with pytest.raises(ValueError, match="short read at offset"):
        data.load_idx(short, lp)


def test_count_mismatch(tmp_path, idx_pair):
    ip, _, _, _ = idx_pair
    lp3 = tmp_path / "three.idx"
    data.write_idx_labels(lp3, np.array([1, 2, 3], dtype=np.uint8))
    with pytest.raises(ValueError, match="does not match label count"):
        data.load_idx(ip, lp3)


def test_label_range_enforced(tmp_path, idx_pair):
    ip, _, _, _ = idx_pair
    bad = tmp_path / "bad.idx"
    data.write_idx_labels(bad, np.array([0, 11], dtype=np.uint8))
    with pytest.raises(ValueError, match="labels outside"):
        data.load_idx(ip, bad)


def test_batch_sizes_last_partial_kept():
    ds = data.Dataset(images=np.zeros((10, 4)), labels=np.arange(10) % 3)
    sizes = [b[0].shape[0] for b in data.batches(ds, 3)]
    assert sizes == [3, 3, 3, 1]


def test_batches_seeded_shuffle_reproducible_and_partition():
    ds = data.Dataset(images=np.arange(20).reshape(20, 1).astype(float), labels=np.arange(20))
    run1 = np.concatenate([b[1] for b in data.batches(ds, 6, rng=42)])
    run2 = np.concatenate([b[1] for b in data.batches(ds, 6, rng=42)])
    np.testing.assert_array_equal(run1, run2)
    assert set(run1.tolist()) == set(range(20))
    assert not np.array_equal(run1, np.arange(20))  # actually shuffled
    ordered = np.concatenate([b[1] for b in data.batches(ds, 6)])
    np.testing.assert_array_equal(ordered, np.arange(20))


def test_batch_size_validated():
    ds = data.Dataset(images=np.zeros((4, 2)), labels=np.zeros(4, dtype=int))
    with pytest.raises(ValueError):
        list(data.batches(ds, 0))


def test_blobs_empty_and_reproducible():
    empty = data.synthetic_blobs(3, 0, 5, seed=1)
    assert len(empty) == 0
    a = data.synthetic_blobs(4, 100, 6, seed=2)
    b = data.synthetic_blobs(4, 100, 6, seed=2)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_blobs_linearly_separable():
    # independent oracle: logistic regression reaches < 2% error
    from sklearn.linear_model import LogisticRegression

    train = data.synthetic_blobs(5, 1000, 8, seed=3)
    test = data.synthetic_blobs(5, 500, 8, seed=4)
    clf = LogisticRegression(max_iter=1000).fit(train.images, train.labels)
    err = 1.0 - clf.score(test.images, test.labels)
    assert err < 0.02


def test_synthetic_images_shape_and_determinism():
    a = data.synthetic_images(10, 64, seed=5)
    assert a.images.shape == (64, 1, 28, 28)
    assert a.labels.shape == (64,)
    b = data.synthetic_images(10, 64, seed=5)
    np.testing.assert_array_equal(a.images, b.images)


def test_dataset_limit():
    ds = data.synthetic_images(10, 50, seed=6)
    assert len(ds.limit(20)) == 20
    assert len(ds.limit(None)) == 50
    assert len(ds.limit(100)) == 50


def test_load_mnist_missing_files_message(tmp_path):
    with pytest.raises(FileNotFoundError, match="--download"):
        data.load_mnist(data_dir=str(tmp_path / "nowhere"))


def test_data_dir_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv(data.DATA_DIR_ENV, str(tmp_path))
    assert data.default_data_dir() == str(tmp_path)
