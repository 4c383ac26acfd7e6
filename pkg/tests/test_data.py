import json

import numpy as np
import pytest
from scipy import stats

from gather_excite.data import (IMAGE_BYTES, STATS_FILE, Dataset, augment, encode_cifar, load_cifar,
                                make_synthetic_cifar, normalize, parse_cifar_bytes, write_cifar)
from gather_excite.exceptions import ConfigurationError, FormatError


def _two_record_fixture():
    rec0 = bytes([3]) + bytes(i % 256 for i in range(IMAGE_BYTES))
    rec1 = bytes([7]) + bytes((255 - i) % 256 for i in range(IMAGE_BYTES))
    return rec0 + rec1


def test_two_record_fixture_exact_pixels():
    images, labels = parse_cifar_bytes(_two_record_fixture(), "cifar10")
    assert labels.tolist() == [3, 7]
    assert images.shape == (2, 3, 32, 32) and images.dtype == np.uint8
    # channel-planar: R plane, then G, then B; each row-major
    assert images[0, 0, 0, :4].tolist() == [0, 1, 2, 3]
    assert images[0, 0, 1, 0] == 32
    assert images[0, 1, 0, 0] == 1024 % 256
    assert images[0, 2, 31, 31] == 3071 % 256
    assert images[1, 0, 0, 0] == 255


def test_cifar100_uses_fine_label():
    raw = bytes([2, 57]) + bytes(IMAGE_BYTES)
    _, labels = parse_cifar_bytes(raw, "cifar100")
    assert labels.tolist() == [57]


def test_truncated_file_reports_offset(tmp_path):
    p = tmp_path / "test_batch.bin"
    p.write_bytes(_two_record_fixture()[:-10])
    with pytest.raises(FormatError) as exc:
        parse_cifar_bytes(p.read_bytes(), "cifar10", path=str(p))
    assert exc.value.offset == 3073
    assert "byte offset 3073" in str(exc.value) and str(p) in str(exc.value)


def test_label_out_of_range():
    raw = bytes([10]) + bytes(IMAGE_BYTES)
    with pytest.raises(FormatError):
        parse_cifar_bytes(raw, "cifar10")


def test_unknown_variant():
    with pytest.raises(ConfigurationError):
        parse_cifar_bytes(b"", "svhn")


def test_encode_parse_round_trip(rng):
    imgs = rng.integers(0, 256, size=(5, 3, 32, 32), dtype=np.uint8)
    labels = rng.integers(0, 100, size=5)
    got_imgs, got_labels = parse_cifar_bytes(encode_cifar(imgs, labels, "cifar100"), "cifar100")
    assert np.array_equal(got_imgs, imgs) and np.array_equal(got_labels, labels)


def test_load_standard_layout_and_stats_cache(tmp_path):
    make_synthetic_cifar(tmp_path, n_train=50, n_test=20, seed=1)
    train = load_cifar(tmp_path, "cifar10", "train")
    test = load_cifar(tmp_path, "cifar10", "test")
    assert (len(train), len(test)) == (50, 20)
    assert train.labels.max() < 10
    cached = json.loads((tmp_path / STATS_FILE).read_text())["cifar10"]
    np.testing.assert_allclose(cached["mean"], train.images.mean(axis=(0, 2, 3)) / 255.0)
    assert np.array_equal(test.mean, train.mean)
    with pytest.raises(FormatError):
        load_cifar(tmp_path, "cifar10", "train", strict_counts=True)


def test_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_cifar(tmp_path, "cifar10", "train")


def test_subset_keeps_order(tmp_path):
    make_synthetic_cifar(tmp_path, n_train=30, n_test=10)
    ds = load_cifar(tmp_path)
    sub = ds.subset(7)
    assert len(sub) == 7 and np.array_equal(sub.images, ds.images[:7])


# ---------------------------------------------------------------------------
# augmentation

MEAN = np.zeros(3)
STD = np.full(3, 1 / 255.0)  # normalize() then returns raw pixel values


def test_centre_crop_recovers_image(rng):
    img = rng.integers(0, 256, size=(3, 32, 32), dtype=np.uint8)
    out = augment(img, np.random.default_rng(0), MEAN, STD, offset=(4, 4), flip=False)
    assert out.shape == (3, 32, 32) and out.dtype == np.float32
    np.testing.assert_array_equal(out, normalize(img, MEAN, STD))


def test_forced_flip_reverses_columns(rng):
    img = rng.integers(0, 256, size=(3, 32, 32), dtype=np.uint8)
    out = augment(img, np.random.default_rng(0), MEAN, STD, offset=(4, 4), flip=True)
    np.testing.assert_array_equal(out, normalize(img[:, :, ::-1], MEAN, STD))


def test_forcing_does_not_shift_stream(rng):
    img = rng.integers(0, 256, size=(3, 32, 32), dtype=np.uint8)
    a, b = np.random.default_rng(5), np.random.default_rng(5)
    augment(img, a, MEAN, STD, offset=(0, 0), flip=True)
    augment(img, b, MEAN, STD)
    assert a.random() == b.random()


def _decode_offset(crop):
    # channel 0 holds row+1 and channel 1 col+1 of the original image; padding is 0
    r = int(round(crop[0, 4, 4])) - 1
    v = crop[1, 4, 4:28]
    flipped = v[0] > v[-1]
    c = 32 - int(round(crop[1, 4, 4])) if flipped else int(round(crop[1, 4, 4])) - 1
    return r, c, flipped


def test_offsets_uniform_chi_square():
    img = np.zeros((3, 32, 32), dtype=np.uint8)
    img[0] = np.arange(1, 33)[:, None]
    img[1] = np.arange(1, 33)[None, :]
    rng = np.random.default_rng(2024)
    counts = np.zeros((9, 9))
    flips = 0
    n = 10_000
    for _ in range(n):
        r, c, f = _decode_offset(augment(img, rng, MEAN, STD))
        counts[r, c] += 1
        flips += f
    chi2 = ((counts - n / 81) ** 2 / (n / 81)).sum()
    assert chi2 < stats.chi2.ppf(0.999, 80)
    assert abs(flips - n / 2) < 4 * np.sqrt(n / 4)


def test_dataset_classes_override():
    ds = Dataset(np.zeros((2, 3, 32, 32), np.uint8), np.array([0, 2]), classes=3)
    assert ds.num_classes == 3


def test_write_cifar(tmp_path, rng):
    imgs = rng.integers(0, 256, size=(2, 3, 32, 32), dtype=np.uint8)
    write_cifar(tmp_path / "x.bin", imgs, [1, 2])
    assert (tmp_path / "x.bin").stat().st_size == 2 * 3073
