"""Synthetic shapes data, resizing, splits, and the two on-disk formats."""
import json

import numpy as np
import pytest

from mimbd import (Dataset, bilinear_resize, filter_class, generate_shapes,
                   load_cifar_binary, load_dataset, resize, save_cifar_binary,
                   save_dataset, split)
from mimbd.errors import ConfigError, FormatError


def test_generate_shapes_basics():
    ds = generate_shapes(10, 50, 32, seed=0, name="t")
    assert ds.images.shape == (500, 32, 32, 3)
    assert ds.images.dtype == np.float32
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert np.bincount(ds.labels, minlength=10).tolist() == [50] * 10
    assert len(set(ds.ids)) == 500
    # background sits around mid-gray
    assert abs(float(ds.images.mean()) - 0.5) < 0.06


def test_generate_shapes_deterministic_and_seed_sensitive():
    a = generate_shapes(4, 5, 32, seed=3, name="a")
    b = generate_shapes(4, 5, 32, seed=3, name="a")
    c = generate_shapes(4, 5, 32, seed=4, name="a")
    assert np.array_equal(a.images, b.images)
    assert not np.array_equal(a.images, c.images)


def test_bboxes_tight_and_inside():
    ds = generate_shapes(10, 20, 32, seed=1, name="t")
    for i in range(len(ds)):
        x0, y0, x1, y1 = ds.bboxes[i]
        assert 0 <= x0 < x1 <= 32 and 0 <= y0 < y1 <= 32
        assert (x1 - x0) >= 6 and (y1 - y0) >= 6


def test_bilinear_resize_identity_and_corners():
    rng = np.random.default_rng(0)
    img = rng.random((16, 16, 3)).astype(np.float32)
    same = bilinear_resize(img, 16)
    assert np.allclose(same, img, atol=1e-6)
    up = bilinear_resize(img, 31)
    # align-corners: the four corners are preserved exactly
    for (a, b) in ((0, 0), (0, -1), (-1, 0), (-1, -1)):
        assert np.allclose(up[a, b], img[a, b], atol=1e-6)


def test_resize_dataset_scales_bboxes():
    ds = generate_shapes(3, 4, 32, seed=2, name="t")
    small = resize(ds, 16)
    assert small.images.shape == (12, 16, 16, 3)
    for (x0, y0, x1, y1), (sx0, sy0, sx1, sy1) in zip(ds.bboxes, small.bboxes):
        assert 0 <= sx0 < sx1 <= 16 and 0 <= sy0 < sy1 <= 16
        assert sx0 <= round(x0 / 2) and sx1 >= round(x1 / 2) - 1


def test_split_stratified_exact():
    ds = generate_shapes(10, 50, 32, seed=0, name="t")
    tr, te = split(ds, (0.9, 0.1), seed=0)
    assert len(tr) == 450 and len(te) == 50
    assert np.bincount(te.labels, minlength=10).tolist() == [5] * 10
    assert set(tr.ids).isdisjoint(te.ids)
    with pytest.raises(ConfigError):
        split(ds, (0.5, 0.6), seed=0)


def test_filter_class():
    ds = generate_shapes(5, 8, 32, seed=0, name="t")
    sub = filter_class(ds, 2)
    assert len(sub) == 8 and set(sub.labels.tolist()) == {2}


def test_cifar_binary_roundtrip_bitexact(tmp_path):
    ds = generate_shapes(10, 3, 32, seed=5, name="t")
    p = tmp_path / "batch.bin"
    save_cifar_binary(ds, p)
    assert p.stat().st_size == 30 * 3073
    back = load_cifar_binary(p, name="t2")
    assert np.array_equal(back.labels, ds.labels)
    # quantized to bytes and back: within half a step of 1/255
    assert np.abs(back.images - ds.images).max() <= (0.5 / 255) + 1e-6
    # a second write of the loaded data is byte-identical
    p2 = tmp_path / "again.bin"
    save_cifar_binary(back, p2)
    assert p.read_bytes() == p2.read_bytes()


def test_cifar_binary_rejects_garbage(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"\x00" * 3072)  # truncated record
    with pytest.raises(FormatError):
        load_cifar_binary(p, name="bad")


def test_dataset_dir_roundtrip(tmp_path):
    ds = generate_shapes(4, 6, 32, seed=6, name="disk")
    save_dataset(ds, tmp_path / "d")
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["num_classes"] == 4
    back = load_dataset(tmp_path / "d")
    assert back.name == ds.name
    assert np.array_equal(back.images, ds.images)
    assert np.array_equal(back.labels, ds.labels)
    assert np.array_equal(back.bboxes, ds.bboxes)
    assert list(back.ids) == list(ds.ids)


def test_dataset_dir_detects_truncated_blob(tmp_path):
    ds = generate_shapes(2, 3, 32, seed=7, name="disk")
    save_dataset(ds, tmp_path / "d")
    blob = tmp_path / "d" / "images.f32"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "d")


def test_dataset_validation():
    imgs = np.zeros((4, 8, 8, 3), np.float32)
    with pytest.raises(ConfigError):
        Dataset("x", imgs, np.array([0, 1, 2, 9]), None, None, num_classes=4)
    with pytest.raises(ConfigError):
        Dataset("x", imgs[:0], None, None, None, num_classes=2)


def test_subset_and_getitem():
    ds = generate_shapes(3, 5, 32, seed=8, name="t")
    sub = ds.subset([0, 2, 4])
    assert len(sub) == 3
    s = sub[1]
    assert s.image.shape == (32, 32, 3) and s.id == ds.ids[2]
