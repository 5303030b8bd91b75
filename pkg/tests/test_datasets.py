import struct

import numpy as np
import pytest

from xfq.datasets import get_dataset, load_idx, make_blobs, make_stripes
from xfq.errors import FormatError


def write_idx(path, arr, code=0x08):
    head = struct.pack(">BBBB", 0, 0, code, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    path.write_bytes(head + arr.astype(">u1").tobytes())


def test_blobs_shapes_and_determinism():
    a, b = make_blobs(seed=4), make_blobs(seed=4)
    assert a.x_train.shape == (200, 8, 8, 1) and a.x_eval.shape == (200, 8, 8, 1)
    np.testing.assert_array_equal(a.x_train, b.x_train)
    assert set(np.unique(a.y_train)) == {0, 1}
    assert not np.array_equal(make_blobs(seed=5).x_train, a.x_train)


def test_stripes():
    d = make_stripes(n_train=10, n_eval=4)
    assert d.x_train.shape == (10, 8, 8, 1) and d.n_classes == 2


def test_idx_round_trip(tmp_path):
    imgs = np.arange(5 * 28 * 28).reshape(5, 28, 28) % 256
    labels = np.array([0, 1, 2, 1, 0])
    write_idx(tmp_path / "train-images-idx3-ubyte", imgs)
    write_idx(tmp_path / "train-labels-idx1-ubyte", labels)
    np.testing.assert_array_equal(load_idx(tmp_path / "train-images-idx3-ubyte"), imgs)
    d = get_dataset(f"idx:{tmp_path / 'train-images-idx3-ubyte'}")
    assert d.x_train.shape[1:] == (28, 28, 1) and d.n_classes == 3
    assert d.x_train.min() >= -0.5 and d.x_train.max() <= 0.5


def test_idx_malformed(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"\x01\x00\x08\x01")
    with pytest.raises(FormatError) as e:
        load_idx(p)
    assert e.value.offset == 0
    write_idx(p, np.zeros((3, 2)))
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(FormatError) as e:
        load_idx(p)
    assert e.value.offset == 12


def test_unknown_dataset():
    with pytest.raises(ValueError):
        get_dataset("cifar")
