import struct

import numpy as np
import pytest

from s2o.data import IdxFormatError, load_idx_dataset, synthesize_blobs, write_idx
from s2o.model import MlpNetwork, accuracy


def _fixture(tmp_path):
    imgs = np.arange(18, dtype=np.uint8).reshape(2, 3, 3) * 14
    labels = np.array([7, 2], dtype=np.uint8)
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    ip.write_bytes(struct.pack(">IIII", 0x803, 2, 3, 3) + imgs.tobytes())
    lp.write_bytes(struct.pack(">II", 0x801, 2) + labels.tobytes())
    return ip, lp, imgs, labels


def test_idx_fixture_parses(tmp_path):
    ip, lp, imgs, labels = _fixture(tmp_path)
    data = load_idx_dataset(ip, lp)
    assert data.inputs.shape == (2, 9)
    np.testing.assert_allclose(data.inputs, imgs.reshape(2, 9) / 255.0)
    np.testing.assert_array_equal(data.labels, labels)


def test_idx_roundtrip_writer(tmp_path):
    ip, lp, imgs, labels = _fixture(tmp_path)
    write_idx(tmp_path / "a", tmp_path / "b", imgs, labels)
    assert (tmp_path / "a").read_bytes() == ip.read_bytes()
    assert (tmp_path / "b").read_bytes() == lp.read_bytes()


def test_idx_truncated_names_offset(tmp_path):
    ip, lp, _, _ = _fixture(tmp_path)
    ip.write_bytes(ip.read_bytes()[:-3])
    with pytest.raises(IdxFormatError, match="offset 31"):
        load_idx_dataset(ip, lp)


def test_idx_wrong_magic(tmp_path):
    ip, lp, _, _ = _fixture(tmp_path)
    with pytest.raises(IdxFormatError, match="0x00000803"):
        load_idx_dataset(ip, ip)


def test_idx_count_mismatch(tmp_path):
    ip, lp, _, _ = _fixture(tmp_path)
    lp.write_bytes(struct.pack(">II", 0x801, 3) + bytes([1, 2, 3]))
    with pytest.raises(IdxFormatError, match="2 images but 3 labels"):
        load_idx_dataset(ip, lp)


def test_blobs_deterministic_and_counts():
    a_train, a_test = synthesize_blobs(3, 5, 30, 0.2, seed=9)
    b_train, _ = synthesize_blobs(3, 5, 30, 0.2, seed=9)
    np.testing.assert_array_equal(a_train.inputs, b_train.inputs)
    assert len(a_train) == 72 and len(a_test) == 18
    labels = np.concatenate([a_train.labels, a_test.labels])
    assert np.bincount(labels).tolist() == [30, 30, 30]


def test_blobs_spread_zero_separable_by_one_layer():
    train, test = synthesize_blobs(4, 20, 25, 0.0, seed=1)
    # one bias-free layer solving W c_k = e_k for the (linearly independent) centers
    centers = np.array([train.inputs[train.labels == k][0] for k in range(4)])
    w = np.linalg.lstsq(centers, np.eye(4), rcond=None)[0].T
    net = MlpNetwork([w], "linear")
    assert accuracy(net, train) == 1.0 and accuracy(net, test) == 1.0


def test_blobs_need_two_classes():
    with pytest.raises(ValueError):
        synthesize_blobs(1, 3, 5, 0.1, 0)
