import io
import struct

import numpy as np
import pytest

from pfenet.backbone import (
    MAGIC,
    Backbone,
    count_parameters,
    load_backbone,
    pretrain,
    read_arrays,
    save_backbone,
    write_arrays,
)
from pfenet.episodes import DatasetConfig, generate, split, subset, to_input
from pfenet.tensor import ContractError, Conv2d, Tensor


def images(b=2, size=32, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, (b, 3, size, size))


def test_extract_shapes():
    mid, high = Backbone().extract(images())
    assert mid.shape == (2, 112, 8, 8)
    assert high.shape == (2, 64, 8, 8)


def test_zero_image_gives_zero_features():
    mid, high = Backbone().extract(np.zeros((1, 3, 16, 16)))
    assert not mid.data.any() and not high.data.any()


def test_features_non_negative():
    mid, high = Backbone(seed=3).extract(images(seed=3))
    assert (mid.data >= 0).all() and (high.data >= 0).all()


@pytest.mark.parametrize("size", [30, 18])
def test_size_not_divisible_by_four(size):
    with pytest.raises(ContractError):
        Backbone().extract(np.zeros((1, 3, size, size)))


def test_stages_preserve_resolution():
    st = Backbone().stages(images(size=16))
    assert st["stem"].shape[2:] == st["stage2"].shape[2:] == st["stage3"].shape[2:] == st["stage4"].shape[2:] == (4, 4)


def test_extract_is_pure():
    bb = Backbone(seed=1)
    x = images()
    a, b = bb.extract(x), bb.extract(x)
    assert a[0].data.tobytes() == b[0].data.tobytes() and a[1].data.tobytes() == b[1].data.tobytes()


def test_frozen_backbone_builds_no_graph():
    bb = Backbone()
    mid, high = bb.extract(images())
    assert not mid.requires_grad and not high.requires_grad
    bb.unfreeze("stage4")
    mid, high = bb.extract(images())
    assert not mid.requires_grad and high.requires_grad


def test_single_conv_parameter_count():
    assert count_parameters(Conv2d(2, 4, 3, np.random.default_rng(0))) == 76


def test_frozen_backbone_contributes_nothing():
    bb = Backbone()
    assert count_parameters(bb) == 0
    bb.unfreeze()
    w0, w2, w3, w4 = bb.widths
    expect = (3 * w0 * 9 + w0) + (w0 * w0 * 9 + w0) + (w0 * w2 * 9 + w2) + (w2 * w2 * 9 + w2) \
        + (w2 * w3 * 9 + w3) + (w3 * w3 * 9 + w3) + (w3 * w4 * 9 + w4) + (w4 * w4 * 9 + w4)
    assert count_parameters(bb) == expect


def test_checksum_tracks_weights():
    bb = Backbone()
    c = bb.checksum()
    assert Backbone().checksum() == c
    bb.layers["stage4"][1].bias.data[0] += 1e-12
    assert bb.checksum() != c


# ---------------------------------------------------------------- weight files

def test_weight_file_roundtrip(tmp_path):
    bb = Backbone((4, 6, 8, 5), seed=2)
    save_backbone(bb, tmp_path / "w.bin")
    back = load_backbone(tmp_path / "w.bin")
    assert back.widths == bb.widths and back.checksum() == bb.checksum()
    assert back.frozen


def test_weight_file_layout(tmp_path):
    bb = Backbone((2, 2, 2, 2))
    save_backbone(bb, tmp_path / "w.bin")
    raw = (tmp_path / "w.bin").read_bytes()
    assert raw[:4] == MAGIC
    version, count = struct.unpack_from("<II", raw, 4)
    assert version == 1 and count == 16
    ndim, *dims = struct.unpack_from("<5I", raw, 12)
    assert ndim == 4 and dims == [2, 3, 3, 3]
    first = np.frombuffer(raw, "<f8", count=54, offset=32)
    np.testing.assert_array_equal(first, bb.layers["stem"][0].weight.data.ravel())


def test_weight_file_truncated(tmp_path):
    save_backbone(Backbone((2, 2, 2, 2)), tmp_path / "w.bin")
    raw = (tmp_path / "w.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-5])
    with pytest.raises(ContractError):
        load_backbone(tmp_path / "t.bin")
    (tmp_path / "m.bin").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ContractError):
        load_backbone(tmp_path / "m.bin")


def test_array_codec_roundtrip():
    arrays = [np.arange(6.0).reshape(2, 3), np.array([1.5]), np.zeros((1, 2, 1, 2))]
    buf = io.BytesIO()
    write_arrays(buf, arrays)
    back = read_arrays(io.BytesIO(buf.getvalue()))
    for a, b in zip(arrays, back):
        np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------- pretraining

@pytest.fixture(scope="module")
def pretrained():
    ds = generate(DatasetConfig(per_class=30))
    fs = split(12, 0)
    idx = subset(ds, fs.train_classes)
    bb = Backbone(seed=0)
    res = pretrain(bb, to_input(ds.images[idx]), ds.labels[idx], fs.test_classes,
                   epochs=10, lr=0.05, batch_size=8, seed=0)
    return ds, fs, bb, res


def test_pretraining_reduces_held_out_loss(pretrained):
    _, _, _, res = pretrained
    assert res.final_loss < res.initial_loss


def test_pretraining_beats_majority(pretrained):
    _, _, _, res = pretrained
    assert res.pixel_accuracy > res.majority_accuracy


def test_pretraining_freezes_afterwards(pretrained):
    _, _, bb, _ = pretrained
    assert bb.frozen and count_parameters(bb) == 0


def test_pretraining_rejects_test_classes(pretrained):
    ds, fs, _, _ = pretrained
    with pytest.raises(ContractError, match="test-fold"):
        pretrain(Backbone((4, 4, 4, 4)), to_input(ds.images[:4]), ds.labels[:4], fs.test_classes, epochs=1)
