import json
import struct
import time

import numpy as np
import pytest

from cropgrasp.config import Config
from cropgrasp.detgeom import BBox, encode_grid
from cropgrasp.errors import ConfigInvalid, FormatVersionMismatch, IoFailure, MissingMean, ShapeMismatch
from cropgrasp.models import (
    HEAD_INIT_SCALE,
    DetectorConfig,
    GrasperConfig,
    build_detector,
    build_grasper,
    grasper_layout,
    load_checkpoint,
    preprocess_detector,
    preprocess_grasper,
    save_checkpoint,
)
from cropgrasp.optim import GraspLossParams, YoloLossParams, grasp_loss, yolo_loss
from cropgrasp.pipeline import crop_mean, grasper_crops
from cropgrasp.tensor import grad_check

DET = DetectorConfig.desk()
GR = GrasperConfig.desk()


def test_detector_output_shape():
    net = build_detector(DET, 0)
    out = net.forward(np.random.default_rng(0).random((3, 64, 64)))
    assert out.shape == (8, 8, DET.B * 5 + DET.C)
    batch = net.forward(np.random.default_rng(0).random((2, 3, 64, 64)))
    assert batch.shape == (2, 8, 8, DET.depth)


def test_detector_same_seed_same_weights():
    a, b = build_detector(DET, 4), build_detector(DET, 4)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(pa.data, pb.data)
    c = build_detector(DET, 5)
    assert not np.array_equal(a.parameters()[0].data, c.parameters()[0].data)


def test_detector_zero_image_squashed():
    out = build_detector(DET, 0).predict(np.zeros((3, 64, 64)))
    assert np.isfinite(out).all()
    assert out.min() > 0.0 and out.max() < 1.0


@pytest.mark.parametrize("cfg", [
    DetectorConfig(input_size=64, S=4, widths=(8, 8, 8)),
    DetectorConfig(input_size=60, S=7, widths=(8, 8, 8)),
])
def test_detector_invalid_config(cfg):
    with pytest.raises(ConfigInvalid):
        build_detector(cfg)


def test_full_scale_detector_config_is_consistent():
    DetectorConfig().validate()


def test_grasper_output_shape_and_range():
    net = build_grasper(GR, 0)
    out = net.predict(np.random.default_rng(1).normal(size=(3, 32, 32)))
    assert out.shape == (4,)
    assert np.all((out > 0) & (out < 1))


def test_full_scale_grasper_is_13_conv_3_fc():
    plan = grasper_layout(GrasperConfig())
    assert sum(k == "conv" for k, _, _ in plan) == 13
    assert sum(k == "fc" for k, _, _ in plan) == 3
    assert plan[-1] == ("fc", 4096, 4)
    assert plan[13] == ("fc", 512 * 7 * 7, 4096)


def test_desk_grasper_is_6_conv_2_fc():
    net = build_grasper(GR, 0)
    assert (net.conv_layers, net.fc_layers) == (6, 2)


def test_grasper_forward_budget():
    net = build_grasper(GR, 0)
    x = np.random.default_rng(0).normal(size=(3, 32, 32)).astype(np.float32)
    net.predict(x)
    times = []
    for _ in range(20):
        t = time.perf_counter()
        net.predict(x)
        times.append(time.perf_counter() - t)
    assert float(np.median(times)) < 5e-3


def test_grasper_invalid_config():
    with pytest.raises(ConfigInvalid):
        build_grasper(GrasperConfig(input_size=30))
    with pytest.raises(ConfigInvalid):
        build_grasper(GrasperConfig(outputs=5))


def test_forward_is_deterministic():
    net = build_detector(DET, 2)
    x = np.random.default_rng(3).random((3, 64, 64))
    assert net.predict(x).tobytes() == net.predict(x).tobytes()


# ---------------------------------------------------------------- preprocessing


def test_preprocess_detector():
    img = np.random.default_rng(0).random((3, 64, 64)).astype(np.float32)
    np.testing.assert_array_equal(preprocess_detector(img, DET), img)
    out = preprocess_detector(np.random.default_rng(0).random((3, 50, 37)), DET)
    assert out.shape == (3, 64, 64)
    assert 0.0 <= out.min() and out.max() <= 1.0
    np.testing.assert_allclose(preprocess_detector(np.full((3, 20, 20), 0.4), DET), 0.4, atol=1e-6)


def test_preprocess_grasper():
    mean = [0.2, 0.5, 0.7]
    crop = np.broadcast_to(np.array(mean, dtype=np.float32)[:, None, None], (3, 13, 9))
    np.testing.assert_allclose(preprocess_grasper(crop, GR, mean), 0.0, atol=1e-6)
    img = np.random.default_rng(0).random((3, 20, 24))
    from cropgrasp.synth import resize_bilinear
    np.testing.assert_allclose(preprocess_grasper(img, GR, [0, 0, 0]), resize_bilinear(img, 32, 32), atol=1e-6)
    with pytest.raises(MissingMean):
        preprocess_grasper(img, GR, None)


def test_training_split_mean_removed(small_dataset):
    crops = grasper_crops(small_dataset, "train", Config().train_grasper, 0)
    mean = crop_mean(crops, GR)
    stacked = np.stack([preprocess_grasper(c, GR, mean) for c, _ in crops]).astype(np.float64)
    assert np.all(np.abs(stacked.mean(axis=(0, 2, 3))) < 1e-3)


# ---------------------------------------------------------------- checkpoints


@pytest.mark.parametrize("kind", ["detector", "grasper"])
def test_checkpoint_roundtrip(tmp_path, kind):
    net = build_detector(DET, 3) if kind == "detector" else build_grasper(GR, 3)
    net.metadata = {"epochs": 2, "final_loss": 0.5, "seed": 3}
    path = tmp_path / "net.ckpt"
    save_checkpoint(net, path)
    back = load_checkpoint(path)
    assert back.kind == kind and back.config == net.config and back.metadata == net.metadata
    size = DET.input_size if kind == "detector" else GR.input_size
    rng = np.random.default_rng(0)
    for _ in range(10):
        x = rng.random((3, size, size))
        assert back.predict(x).tobytes() == net.predict(x).tobytes()


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "d.ckpt"
    save_checkpoint(build_detector(DET, 0), path)
    blob = path.read_bytes()
    for cut in (0, 5, 40, len(blob) // 2, len(blob) - 3):
        path.write_bytes(blob[:cut])
        with pytest.raises((IoFailure, FormatVersionMismatch)):
            load_checkpoint(path)


def _rewrite_header(path, edit):
    blob = path.read_bytes()
    (n,) = struct.unpack_from("<Q", blob, 0)
    header = json.loads(blob[8:8 + n])
    edit(header)
    hb = json.dumps(header).encode()
    path.write_bytes(struct.pack("<Q", len(hb)) + hb + blob[8 + n:])


def test_checkpoint_edited_config_echo(tmp_path):
    path = tmp_path / "d.ckpt"
    save_checkpoint(build_detector(DET, 0), path)
    _rewrite_header(path, lambda h: h["config"].update(head_width=32))
    with pytest.raises(ShapeMismatch):
        load_checkpoint(path)


def test_checkpoint_version_bump(tmp_path):
    path = tmp_path / "g.ckpt"
    save_checkpoint(build_grasper(GR, 0), path)
    _rewrite_header(path, lambda h: h.update(format_version=2))
    with pytest.raises(FormatVersionMismatch):
        load_checkpoint(path)


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(IoFailure):
        load_checkpoint(tmp_path / "nope.ckpt")


# ---------------------------------------------------------------- end-to-end gradients


def he_scale_head(net):
    """Undo the small head init so backbone gradients sit well above finite-difference resolution."""
    for p in net.parameters()[-2:]:
        p.data = p.data / HEAD_INIT_SCALE
    return net


def _subset_check(net, loss_fn, seed=0):
    return grad_check(loss_fn, net.parameters(), max_elements=6, seed=seed)


@pytest.mark.parametrize("mode", ["printed", "canonical"])
def test_detector_with_loss_gradient(mode):
    rng = np.random.default_rng(0)
    net = he_scale_head(build_detector(DET, 1))
    x = rng.random((2, 3, 64, 64))
    targets = [encode_grid([(BBox(0.3, 0.4, 0.2, 0.25), 0), (BBox(0.7, 0.6, 0.3, 0.2), 2)], 8, 1, 3),
               encode_grid([(BBox(0.5, 0.5, 0.4, 0.3), 1)], 8, 1, 3)]
    rep = _subset_check(net, lambda: yolo_loss(net(x), targets, YoloLossParams(mode=mode), reduction="mean"))
    assert rep.passed(1e-4), rep


def test_grasper_with_loss_gradient():
    rng = np.random.default_rng(0)
    net = build_grasper(GR, 1)
    x = rng.normal(size=(2, 3, 32, 32))
    t = rng.random((2, 4))
    rep = _subset_check(net, lambda: grasp_loss(net(x), t, net.weights(), GraspLossParams(1e-3), reduction="mean"))
    assert rep.passed(1e-4), rep
