import json

import numpy as np
import pytest
import torch

from a3dseg.errors import ConfigError, ContractError
from a3dseg.nets import NetworkConfig, load_networks, read_checkpoint, translate
from a3dseg.seg3d import (TrainConfig3D, build_seg3d, file_sha256, forward_seg3d, load_seg3d, loss_3d,
                          make_predictor, run_train_3d, target_size, translate_volume)
from a3dseg.train2d import TrainConfig2D, run_train_2d

TINY = dict(image_size=(32, 32), base_channels=8, content_channels=16, artifact_channels=4, seg_channels=4)


@pytest.fixture(scope="module")
def translator(tiny_manifest, tmp_path_factory):
    run = tmp_path_factory.mktemp("t2d") / "run"
    cfg = TrainConfig2D(epochs=1, steps_per_epoch=2, batch_size=2, checkpoint_dir=str(run))
    return run_train_2d(tiny_manifest, cfg, NetworkConfig(**TINY))


def low_volume(manifest, i=0):
    return manifest.load_volume(manifest.select(domain="low", split="train")[i])


def cfg3d(tmp_path, **kw):
    return TrainConfig3D(**{"patch_shape": (8, 32, 32), "iterations": 2, "seg_channels": 2,
                            "checkpoint_dir": str(tmp_path / "r3d"), **kw})


# -- online translation ----------------------------------------------------------

def test_slicewise_translation_is_bit_exact(tiny_manifest, translator):
    vol = low_volume(tiny_manifest)
    nets = load_networks(translator)
    out = translate_volume(vol, nets, "low_to_high")
    assert out.shape == vol.shape
    with torch.no_grad():
        for k in (0, 7, vol.shape[0] - 1):
            alone = translate(nets, torch.from_numpy(vol[k][None, None].copy()), "low_to_high")
            assert np.array_equal(out[k], alone[0, 0].numpy())
    assert np.array_equal(out, translate_volume(vol, translator, "low_to_high"))


def test_translate_then_slice_equals_slice_then_translate(tiny_manifest, translator):
    vol = low_volume(tiny_manifest, 1)
    hi = tiny_manifest.load_volume(tiny_manifest.select(domain="high", split="train")[0])
    full = translate_volume(hi, translator, "high_to_low", artifact_source=vol)
    part = translate_volume(hi[4:9], translator, "high_to_low", artifact_source=vol[4:9])
    assert np.array_equal(full[4:9], part)


def test_high_to_low_needs_matching_artifact_source(tiny_manifest, translator):
    vol = low_volume(tiny_manifest)
    with pytest.raises(ContractError):
        translate_volume(vol, translator, "high_to_low")
    with pytest.raises(ContractError):
        translate_volume(vol, translator, "high_to_low", artifact_source=vol[:3])
    with pytest.raises(ContractError):
        translate_volume(vol[0], translator, "low_to_high")


def test_missing_or_untrained_translator(tiny_manifest, translator, tmp_path):
    vol = low_volume(tiny_manifest)
    with pytest.raises(ContractError, match="missing"):
        translate_volume(vol, tmp_path / "none.npz", "low_to_high")
    with pytest.raises(ContractError, match="untrained"):
        translate_volume(vol, translator.parent / "epoch_000.npz", "low_to_high")


# -- 3D segmentors -----------------------------------------------------------------

def vols(shape=(1, 1, 8, 16, 16), seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return [torch.rand(shape, generator=g, dtype=dtype) for _ in range(4)]


def test_forward_seg3d_shapes_and_range():
    nets = build_seg3d(TrainConfig3D(seg_channels=2))
    X_l, X_h, X_lh, X_hl = vols((2, 1, 6, 10, 14))
    outs = forward_seg3d(X_l, X_h, X_lh, X_hl, nets)
    for y in outs:
        assert y.shape == X_l.shape and y.min() >= 0 and y.max() <= 1
    with pytest.raises(ContractError):
        forward_seg3d(X_l, X_h, X_lh[:, :, :3], X_hl, nets)


def test_anat_gradient_reaches_low_segmentor():
    nets = build_seg3d(TrainConfig3D(seg_channels=2)).double()
    X = vols(dtype=torch.float64)
    w = nets.S_l.head.weight

    def anat():
        return loss_3d(*forward_seg3d(*X, nets), torch.zeros_like(X[0]))[1]

    w.grad = None
    anat().backward()
    g = w.grad[0, 0, 0, 0, 0].item()
    with torch.no_grad():
        h = 1e-6
        w[0, 0, 0, 0, 0] += h
        up = anat().item()
        w[0, 0, 0, 0, 0] -= 2 * h
        down = anat().item()
        w[0, 0, 0, 0, 0] += h
    fd = (up - down) / (2 * h)
    assert abs(fd) > 0
    assert fd == pytest.approx(g, rel=1e-3)


def test_loss_3d_fixed_point_and_scalar():
    gt = torch.zeros(1, 1, 2, 4, 4)
    gt[..., 1:3, 1:3] = 1
    segm, anat = loss_3d(gt, gt, gt, gt, gt)
    assert float(segm) <= 1e-6 and float(anat) == 0.0
    full = lambda v: torch.full((1, 1, 2, 2, 2), v)
    ones = full(1.0)
    _, anat = loss_3d(full(0.9), full(0.4), ones, ones, ones)
    assert float(anat) == pytest.approx(0.5, abs=1e-6)
    with pytest.raises(ContractError):
        loss_3d(ones, ones, ones, ones, None)


def test_loss_3d_takes_no_low_quality_ground_truth():
    import inspect
    assert list(inspect.signature(loss_3d).parameters) == ["Y_l", "Y_lh", "Y_h", "Y_hl", "gt_h"]


def test_target_size():
    assert target_size((32, 64, 64), (1.0, 0.5, 0.5), (1.0, 1.0, 1.0)) == (32, 32, 32)


# -- run_train_3d ------------------------------------------------------------------

def test_iterations_zero_returns_init(tiny_manifest, translator, tmp_path):
    path = run_train_3d(tiny_manifest, translator, cfg3d(tmp_path, iterations=0))
    assert path.name == "iter_000000.npz"
    _, params = read_checkpoint(path)
    ref = build_seg3d(cfg3d(tmp_path)).state_dict()
    assert all(np.array_equal(params[k], v.numpy()) for k, v in ref.items())


def test_patch_larger_than_volume(tiny_manifest, translator, tmp_path):
    with pytest.raises(ConfigError):
        run_train_3d(tiny_manifest, translator, cfg3d(tmp_path, patch_shape=(40, 32, 32)))


def test_run_is_deterministic_and_translator_stays_frozen(tiny_manifest, translator, tmp_path):
    digest = file_sha256(translator)
    paths = [run_train_3d(tiny_manifest, translator, cfg3d(tmp_path / str(i))) for i in range(2)]
    logs = [(p.parent / "metrics.jsonl").read_text() for p in paths]
    assert logs[0] == logs[1] and len(logs[0].splitlines()) == 2
    (_, a), (_, b) = read_checkpoint(paths[0]), read_checkpoint(paths[1])
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert file_sha256(translator) == digest
    header = json.loads((paths[0].parent / "run.json").read_text())
    assert header["translator_sha256"] == digest
    nets3d, h = load_seg3d(paths[0])
    assert h["meta"]["iteration"] == 2 and not nets3d.training


def test_3d_predictor_heads(tiny_manifest, translator, tmp_path):
    path = run_train_3d(tiny_manifest, translator, cfg3d(tmp_path, iterations=1))
    vol = low_volume(tiny_manifest)
    for which in ("y_l", "y_lh", "y_h"):
        predict, fp = make_predictor(path, "3d", which)
        y = predict(vol, None, (1.0, 0.5, 0.5))
        assert y.shape == vol.shape and y.min() >= 0 and y.max() <= 1
    predict, _ = make_predictor(path, "3d", "y_hl")
    assert predict(vol, vol, (1.0, 0.5, 0.5)).shape == vol.shape
    with pytest.raises(ContractError):
        make_predictor(path, "3d", "m_l")
