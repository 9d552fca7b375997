import copy
import json

import numpy as np
import pytest
import torch

from a3dseg.errors import ConfigError, DatasetError, TrainingError
from a3dseg.losses import LossWeights
from a3dseg.nets import NetworkConfig, build_networks, read_checkpoint
from a3dseg.phantom import DegradationParams, PhantomConfig, degrade_to_cbct, generate_phantom
from a3dseg.train2d import TrainConfig2D, make_optimizers, net_config_for, run_train_2d, train_step_2d

TINY = dict(image_size=(32, 32), base_channels=8, content_channels=16, artifact_channels=4, seg_channels=4)
ZERO = LossWeights(w_adv=0, w_recon=0, w_cycle=0, w_arti=0, w_segm=0, w_segm_m=0, w_anat=0)


def toy_batch(n=4, seed=7):
    """``n`` unpaired slice pairs from two different phantoms."""
    cfg = dict(volume_shape=(16, 32, 32), n_vertebrae=2)
    hi, mask = generate_phantom(PhantomConfig(**cfg, seed=seed))
    lo, _ = generate_phantom(PhantomConfig(**cfg, seed=seed + 1))
    lo = degrade_to_cbct(lo, DegradationParams(), seed=1).array
    idx = np.linspace(2, 14, n).astype(int)
    t = lambda a: torch.from_numpy(np.ascontiguousarray(a[idx][:, None], dtype=np.float32))
    return t(lo), t(hi.array), t(mask)


def fresh(ablation="M4", **kw):
    nc = net_config_for(ablation, NetworkConfig(**TINY))
    nets = build_networks(nc)
    cfg = TrainConfig2D(ablation=ablation, **kw)
    return nets, make_optimizers(nets, cfg.lr), cfg


def snapshot(params):
    return [p.detach().clone() for p in params]


def test_zero_weights_leave_parameters_unchanged():
    nets, opts, cfg = fresh(weights=ZERO)
    before = snapshot(nets.parameters())
    train_step_2d(*toy_batch(), nets, opts, cfg)
    assert all(torch.equal(a, b) for a, b in zip(before, nets.parameters()))


def test_step_changes_parameters():
    nets, opts, cfg = fresh()
    before = snapshot(nets.generator_parameters())
    d_before = snapshot(nets.discriminator_parameters())
    report = train_step_2d(*toy_batch(), nets, opts, cfg)
    assert any(not torch.equal(a, b) for a, b in zip(before, nets.generator_parameters()))
    assert any(not torch.equal(a, b) for a, b in zip(d_before, nets.discriminator_parameters()))
    assert set(report.terms) >= {"adv", "recon", "cycle", "segm", "segm_m", "anat", "disc"}
    assert "arti" not in report.terms


def test_two_runs_follow_identical_trajectories():
    torch.use_deterministic_algorithms(True)
    batch = toy_batch()
    runs = []
    for _ in range(2):
        nets, opts, cfg = fresh()
        losses = [train_step_2d(*batch, nets, opts, cfg).as_floats() for _ in range(2)]
        runs.append((losses, snapshot(nets.parameters())))
    assert runs[0][0] == runs[1][0]
    assert all(torch.equal(a, b) for a, b in zip(runs[0][1], runs[1][1]))


def test_discriminator_step_never_touches_generators():
    nets, opts, cfg = fresh(weights=LossWeights(w_adv=1, w_recon=0, w_cycle=0, w_arti=0, w_segm=0,
                                                w_segm_m=0, w_anat=0))
    # freeze the generator optimizer so only the D update can act
    opts.gen.step = lambda *a, **k: None
    gen_before = snapshot(nets.generator_parameters())
    train_step_2d(*toy_batch(), nets, opts, cfg)
    assert all(torch.equal(a, b) for a, b in zip(gen_before, nets.generator_parameters()))


def test_generator_step_never_touches_discriminators():
    nets, opts, cfg = fresh()
    opts.disc.step = lambda *a, **k: None
    d_before = snapshot(nets.discriminator_parameters())
    train_step_2d(*toy_batch(), nets, opts, cfg)
    assert all(torch.equal(a, b) for a, b in zip(d_before, nets.discriminator_parameters()))
    assert all(p.grad is None or p.grad.abs().sum() >= 0 for p in nets.discriminator_parameters())


def test_ablation_controls_shape_path():
    for abl, aware in (("M1", False), ("M2", False), ("M3", True), ("M4", True)):
        nets, _, _ = fresh(abl)
        assert (nets.G_s is not None) is aware
        assert nets.G_h.uses_attention is aware


def test_non_finite_loss_aborts_with_dump():
    x_l, x_h, gt = toy_batch()
    x_h[0, 0, 0, 0] = float("nan")
    nets, opts, cfg = fresh()
    with pytest.raises(TrainingError, match="discriminator"):
        train_step_2d(x_l, x_h, gt, nets, opts, cfg)
    nets, opts, cfg = fresh(weights=LossWeights(w_adv=0))
    before = snapshot(nets.parameters())
    with pytest.raises(TrainingError, match="recon"):
        train_step_2d(x_l, x_h, gt, nets, opts, cfg)
    assert all(torch.equal(a, b) for a, b in zip(before, nets.parameters()))


@pytest.mark.slow
def test_m1_smoke_run_halves_reconstruction():
    x_l, x_h, gt = toy_batch(5)
    nets, opts, cfg = fresh("M1", lr=1e-4)
    recon = [float(train_step_2d(x_l, x_h, gt, nets, opts, cfg).terms["recon"]) for _ in range(200)]
    # reference run: 0.49 -> 0.14 (about 29% of the start)
    assert np.mean(recon[-10:]) < 0.5 * recon[0]


# -- run_train_2d --------------------------------------------------------------

def tiny_net():
    return NetworkConfig(**TINY)


def test_epochs_zero_returns_initialization(tiny_manifest, tmp_path):
    cfg = TrainConfig2D(epochs=0, checkpoint_dir=str(tmp_path / "run"))
    path = run_train_2d(tiny_manifest, cfg, tiny_net())
    assert path.name == "epoch_000.npz"
    header, params = read_checkpoint(path)
    ref = build_networks(net_config_for("M4", tiny_net())).state_dict()
    assert all(np.array_equal(params[k], v.numpy()) for k, v in ref.items())
    assert header["meta"]["epoch"] == 0
    assert not (tmp_path / "run" / "metrics.jsonl").exists()


def test_run_writes_checkpoints_logs_and_manifest(tiny_manifest, tmp_path):
    cfg = TrainConfig2D(epochs=2, steps_per_epoch=2, batch_size=2, checkpoint_dir=str(tmp_path / "run"),
                        ablation="M2")
    path = run_train_2d(tiny_manifest, cfg, tiny_net())
    run = tmp_path / "run"
    assert path == run / "epoch_002.npz"
    assert {p.name for p in run.glob("epoch_*.npz")} == {"epoch_000.npz", "epoch_001.npz", "epoch_002.npz"}
    lines = [json.loads(x) for x in (run / "metrics.jsonl").read_text().splitlines()]
    assert [x["step"] for x in lines] == [0, 1, 2, 3]
    assert all(set(x["active"]) == {"recon", "adv", "cycle", "segm", "anat"} for x in lines)
    doc = json.loads((run / "run.json").read_text())
    assert doc["train2d"]["epochs"] == 2 and doc["seed"] == 0 and "code_version" in doc


def test_run_directory_is_append_only(tiny_manifest, tmp_path):
    cfg = TrainConfig2D(epochs=0, checkpoint_dir=str(tmp_path / "run"))
    run_train_2d(tiny_manifest, cfg, tiny_net())
    with pytest.raises(ConfigError):
        run_train_2d(tiny_manifest, cfg, tiny_net())


def test_resume_reproduces_uninterrupted_run(tiny_manifest, tmp_path):
    base = dict(steps_per_epoch=2, batch_size=2, ablation="M4")
    full = TrainConfig2D(epochs=2, checkpoint_dir=str(tmp_path / "full"), **base)
    run_train_2d(tiny_manifest, full, tiny_net())
    first = TrainConfig2D(epochs=1, checkpoint_dir=str(tmp_path / "a"), **base)
    ck = run_train_2d(tiny_manifest, first, tiny_net())
    second = TrainConfig2D(epochs=2, checkpoint_dir=str(tmp_path / "b"), **base)
    ck2 = run_train_2d(tiny_manifest, second, tiny_net(), resume_from=ck)
    read = lambda p: [json.loads(x) for x in p.read_text().splitlines()]
    full_log = read(tmp_path / "full" / "metrics.jsonl")
    resumed = read(tmp_path / "b" / "metrics.jsonl")
    assert resumed == [x for x in full_log if x["epoch"] == 2]
    _, a = read_checkpoint(tmp_path / "full" / "epoch_002.npz")
    _, b = read_checkpoint(ck2)
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_empty_domain_is_dataset_error(tiny_manifest, tmp_path):
    m = copy.deepcopy(tiny_manifest)
    m.entries = [e for e in m.entries if not (e.domain == "low" and e.split == "train")]
    with pytest.raises(DatasetError):
        run_train_2d(m, TrainConfig2D(epochs=1, checkpoint_dir=str(tmp_path / "r")), tiny_net())


def test_config_validation():
    for kw in ({"ablation": "M7"}, {"lr": 0.0}, {"batch_size": 0}, {"epochs": -1}, {"adv_form": "wgan"}):
        with pytest.raises(ConfigError):
            TrainConfig2D(**kw).validate()
    assert TrainConfig2D().epochs == 15 and TrainConfig2D().lr == 1e-4 and TrainConfig2D().batch_size == 1
