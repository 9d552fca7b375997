"""Second stage: volumetric segmentation on top of the frozen 2D translator.

Volumes are split into axial slices, translated slice by slice by the frozen 2D
network, restacked, resampled to the training spacing, and fed to two 3D
segmentors: ``S_l`` for low-quality volumes (raw ``X_l`` and translated
``X_hl``) and ``S_h`` for high-quality ones (raw ``X_h`` and translated ``X_lh``).
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointError, ConfigError, ContractError, DatasetError
from .losses import dice_loss
from .metrics import config_fingerprint, head_domain
from .nets import (NetworkBundle, UNet, load_networks, load_state, predict_heads, read_checkpoint,
                   save_checkpoint, translate)
from .storage import DatasetManifest
from .train2d import configure_determinism, prepare_run_dir, write_run_manifest

log = logging.getLogger(__name__)

DIRECTIONS = ("low_to_high", "high_to_low")


@dataclass
class TrainConfig3D:
    # full-scale setting is 96x256x256; this is the phantom-scale equivalent
    patch_shape: tuple = (32, 64, 64)
    downsample_spacing_mm: tuple = (1.0, 1.0, 1.0)
    iterations: int = 78386
    lr: float = 1e-4
    seed: int = 0
    seg_channels: int = 8
    segm_weight: float = 1.0
    anat_weight: float = 1.0
    checkpoint_dir: str = "runs/train3d"
    log_every: int = 1

    def __post_init__(self):
        self.patch_shape = tuple(int(s) for s in self.patch_shape)
        self.downsample_spacing_mm = tuple(float(s) for s in self.downsample_spacing_mm)

    def validate(self):
        if len(self.patch_shape) != 3 or any(s < 1 for s in self.patch_shape):
            raise ConfigError(f"bad patch_shape {self.patch_shape}")
        if len(self.downsample_spacing_mm) != 3 or any(s <= 0 for s in self.downsample_spacing_mm):
            raise ConfigError(f"bad downsample_spacing_mm {self.downsample_spacing_mm}")
        if self.iterations < 0 or not self.lr > 0 or self.seg_channels < 1 or self.log_every < 1:
            raise ConfigError("iterations >= 0, lr > 0, seg_channels >= 1, log_every >= 1 required")


def _frozen(nets2d) -> NetworkBundle:
    if isinstance(nets2d, (str, Path)):
        path = Path(nets2d)
        if not path.exists():
            raise ContractError(f"missing translator checkpoint: {path}")
        header, _ = read_checkpoint(path)
        if int(header.get("meta", {}).get("epoch", 0)) == 0:
            raise ContractError(f"translator checkpoint {path} is untrained (epoch 0)")
        nets2d = load_networks(path)
    if not isinstance(nets2d, NetworkBundle):
        raise ContractError("translator must be a NetworkBundle or a 2D checkpoint path")
    nets2d.eval()
    for p in nets2d.parameters():
        p.requires_grad_(False)
    return nets2d


def _as_array(x) -> np.ndarray:
    return np.asarray(getattr(x, "array", x), dtype=np.float32)


@torch.no_grad()
def translate_volume(X, nets2d, direction: str, artifact_source=None) -> np.ndarray:
    """Translate a (D, H, W) volume slice by slice and restack along depth.

    ``high_to_low`` borrows the artifact code of slice ``k`` of
    ``artifact_source`` (a low-quality volume of equal shape) for slice ``k``.
    """
    if direction not in DIRECTIONS:
        raise ContractError(f"unknown direction {direction!r}")
    nets2d = _frozen(nets2d)
    x = _as_array(X)
    if x.ndim != 3:
        raise ContractError(f"expected a (D, H, W) volume, got shape {x.shape}")
    src = None
    if direction == "high_to_low":
        if artifact_source is None:
            raise ContractError("high_to_low translation needs a low-quality artifact source")
        src = _as_array(artifact_source)
        if src.shape != x.shape:
            raise ContractError(f"artifact source shape {src.shape} != volume shape {x.shape}")
    out = np.empty_like(x)
    for k in range(x.shape[0]):
        xs = torch.from_numpy(x[k][None, None].copy())
        ss = None if src is None else torch.from_numpy(src[k][None, None].copy())
        out[k] = translate(nets2d, xs, direction, ss)[0, 0].numpy()
    return out


def resample_volume(x: torch.Tensor, size) -> torch.Tensor:
    """Trilinear resize of an (N, C, D, H, W) tensor."""
    size = tuple(int(s) for s in size)
    if tuple(x.shape[-3:]) == size:
        return x
    return F.interpolate(x, size=size, mode="trilinear", align_corners=False)


def target_size(shape, spacing_mm, target_spacing_mm) -> tuple:
    return tuple(max(1, int(round(n * s / t))) for n, s, t in zip(shape, spacing_mm, target_spacing_mm))


class Seg3DNets(nn.Module):
    def __init__(self, seg_channels: int):
        super().__init__()
        self.S_l = UNet(seg_channels, dim=3)
        self.S_h = UNet(seg_channels, dim=3)


def build_seg3d(config: TrainConfig3D) -> Seg3DNets:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        return Seg3DNets(config.seg_channels)


def _pad4(x: torch.Tensor):
    pads = []
    for n in reversed(x.shape[-3:]):
        pads += [0, (-n) % 4]
    return F.pad(x, pads, mode="replicate") if any(pads) else x


def _segment(net: UNet, x: torch.Tensor) -> torch.Tensor:
    d, h, w = x.shape[-3:]
    return net(_pad4(x))[..., :d, :h, :w]


def forward_seg3d(X_l, X_h, X_lh, X_hl, nets3d: Seg3DNets):
    """Returns ``(Y_l, Y_lh, Y_h, Y_hl)`` for (N, 1, D, H, W) tensors."""
    if X_l.shape != X_lh.shape or X_h.shape != X_hl.shape:
        raise ContractError("raw and translated volumes must have identical shapes")
    if X_l.dim() != 5 or X_h.dim() != 5:
        raise ContractError("3D segmentors expect (N, 1, D, H, W) tensors")
    n_l = X_l.shape[0]
    if X_l.shape == X_h.shape:
        low = _segment(nets3d.S_l, torch.cat([X_l, X_hl], 0))
        high = _segment(nets3d.S_h, torch.cat([X_h, X_lh], 0))
        Y_l, Y_hl = low[:n_l], low[n_l:]
        Y_h, Y_lh = high[:n_l], high[n_l:]
    else:
        Y_l, Y_hl = _segment(nets3d.S_l, X_l), _segment(nets3d.S_l, X_hl)
        Y_h, Y_lh = _segment(nets3d.S_h, X_h), _segment(nets3d.S_h, X_lh)
    return Y_l, Y_lh, Y_h, Y_hl


def loss_3d(Y_l, Y_lh, Y_h, Y_hl, gt_h):
    """Returns ``(segm, anat)``: explicit Dice on the high-quality pair, implicit L1 consistency."""
    if gt_h is None:
        raise ContractError("loss_3d needs the high-quality ground truth")
    for a, b in ((Y_l, Y_lh), (Y_h, Y_hl), (Y_h, gt_h)):
        if a.shape != b.shape:
            raise ContractError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    segm = dice_loss(Y_h, gt_h) + dice_loss(Y_hl, gt_h)
    anat = (Y_l - Y_lh).abs().mean() + (Y_h - Y_hl).abs().mean()
    return segm, anat


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def _random_patch(vol: np.ndarray, patch, rng) -> tuple:
    if any(p > s for p, s in zip(patch, vol.shape)):
        raise ConfigError(f"patch {patch} larger than volume {vol.shape}")
    return tuple(slice(o, o + p) for o, p in
                 zip((int(rng.integers(0, s - p + 1)) for s, p in zip(vol.shape, patch)), patch))


def run_train_3d(manifest: DatasetManifest, nets2d_ckpt, config: TrainConfig3D,
                 resolved_config: Optional[dict] = None) -> Path:
    """Train both 3D segmentors with online translation; returns the final checkpoint."""
    config.validate()
    configure_determinism()
    ckpt_path = Path(nets2d_ckpt).resolve()
    digest_before = file_sha256(ckpt_path) if ckpt_path.exists() else None
    nets2d = _frozen(ckpt_path)
    snapshot = {k: v.clone() for k, v in nets2d.state_dict().items()}
    image_size = nets2d.config.image_size
    if tuple(config.patch_shape[1:]) != tuple(image_size):
        raise ConfigError(f"patch in-plane size {config.patch_shape[1:]} must equal the translator's {image_size}")

    low = manifest.select(domain="low", split="train")
    high = manifest.select(domain="high", split="train")
    if not low or not high:
        raise DatasetError("3D training needs low- and high-quality training volumes")
    low_vols = [manifest.load_volume(e) for e in low]
    high_vols = [manifest.load_volume(e) for e in high]
    high_gts = [manifest.load_mask(e).astype(np.float32) for e in high]
    for v in low_vols + high_vols:
        _random_patch(v, config.patch_shape, np.random.default_rng(0))
    spacing = high[0].spacing_mm
    size = target_size(config.patch_shape, spacing, config.downsample_spacing_mm)

    run_dir = prepare_run_dir(config.checkpoint_dir)
    header_cfg = {"train3d": asdict(config), "spacing_mm": list(spacing),
                  "translator": str(ckpt_path), "translator_sha256": digest_before}
    write_run_manifest(run_dir, {"stage": "train3d", "seed": config.seed, **header_cfg,
                                 "manifest_meta": manifest.meta}, resolved_config)
    nets3d = build_seg3d(config)
    opt = torch.optim.Adam(nets3d.parameters(), lr=config.lr)
    path = run_dir / "iter_000000.npz"
    save_checkpoint(path, nets3d, header_cfg, "3d", {"iteration": 0})
    if config.iterations == 0:
        return path

    rng = np.random.default_rng(config.seed)
    t = lambda a: torch.from_numpy(np.ascontiguousarray(a))[None, None]
    nets3d.train()
    with open(run_dir / "metrics.jsonl", "a") as logf:
        for it in range(config.iterations):
            i, j = int(rng.integers(len(low_vols))), int(rng.integers(len(high_vols)))
            pl = _random_patch(low_vols[i], config.patch_shape, rng)
            ph = _random_patch(high_vols[j], config.patch_shape, rng)
            x_l, x_h, gt = low_vols[i][pl], high_vols[j][ph], high_gts[j][ph]
            x_lh = translate_volume(x_l, nets2d, "low_to_high")
            x_hl = translate_volume(x_h, nets2d, "high_to_low", artifact_source=x_l)
            # downsample after translation
            X_l, X_h, X_lh, X_hl, G = (resample_volume(t(a), size) for a in (x_l, x_h, x_lh, x_hl, gt))
            G = (G >= 0.5).float()
            Y_l, Y_lh, Y_h, Y_hl = forward_seg3d(X_l, X_h, X_lh, X_hl, nets3d)
            segm, anat = loss_3d(Y_l, Y_lh, Y_h, Y_hl, G)
            total = config.segm_weight * segm + config.anat_weight * anat
            if not torch.isfinite(total):
                raise ContractError(f"non-finite 3D loss: segm={segm.item()} anat={anat.item()}")
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            if it % config.log_every == 0:
                logf.write(json.dumps({"step": it, "segm3d": segm.item(), "anat3d": anat.item(),
                                       "total": total.item()}, sort_keys=True) + "\n")
    path = run_dir / f"iter_{config.iterations:06d}.npz"
    save_checkpoint(path, nets3d, header_cfg, "3d", {"iteration": config.iterations})

    # frozen-translator audit
    for k, v in nets2d.state_dict().items():
        if not torch.equal(v, snapshot[k]):
            raise ContractError(f"translator parameter {k} changed during 3D training")
    if digest_before is not None and file_sha256(ckpt_path) != digest_before:
        raise ContractError("translator checkpoint file changed during 3D training")
    return path


def load_seg3d(path) -> tuple[Seg3DNets, dict]:
    header, params = read_checkpoint(path)
    if header.get("kind") != "3d":
        raise CheckpointError(f"{path} is not a 3D segmentation checkpoint")
    cfg = TrainConfig3D(**header["config"]["train3d"])
    nets3d = Seg3DNets(cfg.seg_channels)
    load_state(nets3d, params, path)
    nets3d.eval()
    return nets3d, header


def predictor_2d(nets: NetworkBundle, which: str, batch: int = 64):
    """Slicewise 2D prediction of one head, restacked into a volume."""
    domain = head_domain(which)
    nets.eval()

    def predict(volume, artifact_source=None, spacing_mm=None):
        vol = np.asarray(volume, dtype=np.float32)
        out = np.empty_like(vol)
        for s in range(0, vol.shape[0], batch):
            x = torch.from_numpy(vol[s:s + batch, None].copy())
            src = None
            if artifact_source is not None:
                src = torch.from_numpy(np.asarray(artifact_source, np.float32)[s:s + batch, None].copy())
            heads = predict_heads(nets, x, domain, src)
            if which not in heads:
                raise ContractError(f"head {which} not available for this network")
            out[s:s + batch] = heads[which][:, 0].numpy()
        return out

    return predict


def predictor_3d(nets3d: Seg3DNets, nets2d: NetworkBundle, which: str, train_spacing, target_spacing):
    if which not in ("y_l", "y_lh", "y_h", "y_hl"):
        raise ContractError(f"3D model has no head {which!r}")

    @torch.no_grad()
    def predict(volume, artifact_source=None, spacing_mm=None):
        vol = np.asarray(volume, dtype=np.float32)
        if which == "y_lh":
            vol = translate_volume(vol, nets2d, "low_to_high")
        elif which == "y_hl":
            vol = translate_volume(vol, nets2d, "high_to_low", artifact_source)
        net = nets3d.S_l if which in ("y_l", "y_hl") else nets3d.S_h
        spacing = spacing_mm or train_spacing
        x = torch.from_numpy(vol)[None, None]
        small = resample_volume(x, target_size(vol.shape, spacing, target_spacing))
        y = resample_volume(_segment(net, small), vol.shape)
        return y[0, 0].clamp(0, 1).numpy()

    return predict


def make_predictor(checkpoint, mode: str, which: str):
    """Build ``(predict, fingerprint)`` from a 2D or 3D checkpoint path."""
    header, _ = read_checkpoint(checkpoint)
    fingerprint = config_fingerprint(header["config"])
    if mode == "2d":
        if header.get("kind") != "2d":
            raise CheckpointError(f"{checkpoint} is not a 2D checkpoint")
        return predictor_2d(load_networks(checkpoint), which), fingerprint
    if mode == "3d":
        nets3d, header = load_seg3d(checkpoint)
        cfg = header["config"]
        translator = Path(cfg["translator"])
        if cfg.get("translator_sha256") and file_sha256(translator) != cfg["translator_sha256"]:
            raise CheckpointError(f"translator {translator} does not match the one used in training")
        nets2d = _frozen(translator)
        tcfg = TrainConfig3D(**cfg["train3d"])
        return predictor_3d(nets3d, nets2d, which, tuple(cfg["spacing_mm"]),
                            tcfg.downsample_spacing_mm), fingerprint
    raise ContractError(f"unknown evaluation mode {mode!r}")
