"""Joint adversarial training of the 2D disentanglement network."""
from __future__ import annotations

import json
import logging
import math
import platform
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import yaml

from . import __version__
from .errors import ConfigError, DatasetError, TrainingError
from .losses import (ACTIVE_TERMS, ANATOMY_AWARE, LossReport, LossWeights, check_ablation, loss_adv,
                     loss_anat, loss_arti, loss_cycle, loss_recon, loss_segm, total_loss)
from .nets import (NetworkBundle, NetworkConfig, build_networks, forward_segmentation, forward_synthesis,
                   load_state, read_checkpoint, save_checkpoint)
from .storage import DatasetManifest

log = logging.getLogger(__name__)


@dataclass
class TrainConfig2D:
    ablation: str = "M4"
    epochs: int = 15
    lr: float = 1e-4
    batch_size: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_dir: str = "runs/train2d"
    log_every: int = 1
    # None: one pass over the larger training domain per epoch
    steps_per_epoch: Optional[int] = None
    adv_form: str = "bce"

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)

    def validate(self):
        check_ablation(self.ablation)
        if self.epochs < 0 or self.batch_size < 1 or self.log_every < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and log_every >= 1 required")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be >= 1")
        if self.adv_form not in ("bce", "printed"):
            raise ConfigError(f"unknown adv_form {self.adv_form!r}")


@dataclass
class Optimizers:
    gen: torch.optim.Optimizer
    disc: torch.optim.Optimizer

    def state_dict(self):
        return {"gen": self.gen.state_dict(), "disc": self.disc.state_dict()}

    def load_state_dict(self, state):
        self.gen.load_state_dict(state["gen"])
        self.disc.load_state_dict(state["disc"])


def make_optimizers(nets: NetworkBundle, lr: float) -> Optimizers:
    # Adam with library-default moments
    return Optimizers(torch.optim.Adam(nets.generator_parameters(), lr=lr),
                      torch.optim.Adam(nets.discriminator_parameters(), lr=lr))


def net_config_for(ablation: str, base: NetworkConfig) -> NetworkConfig:
    """Copy of ``base`` with the anatomy-aware switch set by the ablation tag."""
    d = base.to_dict()
    d["anatomy_aware"] = ANATOMY_AWARE[check_ablation(ablation)]
    return NetworkConfig(**d)


def _set_requires_grad(params, flag):
    for p in params:
        p.requires_grad_(flag)


def train_step_2d(x_l, x_h, gt_h, nets: NetworkBundle, optimizers: Optimizers,
                  config: TrainConfig2D) -> LossReport:
    """One discriminator update on detached fakes, then one update of everything else."""
    active = ACTIVE_TERMS[config.ablation]
    w = config.weights
    nets.train()
    _, synth = forward_synthesis(x_l, x_h, nets)

    d_loss = None
    if "adv" in active and w.w_adv > 0:
        d_loss = loss_adv(torch.sigmoid(nets.D_l(x_l)), torch.sigmoid(nets.D_l(synth.x_hl.detach())),
                          torch.sigmoid(nets.D_h(x_h)), torch.sigmoid(nets.D_h(synth.x_lh.detach())),
                          mode="discriminator", form=config.adv_form)
        if not torch.isfinite(d_loss):
            raise TrainingError(f"non-finite discriminator loss: {float(d_loss.detach())}")
        optimizers.disc.zero_grad(set_to_none=True)
        (w.w_adv * d_loss).backward()
        optimizers.disc.step()

    terms = {}
    if "recon" in active:
        terms["recon"] = loss_recon(x_l, synth.x_ll, x_h, synth.x_hh)
    if "cycle" in active:
        terms["cycle"] = loss_cycle(x_h, synth.x_cycle)
    if "arti" in active:
        terms["arti"] = loss_arti(x_l, synth.x_lh, synth.x_hl, x_h)
    disc_params = list(nets.discriminator_parameters())
    _set_requires_grad(disc_params, False)
    try:
        if "adv" in active:
            terms["adv"] = loss_adv(None, torch.sigmoid(nets.D_l(synth.x_hl)), None,
                                    torch.sigmoid(nets.D_h(synth.x_lh)), mode="generator", form=config.adv_form)
        segs = forward_segmentation(x_l, x_h, synth, nets)
        terms["segm"], segm_m = loss_segm(segs, synth.m_h, gt_h)
        if "segm_m" in active:
            terms["segm_m"] = segm_m
        if "anat" in active:
            terms["anat"] = loss_anat(segs)

        bad = {k for k, v in terms.items() if v is not None and not torch.isfinite(v)}
        if bad:
            dump = {k: float(v.detach()) for k, v in terms.items() if v is not None}
            raise TrainingError(f"non-finite loss term(s) {sorted(bad)}; all terms: {dump}")
        report = total_loss(terms, w, config.ablation)
        optimizers.gen.zero_grad(set_to_none=True)
        if report.total.requires_grad:
            report.total.backward()
            optimizers.gen.step()
    finally:
        _set_requires_grad(disc_params, True)
    if d_loss is not None:
        report.terms["disc"] = d_loss.detach()
    return report


class SliceData:
    """In-memory training slices. Only high-quality masks are ever loaded."""

    def __init__(self, manifest: DatasetManifest):
        low = manifest.select(domain="low", split="train")
        high = manifest.select(domain="high", split="train")
        if not low or not high:
            raise DatasetError("training needs entries from both domains "
                               f"(got {len(low)} low, {len(high)} high)")
        self.low = np.concatenate([manifest.load_volume(e) for e in low], 0)
        self.high = np.concatenate([manifest.load_volume(e) for e in high], 0)
        self.gt_high = np.concatenate([manifest.load_mask(e) for e in high], 0).astype(np.float32)
        self.image_size = tuple(self.low.shape[1:])

    def batch(self, rng: np.random.Generator, batch_size: int):
        # independent draws per domain: random unpaired pairing every step
        il = rng.integers(0, len(self.low), size=batch_size)
        ih = rng.integers(0, len(self.high), size=batch_size)
        t = lambda a: torch.from_numpy(np.ascontiguousarray(a[:, None]))
        return t(self.low[il]), t(self.high[ih]), t(self.gt_high[ih])


def code_version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if out.returncode == 0:
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_run_manifest(run_dir: Path, payload: dict, resolved_config: Optional[dict] = None) -> Path:
    """Write ``run.json`` and, when given, the resolved experiment config as ``config.yaml``."""
    if resolved_config is not None:
        with open(run_dir / "config.yaml", "w") as fh:
            yaml.safe_dump(resolved_config, fh, sort_keys=False)
    path = run_dir / "run.json"
    doc = {"code_version": code_version(), "torch": torch.__version__, "python": platform.python_version(),
           **payload}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True, default=str)
    return path


def prepare_run_dir(path, allow_existing=False) -> Path:
    """Create a fresh run directory; refuses to write into a non-empty one."""
    run_dir = Path(path)
    if run_dir.exists() and any(run_dir.iterdir()) and not allow_existing:
        raise ConfigError(f"run directory {run_dir} is not empty; runs are append-only")
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _epoch_path(run_dir: Path, epoch: int) -> Path:
    return run_dir / f"epoch_{epoch:03d}.npz"


def configure_determinism():
    torch.use_deterministic_algorithms(True)


def run_train_2d(manifest: DatasetManifest, config: TrainConfig2D,
                 net_config: Optional[NetworkConfig] = None, resume_from=None,
                 resolved_config: Optional[dict] = None) -> Path:
    """Train for ``config.epochs`` epochs and return the final checkpoint path.

    ``epoch_000.npz`` holds the initialization; ``epoch_{k}.npz`` the state after
    epoch ``k``. Each checkpoint has an ``.opt.pt`` sibling with optimizer state
    so a run can be resumed bit-for-bit (randomness is derived from
    ``(seed, epoch)``). Per-step losses go to ``metrics.jsonl``.
    """
    config.validate()
    configure_determinism()
    net_config = net_config_for(config.ablation, net_config or NetworkConfig(seed=config.seed))
    data = SliceData(manifest)
    if data.image_size != net_config.image_size:
        raise ConfigError(f"dataset slices are {data.image_size}, network expects {net_config.image_size}")
    run_dir = prepare_run_dir(config.checkpoint_dir)
    write_run_manifest(run_dir, {"stage": "train2d", "seed": config.seed, "train2d": asdict(config),
                                 "net": net_config.to_dict(), "resume_from": resume_from,
                                 "manifest_meta": manifest.meta}, resolved_config)

    nets = build_networks(net_config)
    opts = make_optimizers(nets, config.lr)
    start = 0
    if resume_from is not None:
        header, params = read_checkpoint(resume_from)
        if NetworkConfig(**header["config"]).to_dict() != net_config.to_dict():
            raise ConfigError(f"cannot resume from {resume_from}: network config differs")
        load_state(nets, params, resume_from)
        opts.load_state_dict(torch.load(Path(resume_from).with_suffix(".opt.pt"), weights_only=False))
        start = int(header["meta"]["epoch"])

    meta = {"ablation": config.ablation, "seed": config.seed}
    path = _epoch_path(run_dir, start)
    save_checkpoint(path, nets, net_config.to_dict(), "2d", {**meta, "epoch": start})
    torch.save(opts.state_dict(), path.with_suffix(".opt.pt"))
    if config.epochs == 0 or start >= config.epochs:
        return path

    steps = config.steps_per_epoch or math.ceil(max(len(data.low), len(data.high)) / config.batch_size)
    with open(run_dir / "metrics.jsonl", "a") as logf:
        for epoch in range(start, config.epochs):
            rng = np.random.default_rng([config.seed, epoch])
            for i in range(steps):
                x_l, x_h, gt_h = data.batch(rng, config.batch_size)
                report = train_step_2d(x_l, x_h, gt_h, nets, opts, config)
                step = epoch * steps + i
                if step % config.log_every == 0:
                    logf.write(report.to_json(epoch=epoch + 1, step=step) + "\n")
            logf.flush()
            path = _epoch_path(run_dir, epoch + 1)
            save_checkpoint(path, nets, net_config.to_dict(), "2d", {**meta, "epoch": epoch + 1})
            torch.save(opts.state_dict(), path.with_suffix(".opt.pt"))
            log.info("epoch %d/%d done: %s", epoch + 1, config.epochs, report.as_floats())
    return path
