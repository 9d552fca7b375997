"""Image-domain and shape-domain objectives, and the weighted total.

Reduction convention: every L1 and cross-entropy term is a mean over elements;
equations that list several pairs add their per-pair means. Dice losses sum
over the whole tensor (batch included).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import torch

from .errors import ConfigError, ContractError

DICE_SMOOTH = 1e-6
_LOG_FLOOR = 1e-7

TERMS = ("adv", "recon", "cycle", "arti", "segm", "segm_m", "anat")

ACTIVE_TERMS = {
    "M1": frozenset({"recon", "adv", "cycle", "segm"}),
}
ACTIVE_TERMS["M2"] = ACTIVE_TERMS["M1"] | {"anat"}
ACTIVE_TERMS["M3"] = ACTIVE_TERMS["M2"] | {"segm_m", "arti"}
ACTIVE_TERMS["M4"] = ACTIVE_TERMS["M3"] - {"arti"}

# AADE and G_s only exist from M3 on
ANATOMY_AWARE = {"M1": False, "M2": False, "M3": True, "M4": True}


def check_ablation(tag: str) -> str:
    if tag not in ACTIVE_TERMS:
        raise ConfigError(f"unknown ablation {tag!r}; expected one of {sorted(ACTIVE_TERMS)}")
    return tag


@dataclass
class LossWeights:
    w_adv: float = 1.0
    w_recon: float = 5.0
    w_cycle: float = 5.0
    w_arti: float = 5.0
    w_segm: float = 5.0
    w_segm_m: float = 5.0
    w_anat: float = 5.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ConfigError(f"loss weight {k} must be nonnegative")

    def weight(self, term: str) -> float:
        return getattr(self, f"w_{term}")


@dataclass
class LossReport:
    terms: dict
    total: torch.Tensor
    active: list = field(default_factory=list)

    def as_floats(self) -> dict:
        out = {k: float(v) for k, v in self.terms.items()}
        out["total"] = float(self.total.detach())
        return out

    def to_json(self, **extra) -> str:
        return json.dumps({**extra, **self.as_floats(), "active": sorted(self.active)}, sort_keys=True)


def _same_shape(*pairs):
    for a, b in pairs:
        if a.shape != b.shape:
            raise ContractError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _l1(a, b):
    _same_shape((a, b))
    return (a - b).abs().mean()


def dice_loss(y, gt, smooth: float = DICE_SMOOTH):
    """Soft Dice loss ``1 - (2 sum(y gt) + s) / (sum(y) + sum(gt) + s)``."""
    _same_shape((y, gt))
    inter = (y * gt).sum()
    return 1.0 - (2.0 * inter + smooth) / (y.sum() + gt.sum() + smooth)


def loss_recon(x_l, x_ll, x_h, x_hh):
    return _l1(x_l, x_ll) + _l1(x_h, x_hh)


def _nlog(p):
    return -torch.log(torch.clamp(p, min=_LOG_FLOOR))


def loss_adv(real_l, fake_l, real_h, fake_h, mode: str = "generator", form: str = "bce"):
    """Adversarial loss on realness maps in (0, 1).

    ``fake_l`` is ``D_l(x_hl)`` and ``fake_h`` is ``D_h(x_lh)``. ``form="bce"``
    is the standard cross-entropy GAN loss with the non-saturating generator;
    ``form="printed"`` keeps the ``1 - log D(fake)`` expression as typeset in the
    original objective, which has no finite minimizer for the discriminator.
    """
    if mode not in ("generator", "discriminator"):
        raise ContractError(f"unknown adversarial mode {mode!r}")
    if form not in ("bce", "printed"):
        raise ContractError(f"unknown adversarial form {form!r}")
    if mode == "generator":
        g = _nlog(fake_l).mean() + _nlog(fake_h).mean()
        return g + 2.0 if form == "printed" else g
    if form == "bce":
        return (_nlog(real_l).mean() + _nlog(1.0 - fake_l).mean()
                + _nlog(real_h).mean() + _nlog(1.0 - fake_h).mean())
    # discriminator ascends log D(real) + 1 - log D(fake)
    return (_nlog(real_l).mean() - _nlog(fake_l).mean() - 1.0
            + _nlog(real_h).mean() - _nlog(fake_h).mean() - 1.0)


def loss_cycle(x_h, x_cycle):
    return _l1(x_cycle, x_h)


def loss_arti(x_l, x_lh, x_hl, x_h):
    _same_shape((x_l, x_lh), (x_hl, x_h), (x_l, x_h))
    return ((x_l - x_lh) - (x_hl - x_h)).abs().mean()


def loss_segm(segs, m_h, gt_h):
    """Returns ``(segm, segm_m)``; ``segm_m`` is ``None`` when no attention map exists."""
    if gt_h is None:
        raise ContractError("loss_segm needs the high-quality ground truth")
    segm = dice_loss(segs.y_h, gt_h) + dice_loss(segs.y_hl, gt_h) + dice_loss(segs.y_hh, gt_h)
    segm_m = None if m_h is None else dice_loss(m_h, gt_h)
    return segm, segm_m


def loss_anat(segs):
    return (_l1(segs.y_l, segs.y_ll) + _l1(segs.y_h, segs.y_hh)
            + _l1(segs.y_l, segs.y_lh) + _l1(segs.y_h, segs.y_hl))


def total_loss(terms: dict, weights: LossWeights, ablation: str) -> LossReport:
    """Weighted sum over the terms active in ``ablation``; inactive terms are ignored."""
    active = ACTIVE_TERMS[check_ablation(ablation)]
    missing = [t for t in active if terms.get(t) is None]
    if missing:
        raise ContractError(f"ablation {ablation} needs terms {sorted(missing)}")
    total = 0.0
    for t in sorted(active):
        total = total + weights.weight(t) * terms[t]
    if not torch.is_tensor(total):
        total = torch.tensor(float(total))
    report = LossReport(terms={t: terms[t].detach() if torch.is_tensor(terms[t]) else torch.tensor(float(terms[t]))
                               for t in active},
                        total=total, active=sorted(active))
    bad = [k for k, v in report.as_floats().items() if not math.isfinite(v)]
    if bad:
        raise ContractError(f"non-finite loss terms: {bad}")
    return report
