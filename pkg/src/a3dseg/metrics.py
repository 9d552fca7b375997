"""Dice score, average symmetric surface distance, and model evaluation.

Surface convention: a mask voxel is on the surface when at least one
face-adjacent neighbour is background (6-connectivity in 3D, 4 in 2D); voxels
on the array border count as surface. Distances are Euclidean in millimetres.
"""
from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import ndimage

from .errors import ContractError, DatasetError, MetricError

THRESHOLD = 0.5


def binarize(pred, threshold: float = THRESHOLD) -> np.ndarray:
    return np.asarray(pred) >= threshold


def dice_score(pred, gt, threshold: float = THRESHOLD) -> float:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    p = binarize(pred, threshold)
    g = gt.astype(bool)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def surface(mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, structure=structure, border_value=0)


def surface_distances(a, b, spacing_mm) -> np.ndarray:
    """Distance from every surface voxel of ``a`` to the nearest surface voxel of ``b``."""
    sa, sb = surface(a), surface(b)
    dist = ndimage.distance_transform_edt(~sb, sampling=spacing_mm)
    return dist[sa]


def asd(pred_mask, gt_mask, spacing_mm) -> float:
    pred_mask, gt_mask = np.asarray(pred_mask, bool), np.asarray(gt_mask, bool)
    if pred_mask.shape != gt_mask.shape:
        raise ContractError(f"shape mismatch: {pred_mask.shape} vs {gt_mask.shape}")
    if len(spacing_mm) != pred_mask.ndim:
        raise ContractError(f"spacing {spacing_mm} does not match a {pred_mask.ndim}-D mask")
    if not pred_mask.any() or not gt_mask.any():
        raise MetricError("ASD is undefined for an empty mask")
    d_ab = surface_distances(pred_mask, gt_mask, spacing_mm)
    d_ba = surface_distances(gt_mask, pred_mask, spacing_mm)
    return float((d_ab.sum() + d_ba.sum()) / (d_ab.size + d_ba.size))


def asd_in_plane(pred_mask, gt_mask, spacing_mm) -> float:
    """Mean of per-slice 2D ASD over slices where both masks are nonempty."""
    vals = [asd(p, g, spacing_mm[1:]) for p, g in zip(pred_mask, gt_mask) if p.any() and g.any()]
    if not vals:
        raise MetricError("no slice has both masks nonempty")
    return float(np.mean(vals))


def slice_discontinuity(mask) -> float:
    """Mean absolute difference between adjacent binarized slices along axis 0."""
    m = np.asarray(mask, dtype=np.float64)
    if m.shape[0] < 2:
        return 0.0
    return float(np.abs(np.diff(m, axis=0)).mean())


@dataclass
class VolumeResult:
    id: str
    dice: float
    asd: Optional[float]
    error: Optional[str] = None


@dataclass
class EvalReport:
    mode: str
    which: str
    volumes: list = field(default_factory=list)
    mean_dice: float = float("nan")
    mean_asd: Optional[float] = None
    n_asd_excluded: int = 0
    fingerprint: str = ""
    mean_discontinuity: Optional[float] = None

    def finalize(self) -> "EvalReport":
        dices = [v.dice for v in self.volumes]
        asds = [v.asd for v in self.volumes if v.asd is not None]
        self.mean_dice = float(np.mean(dices)) if dices else float("nan")
        self.mean_asd = float(np.mean(asds)) if asds else None
        self.n_asd_excluded = len(self.volumes) - len(asds)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def render(self) -> str:
        lines = [f"mode={self.mode} head={self.which} fingerprint={self.fingerprint[:12]}",
                 f"{'volume':<24}{'Dice':>8}{'ASD(mm)':>10}"]
        for v in self.volumes:
            a = f"{v.asd:.2f}" if v.asd is not None else "n.a."
            lines.append(f"{v.id:<24}{v.dice:>8.3f}{a:>10}")
        a = f"{self.mean_asd:.2f}" if self.mean_asd is not None else "n.a."
        lines.append(f"{'mean':<24}{self.mean_dice:>8.3f}{a:>10}")
        if self.n_asd_excluded:
            lines.append(f"({self.n_asd_excluded} volume(s) excluded from mean ASD: empty mask)")
        return "\n".join(lines)


def fmt_cell(dice: Optional[float], asd_mm: Optional[float]) -> str:
    d = "n.a." if dice is None else f"{dice:.3f}".lstrip("0")
    a = "n.a." if asd_mm is None else f"{asd_mm:.2f}"
    return f"{d}/{a}"


TABLE_HEADS = ("m_l", "y_l", "y_ll", "y_lh", "m_h", "y_h", "y_hh", "y_hl")


def render_table(rows: dict) -> str:
    """Plain-text Dice/ASD table, one row per model, one column per prediction head.

    ``rows`` maps a row label to ``{head: EvalReport or None}``.
    """
    width = 13
    out = ["Dice/ASD(mm)".ljust(14) + "".join(h.rjust(width) for h in TABLE_HEADS)]
    for label, reports in rows.items():
        cells = []
        for h in TABLE_HEADS:
            r = reports.get(h)
            cells.append(fmt_cell(None, None) if r is None else fmt_cell(r.mean_dice, r.mean_asd))
        out.append(str(label).ljust(14) + "".join(c.rjust(width) for c in cells))
    return "\n".join(out)


def head_domain(which: str) -> str:
    if which in ("y_l", "y_ll", "y_lh", "m_l"):
        return "low"
    if which in ("y_h", "y_hh", "y_hl", "m_h"):
        return "high"
    raise ContractError(f"unknown prediction head {which!r}")


def config_fingerprint(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def evaluate_predictions(predict: Callable, manifest, mode: str, which: str,
                         fingerprint: str = "") -> EvalReport:
    """Score ``predict(volume, artifact_source, spacing_mm) -> soft map`` on the test split.

    Heads of the low-quality branch run on low-quality test volumes, the others
    on high-quality test volumes. Heads that need an artifact code (``y_hl``)
    borrow it from the low-quality test volume at the same list position.
    """
    if mode not in ("2d", "3d"):
        raise ContractError(f"unknown evaluation mode {mode!r}")
    domain = head_domain(which)
    entries = manifest.select(domain=domain, split="test")
    if not entries:
        raise DatasetError(f"no {domain}-quality test entries in manifest")
    missing = [e.id for e in entries if e.mask_path is None]
    if missing:
        raise DatasetError(f"test entries without masks: {missing[:5]}")
    sources = manifest.select(domain="low", split="test")
    report = EvalReport(mode=mode, which=which, fingerprint=fingerprint)
    disc = []
    for i, e in enumerate(entries):
        vol = manifest.load_volume(e)
        src = manifest.load_volume(sources[i % len(sources)]) if which == "y_hl" and sources else None
        pred = np.asarray(predict(vol, src, e.spacing_mm))
        gt = manifest.load_mask(e)
        if pred.shape != gt.shape:
            raise ContractError(f"prediction for {e.id} has shape {pred.shape}, mask {gt.shape}")
        d = dice_score(pred, gt)
        b = binarize(pred)
        disc.append(slice_discontinuity(b))
        try:
            a = asd(b, gt, e.spacing_mm) if mode == "3d" else asd_in_plane(b, gt, e.spacing_mm)
            report.volumes.append(VolumeResult(e.id, d, a))
        except MetricError as exc:
            warnings.warn(f"{e.id}: ASD excluded ({exc})")
            report.volumes.append(VolumeResult(e.id, d, None, str(exc)))
    report.mean_discontinuity = float(np.mean(disc))
    return report.finalize()


def evaluate_model(checkpoint, manifest, mode: str = "2d", which: str = "y_lh") -> EvalReport:
    """Evaluate a saved 2D or 3D checkpoint (or a predictor callable) on the test split."""
    if callable(checkpoint):
        return evaluate_predictions(checkpoint, manifest, mode, which,
                                    fingerprint=config_fingerprint(getattr(checkpoint, "__name__", "callable")))
    from .seg3d import make_predictor  # deferred: seg3d imports this module

    predict, fingerprint = make_predictor(checkpoint, mode, which)
    return evaluate_predictions(predict, manifest, mode, which, fingerprint)
