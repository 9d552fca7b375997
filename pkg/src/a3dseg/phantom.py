"""Procedural spine phantoms and a CBCT-like degradation model.

A phantom is a stack of axial slices (depth axis first). Soft tissue fills an
elliptical body outline, and ``n_vertebrae`` rounded-rectangle/ellipsoid bodies
are stacked along the depth axis, separated by darker disc gaps. Every voxel
lies in exactly one of the configured air / tissue / bone intensity intervals.

The degradation adds contrast compression, an optional metal blob, straight
streaks, and Gaussian noise, then clips to [0, 1].
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ContractError
from .storage import DatasetManifest, ManifestEntry, write_tensor

log = logging.getLogger(__name__)


@dataclass
class Volume:
    array: np.ndarray
    spacing_mm: tuple
    domain: str = "high"

    @property
    def shape(self):
        return self.array.shape


def _default_ranges():
    return {"air": (0.0, 0.05), "tissue": (0.25, 0.45), "bone": (0.65, 0.95)}


@dataclass
class PhantomConfig:
    volume_shape: tuple = (32, 64, 64)
    spacing_mm: tuple = (1.0, 0.5, 0.5)
    n_vertebrae: int = 3
    intensity_ranges: dict = field(default_factory=_default_ranges)
    seed: int = 0

    def validate(self) -> None:
        shape = tuple(self.volume_shape)
        if len(shape) != 3 or any(int(s) < 16 for s in shape):
            raise ConfigError(f"volume_shape must have 3 components >= 16, got {shape}")
        if len(self.spacing_mm) != 3 or any(float(s) <= 0 for s in self.spacing_mm):
            raise ConfigError(f"spacing_mm must have 3 positive components, got {self.spacing_mm}")
        if self.n_vertebrae < 0:
            raise ConfigError("n_vertebrae must be >= 0")
        try:
            air, tissue, bone = (tuple(self.intensity_ranges[k]) for k in ("air", "tissue", "bone"))
        except KeyError as exc:
            raise ConfigError(f"intensity_ranges missing {exc}") from exc
        for name, (lo, hi) in zip(("air", "tissue", "bone"), (air, tissue, bone)):
            if not 0.0 <= lo <= hi <= 1.0:
                raise ConfigError(f"{name} range {lo, hi} must lie inside [0, 1]")
        if not (air[1] < tissue[0] and tissue[1] < bone[0]):
            raise ConfigError("intensity intervals must be disjoint with bone > tissue > air")
        # vertebra + disc must fit in depth
        if self.n_vertebrae and int(shape[0]) // self.n_vertebrae < 4:
            raise ConfigError("too many vertebrae for the volume depth")


@dataclass
class DegradationParams:
    noise_sigma: float = 0.04
    n_streaks: int = 6
    streak_amplitude: float = 0.25
    contrast_gamma: float = 0.6
    metal_prob: float = 0.5

    def validate(self) -> None:
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.n_streaks < 0:
            raise ConfigError("n_streaks must be >= 0")
        if self.contrast_gamma <= 0:
            raise ConfigError("contrast_gamma must be > 0")
        if not 0.0 <= self.metal_prob <= 1.0:
            raise ConfigError("metal_prob must be in [0, 1]")


def _smooth_field(rng, shape, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="wrap")
    f -= f.min()
    peak = f.max()
    return f / peak if peak > 0 else f


def generate_phantom(config: PhantomConfig) -> tuple[Volume, np.ndarray]:
    """Return ``(volume, mask)`` for ``config``; a pure function of the config."""
    config.validate()
    D, H, W = (int(s) for s in config.volume_shape)
    rng = np.random.default_rng(config.seed)
    air = tuple(config.intensity_ranges["air"])
    tissue = tuple(config.intensity_ranges["tissue"])
    bone = tuple(config.intensity_ranges["bone"])

    z, y, x = np.meshgrid(
        np.arange(D, dtype=np.float64),
        (np.arange(H) - (H - 1) / 2) / H,
        (np.arange(W) - (W - 1) / 2) / W,
        indexing="ij",
    )

    # body outline, slowly varying along depth
    by = 0.40 + 0.04 * rng.uniform(-1, 1)
    bx = 0.44 + 0.04 * rng.uniform(-1, 1)
    wobble = 1.0 + 0.05 * np.sin(2 * np.pi * z / D * rng.uniform(0.5, 1.5) + rng.uniform(0, 2 * np.pi))
    body = (y / by) ** 2 + (x / bx) ** 2 <= wobble**2

    vol = np.empty((D, H, W), dtype=np.float64)
    vol[:] = air[0] + (air[1] - air[0]) * _smooth_field(rng, (D, H, W), 3.0)
    t_tex = _smooth_field(rng, (D, H, W), 4.0)
    t_lo = rng.uniform(tissue[0], tissue[0] + 0.3 * (tissue[1] - tissue[0]))
    vol[body] = (t_lo + (tissue[1] - t_lo) * t_tex)[body]

    mask = np.zeros((D, H, W), dtype=np.uint8)
    n = config.n_vertebrae
    if n > 0:
        span = D / n
        gap = max(2, int(round(0.2 * span)))
        # spine follows a gentle curve in-plane
        cy0 = 0.08 + 0.04 * rng.uniform(-1, 1)
        cx0 = 0.03 * rng.uniform(-1, 1)
        curve_y = 0.03 * rng.uniform(-1, 1)
        curve_x = 0.03 * rng.uniform(-1, 1)
        b_tex = _smooth_field(rng, (D, H, W), 2.0)
        for k in range(n):
            z0 = int(round(k * span)) + gap // 2
            z1 = int(round((k + 1) * span)) - (gap - gap // 2)
            if z1 <= z0:
                continue
            zc = 0.5 * (z0 + z1 - 1)
            half = max(0.5 * (z1 - z0), 1.0)
            frac = (zc / D) - 0.5
            cy = cy0 + curve_y * 4 * frac**2 + 0.01 * rng.uniform(-1, 1)
            cx = cx0 + curve_x * 2 * frac + 0.01 * rng.uniform(-1, 1)
            ay = rng.uniform(0.11, 0.15)
            ax = rng.uniform(0.13, 0.18)
            p = rng.uniform(2.5, 4.0)
            zs = slice(z0, z1)
            t = (z[zs] - zc) / (half + 0.5)
            # barrel profile: slightly narrower at the end plates
            radius = 1.0 - 0.25 * t**2
            r = (np.abs((y[zs] - cy) / ay) ** p + np.abs((x[zs] - cx) / ax) ** p) ** (1.0 / p)
            inside = (r <= radius) & body[zs]
            shell = inside & (r >= 0.8 * radius)
            b_mid = bone[0] + 0.55 * (bone[1] - bone[0])
            core = bone[0] + (b_mid - bone[0]) * b_tex[zs]
            cortex = b_mid + (bone[1] - b_mid) * b_tex[zs]
            vz = vol[zs]
            vz[inside] = core[inside]
            vz[shell] = cortex[shell]
            mask[zs][inside] = 1
        # darker disc band between bodies, still inside the tissue interval
        disc = np.zeros(D, dtype=bool)
        for k in range(1, n):
            b = int(round(k * span))
            disc[max(b - gap // 2, 0): b + (gap - gap // 2)] = True
        r_disc = ((y - cy0) / 0.14) ** 2 + ((x - cx0) / 0.17) ** 2 <= 1.0
        sel = disc[:, None, None] & r_disc & body
        vol[sel] = tissue[0] + 0.2 * (tissue[1] - tissue[0]) * t_tex[sel]

    vol = vol.astype(np.float32)
    return Volume(vol, tuple(float(s) for s in config.spacing_mm), "high"), mask


def _draw_streaks(H, W, n, amplitude, rng, through=None, width=0.7):
    """Sum of ``n`` straight Gaussian ridges; angles are stratified over [0, pi)."""
    yy, xx = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    out = np.zeros((H, W))
    theta0 = rng.uniform(0, np.pi)
    for k in range(n):
        theta = theta0 + (k + 0.25 * rng.uniform(-1, 1)) * np.pi / n
        if through is None:
            py = rng.uniform(0.3 * H, 0.7 * H)
            px = rng.uniform(0.3 * W, 0.7 * W)
        else:
            py, px = through
        # distance from the line through (py, px) with direction (sin, cos)
        d = np.abs((yy - py) * np.cos(theta) - (xx - px) * np.sin(theta))
        ridge = np.exp(-0.5 * (d / width) ** 2)
        if through is not None:
            along = np.hypot(yy - py, xx - px)
            ridge *= 0.4 + 0.6 * np.exp(-along / (0.3 * max(H, W)))
        out = np.maximum(out, amplitude * ridge)
    return out


def degrade_to_cbct(volume: Volume, params: DegradationParams, seed: int) -> Volume:
    params.validate()
    arr = np.asarray(volume.array)
    if not np.all(np.isfinite(arr)):
        raise ContractError("volume contains non-finite values")
    squeeze = arr.ndim == 2
    x = arr[None] if squeeze else arr
    x = x.astype(np.float64, copy=True)
    D, H, W = x.shape
    rng = np.random.default_rng(seed)

    if params.contrast_gamma != 1.0:
        x = np.clip(x, 0.0, 1.0) ** params.contrast_gamma

    metal_center = None
    metal_slices = range(0)
    if params.metal_prob > 0 and rng.uniform() < params.metal_prob:
        cy = rng.uniform(0.4 * H, 0.65 * H)
        cx = rng.uniform(0.3 * W, 0.7 * W)
        zc = rng.uniform(0.2 * D, 0.8 * D)
        rz = max(1.5, rng.uniform(0.1, 0.2) * D)
        ry, rx = rng.uniform(0.03, 0.06) * H, rng.uniform(0.06, 0.12) * W
        zz, yy, xx = np.meshgrid(np.arange(D), np.arange(H), np.arange(W), indexing="ij")
        blob = ((zz - zc) / rz) ** 2 + ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        x[blob] = 1.0
        metal_center = (cy, cx)
        metal_slices = range(max(0, int(np.ceil(zc - rz))), min(D, int(np.floor(zc + rz)) + 1))

    if params.n_streaks > 0 and params.streak_amplitude != 0:
        for k in range(D):
            through = metal_center if k in metal_slices else None
            x[k] += _draw_streaks(H, W, params.n_streaks, params.streak_amplitude, rng, through)

    if params.noise_sigma > 0:
        x += params.noise_sigma * rng.standard_normal(x.shape)

    x = np.clip(x, 0.0, 1.0).astype(np.float32)
    if squeeze:
        x = x[0]
    return Volume(x, tuple(volume.spacing_mm), "low")


def _phantom_seed(base: int, index: int) -> int:
    return int(base) * 1_000_000 + int(index)


def build_dataset(config: PhantomConfig, params: DegradationParams, n_low: int, n_high: int,
                  out_dir, n_test: int = 0) -> DatasetManifest:
    """Generate and persist an unpaired dataset, returning its manifest.

    Train entries: ``n_low`` degraded volumes without masks and ``n_high`` clean
    volumes with masks. Test entries: ``n_test`` of each domain, all with masks.
    Every entry is generated from its own phantom seed, so no two entries share
    anatomy. The manifest is written to ``out_dir/manifest.json``.
    """
    config.validate()
    params.validate()
    out_dir = Path(out_dir)
    plan = (
        [("low", "train")] * n_low
        + [("high", "train")] * n_high
        + [("low", "test")] * n_test
        + [("high", "test")] * n_test
    )
    entries = []
    for idx, (domain, split) in enumerate(plan):
        seed = _phantom_seed(config.seed, idx)
        cfg = PhantomConfig(**{**asdict(config), "seed": seed})
        vol, mask = generate_phantom(cfg)
        if domain == "low":
            vol = degrade_to_cbct(vol, params, seed=seed + 500_000)
        name = f"{split}_{domain}_{idx:05d}"
        vpath = write_tensor(out_dir / "volumes" / name, vol.array, vol.spacing_mm, domain)
        mpath = None
        if not (domain == "low" and split == "train"):
            mpath = write_tensor(out_dir / "masks" / name, mask.astype(np.float32), vol.spacing_mm, domain)
        entries.append(ManifestEntry(
            id=name,
            volume_path=str(vpath.relative_to(out_dir)),
            mask_path=None if mpath is None else str(mpath.relative_to(out_dir)),
            domain=domain,
            split=split,
            spacing_mm=vol.spacing_mm,
            seed=seed,
        ))
    manifest = DatasetManifest(entries=entries, root=out_dir,
                               meta={"phantom": asdict(config), "degradation": asdict(params)})
    manifest.validate()
    manifest.save(out_dir / "manifest.json")
    log.info("wrote %d entries to %s", len(entries), out_dir)
    return manifest
