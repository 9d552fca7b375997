"""The 2D disentanglement / segmentation networks.

Encoders ``E_l``, ``E_h`` (content) and ``E_a`` (artifact); generators ``G_l``
(content + artifact -> low-quality image), ``G_h`` (content + attention map ->
high-quality image) and ``G_s`` (content -> attention map); segmentors ``S_l``,
``S_h``; patch discriminators ``D_l``, ``D_h``.

Backbones follow the usual disentangled-translation layout: strided-conv
downsampling, residual blocks at the bottleneck, nearest-upsample + conv
decoding. In the anatomy-aware build every normalization in ``G_h``'s residual,
upsampling and final blocks is an :class:`~a3dseg.aade.AADE` layer; without it
``G_h`` ignores the attention map and ``G_s`` does not exist.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .aade import AADE, AADEHead, AADEParams
from .errors import CheckpointError, ConfigError, ContractError

CHECKPOINT_VERSION = 1


@dataclass
class NetworkConfig:
    image_size: tuple = (64, 64)
    base_channels: int = 32
    content_channels: int = 64
    artifact_channels: int = 16
    downsample_factor: int = 4
    n_res_blocks: int = 2
    seg_channels: int = 16
    anatomy_aware: bool = True
    aade: AADEParams = field(default_factory=AADEParams)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.aade, dict):
            self.aade = AADEParams(**self.aade)
        self.image_size = tuple(int(s) for s in self.image_size)

    def validate(self):
        f = self.downsample_factor
        if f < 1 or f & (f - 1):
            raise ConfigError("downsample_factor must be a power of two >= 1")
        if len(self.image_size) != 2 or any(s % f for s in self.image_size):
            raise ConfigError(f"image_size {self.image_size} not divisible by downsample_factor {f}")
        # segmentor U-Net pools twice; discriminator strides three times
        if any(s % 8 for s in self.image_size):
            raise ConfigError("image_size must be divisible by 8")
        for name in ("base_channels", "content_channels", "artifact_channels", "n_res_blocks", "seg_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def n_down(self) -> int:
        return int(math.log2(self.downsample_factor))

    @property
    def latent_size(self) -> tuple:
        return tuple(s // self.downsample_factor for s in self.image_size)

    def to_dict(self) -> dict:
        return asdict(self)


# -- building blocks ----------------------------------------------------------

class Encoder(nn.Module):
    def __init__(self, base, out_channels, n_down, n_res):
        super().__init__()
        layers = [nn.Conv2d(1, base, 7, padding=3), nn.BatchNorm2d(base), nn.ReLU()]
        ch = base
        for i in range(n_down):
            nxt = out_channels if i == n_down - 1 else base * 2 ** (i + 1)
            layers += [nn.Conv2d(ch, nxt, 4, stride=2, padding=1), nn.BatchNorm2d(nxt), nn.ReLU()]
            ch = nxt
        if n_down == 0:
            layers += [nn.Conv2d(ch, out_channels, 3, padding=1), nn.BatchNorm2d(out_channels), nn.ReLU()]
        self.stem = nn.Sequential(*layers)
        self.res = nn.ModuleList(ResBlock(out_channels) for _ in range(n_res))

    def forward(self, x):
        h = self.stem(x)
        for block in self.res:
            h = block(h)
        return h


class _Plain(nn.Module):
    """Affine batch norm with the same call signature as AADE (map is ignored)."""

    def __init__(self, channels):
        super().__init__()
        self.bn = nn.BatchNorm2d(channels)

    def forward(self, x, m=None):
        return self.bn(x)


class ResBlock(nn.Module):
    def __init__(self, ch, norm_factory=None):
        super().__init__()
        make = norm_factory or _Plain
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.norm1 = make(ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)
        self.norm2 = make(ch)

    def forward(self, x, m=None):
        h = F.relu(self.norm1(self.conv1(x), m))
        h = self.norm2(self.conv2(h), m)
        return x + h


class UpBlock(nn.Module):
    def __init__(self, cin, cout, norm_factory):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm = norm_factory(cout)

    def forward(self, x, m=None):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return F.relu(self.norm(self.conv(x), m))


class FinalBlock(nn.Module):
    def __init__(self, cin, base, norm_factory):
        super().__init__()
        self.conv = nn.Conv2d(cin, base, 3, padding=1)
        self.norm = norm_factory(base)
        self.out = nn.Conv2d(base, 1, 7, padding=3)

    def forward(self, x, m=None):
        h = F.relu(self.norm(self.conv(x), m))
        return torch.sigmoid(self.out(h))


class Generator(nn.Module):
    """Image decoder; ``aade`` switches every norm site to anatomy-aware de-normalization."""

    def __init__(self, cfg: NetworkConfig, in_channels: int, aade: bool = False):
        super().__init__()
        c = cfg.content_channels
        self.uses_attention = aade
        if aade:
            heads: dict[int, AADEHead] = {}

            def norm_factory(ch):
                head = None
                if cfg.aade.shared_heads:
                    if ch not in heads:
                        heads[ch] = AADEHead(ch, cfg.aade.hidden_channels)
                    head = heads[ch]
                return AADE(ch, cfg.aade, head)
        else:
            norm_factory = _Plain
        # G_l fuses content and artifact codes by channel concatenation
        self.fuse = nn.Conv2d(in_channels, c, 3, padding=1) if in_channels != c else None
        self.res = nn.ModuleList(ResBlock(c, norm_factory) for _ in range(cfg.n_res_blocks))
        ups = []
        ch = c
        for i in range(cfg.n_down):
            nxt = max(cfg.base_channels, ch // 2)
            ups.append(UpBlock(ch, nxt, norm_factory))
            ch = nxt
        self.up = nn.ModuleList(ups)
        self.final = FinalBlock(ch, cfg.base_channels, norm_factory)

    def forward(self, code, m=None):
        if self.uses_attention and m is None:
            raise ContractError("anatomy-aware generator needs an attention map")
        m = m if self.uses_attention else None
        h = code if self.fuse is None else F.relu(self.fuse(code))
        for block in self.res:
            h = block(h, m)
        for block in self.up:
            h = block(h, m)
        return self.final(h, m)


class ShapeGenerator(nn.Module):
    """Content code -> soft vertebra map, computed at latent size then upsampled."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        b = cfg.base_channels
        self.image_size = cfg.image_size
        self.body = nn.Sequential(
            nn.Conv2d(cfg.content_channels, b, 3, padding=1), nn.BatchNorm2d(b), nn.ReLU(),
            nn.Conv2d(b, b, 3, padding=1), nn.BatchNorm2d(b), nn.ReLU(),
            nn.Conv2d(b, 1, 1),
        )

    def forward(self, c):
        m = torch.sigmoid(self.body(c))
        return F.interpolate(m, size=self.image_size, mode="bilinear", align_corners=True)


def _double_conv(cin, cout, conv=nn.Conv2d, norm=nn.BatchNorm2d):
    return nn.Sequential(conv(cin, cout, 3, padding=1), norm(cout), nn.ReLU(),
                         conv(cout, cout, 3, padding=1), norm(cout), nn.ReLU())


class UNet(nn.Module):
    """Two-level U-Net with a sigmoid head; ``dim`` selects 2D or 3D convolutions."""

    def __init__(self, ch: int, dim: int = 2):
        super().__init__()
        conv = nn.Conv2d if dim == 2 else nn.Conv3d
        norm = nn.BatchNorm2d if dim == 2 else nn.BatchNorm3d
        tconv = nn.ConvTranspose2d if dim == 2 else nn.ConvTranspose3d
        self.pool = F.max_pool2d if dim == 2 else F.max_pool3d
        self.enc1 = _double_conv(1, ch, conv, norm)
        self.enc2 = _double_conv(ch, 2 * ch, conv, norm)
        self.mid = _double_conv(2 * ch, 4 * ch, conv, norm)
        self.up2 = tconv(4 * ch, 2 * ch, 2, stride=2)
        self.dec2 = _double_conv(4 * ch, 2 * ch, conv, norm)
        self.up1 = tconv(2 * ch, ch, 2, stride=2)
        self.dec1 = _double_conv(2 * ch, ch, conv, norm)
        self.head = conv(ch, 1, 1)

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(self.pool(e1, 2))
        h = self.mid(self.pool(e2, 2))
        h = self.dec2(torch.cat([self.up2(h), e2], 1))
        h = self.dec1(torch.cat([self.up1(h), e1], 1))
        return torch.sigmoid(self.head(h))


class PatchDiscriminator(nn.Module):
    """Outputs realness logits on a grid; ``strides`` is the declared downsampling."""

    strides = (2, 2, 2, 1)

    def __init__(self, base: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(1, base, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(base, 2 * base, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * base, 4 * base, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(4 * base, 1, 3, stride=1, padding=1),
        )

    def forward(self, x):
        return self.body(x)


# -- bundles ------------------------------------------------------------------

class NetworkBundle(nn.Module):
    GENERATOR_NAMES = ("E_l", "E_h", "E_a", "G_l", "G_h", "G_s", "S_l", "S_h")
    DISCRIMINATOR_NAMES = ("D_l", "D_h")

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.config = cfg
        b, c, a = cfg.base_channels, cfg.content_channels, cfg.artifact_channels
        self.E_l = Encoder(b, c, cfg.n_down, cfg.n_res_blocks)
        self.E_h = Encoder(b, c, cfg.n_down, cfg.n_res_blocks)
        self.E_a = Encoder(b, a, cfg.n_down, cfg.n_res_blocks)
        self.G_l = Generator(cfg, c + a, aade=False)
        self.G_h = Generator(cfg, c, aade=cfg.anatomy_aware)
        self.G_s = ShapeGenerator(cfg) if cfg.anatomy_aware else None
        self.S_l = UNet(cfg.seg_channels)
        self.S_h = UNet(cfg.seg_channels)
        self.D_l = PatchDiscriminator(b)
        self.D_h = PatchDiscriminator(b)

    def generator_parameters(self):
        for name in self.GENERATOR_NAMES:
            net = getattr(self, name)
            if net is not None:
                yield from net.parameters()

    def discriminator_parameters(self):
        for name in self.DISCRIMINATOR_NAMES:
            yield from getattr(self, name).parameters()

    def shape(self, c):
        return None if self.G_s is None else self.G_s(c)


def build_networks(config: NetworkConfig) -> NetworkBundle:
    config.validate()
    devnull = torch.random.fork_rng(devices=[])
    with devnull:
        torch.manual_seed(config.seed)
        nets = NetworkBundle(config)
    return nets


@dataclass
class LatentBundle:
    c_l: torch.Tensor
    c_h: torch.Tensor
    a: torch.Tensor


@dataclass
class SynthesisBundle:
    x_ll: torch.Tensor
    x_lh: torch.Tensor
    x_hl: torch.Tensor
    x_hh: torch.Tensor
    x_cycle: torch.Tensor
    m_l: Optional[torch.Tensor] = None
    m_h: Optional[torch.Tensor] = None


@dataclass
class SegBundle:
    y_l: torch.Tensor
    y_ll: torch.Tensor
    y_hl: torch.Tensor
    y_h: torch.Tensor
    y_hh: torch.Tensor
    y_lh: torch.Tensor


def _check_image(x, nets: NetworkBundle, name: str):
    size = nets.config.image_size
    if x.dim() != 4 or x.shape[1] != 1 or tuple(x.shape[-2:]) != size:
        raise ContractError(f"{name} must be (N, 1, {size[0]}, {size[1]}), got {tuple(x.shape)}")


def forward_synthesis(x_l, x_h, nets: NetworkBundle) -> tuple[LatentBundle, SynthesisBundle]:
    _check_image(x_l, nets, "x_l")
    _check_image(x_h, nets, "x_h")
    c_l, c_h, a = nets.E_l(x_l), nets.E_h(x_h), nets.E_a(x_l)
    x_ll = nets.G_l(torch.cat([c_l, a], 1))
    x_hl = nets.G_l(torch.cat([c_h, a], 1))
    m_l, m_h = nets.shape(c_l), nets.shape(c_h)
    x_lh = nets.G_h(c_l, m_l)
    x_hh = nets.G_h(c_h, m_h)
    # x_h -> x_hl -> back to high quality through the low-quality content encoder
    c_cycle = nets.E_l(x_hl)
    x_cycle = nets.G_h(c_cycle, nets.shape(c_cycle))
    return (LatentBundle(c_l, c_h, a),
            SynthesisBundle(x_ll, x_lh, x_hl, x_hh, x_cycle, m_l, m_h))


def forward_segmentation(x_l, x_h, synth: SynthesisBundle, nets: NetworkBundle) -> SegBundle:
    if x_l.shape != synth.x_ll.shape or x_h.shape != synth.x_hh.shape:
        raise ContractError("synthesis bundle does not match the input images")
    n_l, n_h = x_l.shape[0], x_h.shape[0]
    # one call per segmentor; BN statistics see all three inputs together
    low = nets.S_l(torch.cat([x_l, synth.x_ll, synth.x_hl], 0))
    high = nets.S_h(torch.cat([x_h, synth.x_hh, synth.x_lh], 0))
    y_l, y_ll, y_hl = torch.split(low, [n_l, n_l, n_h], 0)
    y_h, y_hh, y_lh = torch.split(high, [n_h, n_h, n_l], 0)
    return SegBundle(y_l=y_l, y_ll=y_ll, y_hl=y_hl, y_h=y_h, y_hh=y_hh, y_lh=y_lh)


def discriminate(x, domain: str, nets: NetworkBundle) -> torch.Tensor:
    if domain not in ("low", "high"):
        raise ContractError(f"unknown domain tag {domain!r}")
    _check_image(x, nets, "x")
    d = nets.D_l if domain == "low" else nets.D_h
    return torch.sigmoid(d(x))


def translate(nets: NetworkBundle, x, direction: str, artifact_source=None):
    """Single-direction translation used at inference (2D slices, (N, 1, H, W))."""
    _check_image(x, nets, "x")
    if direction == "low_to_high":
        c = nets.E_l(x)
        return nets.G_h(c, nets.shape(c))
    if direction == "high_to_low":
        if artifact_source is None:
            raise ContractError("high_to_low translation needs a low-quality artifact source")
        _check_image(artifact_source, nets, "artifact_source")
        return nets.G_l(torch.cat([nets.E_h(x), nets.E_a(artifact_source)], 1))
    raise ContractError(f"unknown direction {direction!r}")


LOW_HEADS = ("y_l", "y_ll", "y_lh", "m_l")
HIGH_HEADS = ("y_h", "y_hh", "y_hl", "m_h")


@torch.no_grad()
def predict_heads(nets: NetworkBundle, x, domain: str, artifact_source=None) -> dict:
    """All prediction heads available for a batch from one domain (eval mode)."""
    _check_image(x, nets, "x")
    if domain == "low":
        c, a = nets.E_l(x), nets.E_a(x)
        m = nets.shape(c)
        out = {"y_l": nets.S_l(x),
               "y_ll": nets.S_l(nets.G_l(torch.cat([c, a], 1))),
               "y_lh": nets.S_h(nets.G_h(c, m))}
        if m is not None:
            out["m_l"] = m
        return out
    if domain == "high":
        c = nets.E_h(x)
        m = nets.shape(c)
        out = {"y_h": nets.S_h(x), "y_hh": nets.S_h(nets.G_h(c, m))}
        if artifact_source is not None:
            out["y_hl"] = nets.S_l(translate(nets, x, "high_to_low", artifact_source))
        if m is not None:
            out["m_h"] = m
        return out
    raise ContractError(f"unknown domain tag {domain!r}")


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(path, nets: nn.Module, config: dict, kind: str = "2d", meta: dict | None = None) -> Path:
    """Write a versioned ``.npz`` archive of named parameter/buffer arrays plus config JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in nets.state_dict().items()}
    header = {"version": CHECKPOINT_VERSION, "kind": kind, "config": config, "meta": meta or {}}
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())
    return path


def read_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(header, {name: array})`` from a checkpoint archive."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(bytes(z["__header__"]).decode())
            params = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version in {path}")
    return header, params


def load_state(module: nn.Module, params: dict, path="<memory>") -> None:
    state = module.state_dict()
    if set(state) != set(params):
        raise CheckpointError(f"checkpoint {path} parameter names do not match the network")
    for k, v in state.items():
        if tuple(v.shape) != tuple(params[k].shape):
            raise CheckpointError(f"checkpoint {path}: shape mismatch for {k}")
    module.load_state_dict({k: torch.from_numpy(np.array(params[k])) for k in state})


def load_networks(path, config: NetworkConfig | None = None) -> NetworkBundle:
    """Load a 2D checkpoint; a ``config`` differing from the stored one is an error."""
    header, params = read_checkpoint(path)
    if header.get("kind") != "2d":
        raise CheckpointError(f"{path} is not a 2D network checkpoint")
    stored = NetworkConfig(**header["config"])
    if config is not None and config.to_dict() != stored.to_dict():
        raise CheckpointError(f"checkpoint {path} was written with a different NetworkConfig")
    nets = NetworkBundle(stored)
    load_state(nets, params, path)
    nets.eval()
    return nets
