"""Anatomy-aware de-normalization (AADE).

A parameter-free batch normalization followed by a spatial scale and shift,
both predicted from the shape attention map resampled to the feature size::

    out = (f - mean(f)) / max(std(f), eps) * gamma(R(m)) + beta(R(m))

gamma and beta come from a small conv head: one shared 3x3 conv into a hidden
space, then one 3x3 conv each for gamma and beta.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError


@dataclass
class AADEParams:
    hidden_channels: int = 32
    eps: float = 1e-5
    # one head per AADE site (default) or one head per distinct channel width
    shared_heads: bool = False

    def validate(self):
        if self.hidden_channels < 1:
            raise ContractError("hidden_channels must be >= 1")
        if not self.eps > 0:
            raise ContractError("eps must be > 0")


def resample_map(m: torch.Tensor, target_hw) -> torch.Tensor:
    """Bilinear resampling (corner-aligned) of an (N, 1, H, W) map to ``target_hw``."""
    th, tw = (int(s) for s in target_hw)
    if th <= 0 or tw <= 0:
        raise ContractError(f"target dims must be positive, got {target_hw}")
    if tuple(m.shape[-2:]) == (th, tw):
        return m
    # convex combinations of inputs, so [0, 1] is preserved
    return F.interpolate(m, size=(th, tw), mode="bilinear", align_corners=True)


class ParamFreeNorm(nn.Module):
    """Batch normalization without affine parameters and with a floor on sigma.

    Training mode uses per-channel statistics over batch and spatial dims and
    updates running estimates; eval mode uses the running estimates.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def forward(self, x):
        dims = [0] + list(range(2, x.dim()))
        if self.training:
            mean = x.mean(dim=dims)
            var = x.var(dim=dims, unbiased=False)
            with torch.no_grad():
                self.running_mean.lerp_(mean.detach(), self.momentum)
                self.running_var.lerp_(var.detach(), self.momentum)
        else:
            mean, var = self.running_mean, self.running_var
        shape = (1, -1) + (1,) * (x.dim() - 2)
        # sqrt(max(var, eps^2)) == max(sigma, eps) but keeps a finite gradient at var == 0
        sigma = torch.sqrt(torch.clamp(var, min=self.eps**2))
        return (x - mean.view(shape)) / sigma.view(shape)


class AADEHead(nn.Module):
    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.shared = nn.Sequential(nn.Conv2d(1, hidden, 3, padding=1), nn.ReLU())
        self.gamma = nn.Conv2d(hidden, channels, 3, padding=1)
        self.beta = nn.Conv2d(hidden, channels, 3, padding=1)
        # start close to plain normalization: gamma ~ 1, beta ~ 0
        nn.init.ones_(self.gamma.bias)
        nn.init.zeros_(self.beta.bias)

    def forward(self, m):
        h = self.shared(m)
        return self.gamma(h), self.beta(h)


class AADE(nn.Module):
    def __init__(self, channels: int, params: AADEParams = AADEParams(), head: AADEHead | None = None):
        super().__init__()
        params.validate()
        self.channels = channels
        self.norm = ParamFreeNorm(channels, eps=params.eps)
        self.head = head if head is not None else AADEHead(channels, params.hidden_channels)

    def forward(self, x, m):
        if m is None:
            raise ContractError("AADE layer requires an attention map")
        normalized = self.norm(x)
        gamma, beta = self.head(resample_map(m, x.shape[-2:]))
        return normalized * gamma + beta


def aade_apply(f_in: torch.Tensor, m: torch.Tensor, layer: AADE) -> torch.Tensor:
    if not torch.isfinite(f_in).all():
        raise ContractError("feature map contains non-finite values")
    if m.min() < 0 or m.max() > 1:
        raise ContractError("attention map must lie in [0, 1]")
    return layer(f_in, m)
