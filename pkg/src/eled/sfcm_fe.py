"""Spectral-filtering cross-modal feature enhancement.

Per scale, aligned-frame and event features (plus the upsampled result of
the coarser scale) are merged, split in two branches, and recombined:

* branch (a): Gaussian low-pass in the Fourier domain, spectral 1x1 conv
  block, residual, then a per-pixel dynamic filter;
* branch (b): passes through untouched;
* the two are fused with per-input spatial attention and refined by
  channel-attention blocks.

Alternative fusion heads used for ablations live here as well.
"""

from __future__ import annotations

from typing import List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .primitives import (
    ChannelAttentionBlock,
    DynamicFilterPredictor,
    LayerNorm2d,
    SpatialAttentionFuse,
    SpectralFilter,
    UpsampleDeconv4,
    gaussian_lowpass_mask,
    pixelwise_dynamic_filter,
)

NUM_SCALES = 3


class FusionError(ValueError):
    pass


def default_sigma(height: int, width: int, divisor: float = 4.0) -> float:
    return max(height, width) / divisor


class SFCMFELevel(nn.Module):
    def __init__(
        self,
        channels: int,
        scale: int,
        kf: int = 3,
        n_cab: int = 4,
        use_lpf: bool = True,
        use_sa: bool = True,
        use_cab: bool = True,
        per_channel_dynamic: bool = False,
        sigma: Optional[float] = None,
        sigma_divisor: float = 4.0,
    ):
        super().__init__()
        c = channels
        self.scale = scale
        self.kf = kf
        self.sigma = sigma
        self.sigma_divisor = sigma_divisor
        self.has_prev = scale < NUM_SCALES - 1
        if self.has_prev:
            self.up = UpsampleDeconv4(2 * c, c)
        self.merge = nn.Conv2d((3 if self.has_prev else 2) * c, c, 3, padding=1)
        self.split_a = nn.Conv2d(c, c, 3, padding=1)
        self.split_b = nn.Conv2d(c, c, 3, padding=1)
        self.use_lpf, self.use_sa, self.use_cab = use_lpf, use_sa, use_cab
        if use_lpf:
            self.spectral = SpectralFilter(c)
            self.kernel_predictor = DynamicFilterPredictor(c, kf, per_channel_dynamic)
        if use_sa:
            self.fuse = SpatialAttentionFuse(c)
        self.cabs = nn.Sequential(*[ChannelAttentionBlock(c) for _ in range(n_cab if use_cab else 0)])

    def resolve_sigma(self, height: int, width: int) -> float:
        sigma = self.sigma if self.sigma is not None else default_sigma(height, width, self.sigma_divisor)
        if not sigma > 0:
            raise FusionError(f"sigma must be positive, got {sigma}")
        return sigma

    def mask_for(self, x, sigma=None):
        h, w = x.shape[-2:]
        sigma = self.resolve_sigma(h, w) if sigma is None else sigma
        if not sigma > 0:
            raise FusionError(f"sigma must be positive, got {sigma}")
        return gaussian_lowpass_mask(h, w, sigma, dtype=x.dtype, device=x.device)

    def merged(self, aligned, event, prev=None):
        if aligned.shape != event.shape:
            raise FusionError(f"aligned {tuple(aligned.shape)} and event {tuple(event.shape)} features differ")
        parts = [event, aligned]
        if self.has_prev:
            if prev is None:
                raise FusionError(f"scale {self.scale} needs the enhanced feature of scale {self.scale + 1}")
            up = self.up(prev)
            if up.shape != aligned.shape:
                raise FusionError(f"upsampled previous feature {tuple(up.shape)} != {tuple(aligned.shape)}")
            parts.append(up)
        elif prev is not None:
            raise FusionError("coarsest scale takes no previous feature")
        return F.leaky_relu(self.merge(torch.cat(parts, dim=1)), 0.1)

    def branch_a(self, feat, sigma=None):
        """Low-pass branch: spectral filter (with residual) then dynamic filter."""
        if not self.use_lpf:
            return feat
        low = self.spectral(feat, self.mask_for(feat, sigma))
        kernels = self.kernel_predictor(low)
        return pixelwise_dynamic_filter(low, kernels, self.kf, check=False)

    def forward(self, aligned, event, prev=None, sigma=None):
        merged = self.merged(aligned, event, prev)
        a = self.branch_a(self.split_a(merged), sigma)
        b = self.split_b(merged)
        fused = self.fuse(a, b) if self.use_sa else a + b
        return self.cabs(fused)


def sfcm_fe_level(level: SFCMFELevel, aligned, event, prev=None, sigma=None):
    return level(aligned, event, prev, sigma)


class Conv1x1Fusion(nn.Module):
    """Ablation stand-in: a single 1x1 conv over the concatenated modalities."""

    def __init__(self, channels: int, scale: int):
        super().__init__()
        self.scale = scale
        self.proj = nn.Conv2d(2 * channels, channels, 1)

    def forward(self, aligned, event, prev=None, sigma=None):
        if aligned.shape != event.shape:
            raise FusionError("aligned and event features differ in shape")
        return self.proj(torch.cat([aligned, event], dim=1))


class CrossAttentionFusion(nn.Module):
    """Ablation stand-in for EFNet-style fusion: frame queries attend to event
    keys/values across channels, then a 1x1 merge with a residual."""

    def __init__(self, channels: int, scale: int, heads: int = 1):
        super().__init__()
        self.scale = scale
        self.heads = heads
        self.norm_a = LayerNorm2d(channels)
        self.norm_e = LayerNorm2d(channels)
        self.q = nn.Conv2d(channels, channels, 1, bias=False)
        self.kv = nn.Conv2d(channels, 2 * channels, 1, bias=False)
        self.temperature = nn.Parameter(torch.ones(heads, 1, 1))
        self.proj = nn.Conv2d(channels, channels, 1, bias=False)
        self.merge = nn.Conv2d(2 * channels, channels, 1)

    def forward(self, aligned, event, prev=None, sigma=None):
        if aligned.shape != event.shape:
            raise FusionError("aligned and event features differ in shape")
        n, c, h, w = aligned.shape
        shape = (n, self.heads, c // self.heads, h * w)
        q = F.normalize(self.q(self.norm_a(aligned)).reshape(shape), dim=-1)
        k, v = self.kv(self.norm_e(event)).chunk(2, dim=1)
        k = F.normalize(k.reshape(shape), dim=-1)
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.temperature, dim=-1)
        attended = self.proj((attn @ v.reshape(shape)).reshape(n, c, h, w))
        return aligned + self.merge(torch.cat([aligned + attended, event], dim=1))


class GatedFusion(nn.Module):
    """Ablation stand-in for REFID-style fusion: a learned per-pixel gate
    blends the two modalities before a residual refinement."""

    def __init__(self, channels: int, scale: int):
        super().__init__()
        self.scale = scale
        self.gate = nn.Conv2d(2 * channels, channels, 3, padding=1)
        self.refine = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1), nn.LeakyReLU(0.1), nn.Conv2d(channels, channels, 3, padding=1)
        )

    def forward(self, aligned, event, prev=None, sigma=None):
        if aligned.shape != event.shape:
            raise FusionError("aligned and event features differ in shape")
        g = torch.sigmoid(self.gate(torch.cat([aligned, event], dim=1)))
        blended = g * aligned + (1 - g) * event
        return blended + self.refine(blended)


class SFCMFE(nn.Module):
    """Fusion stack over three scales, run coarse to fine."""

    def __init__(
        self,
        channels: int,
        mode: str = "sfcm",
        kf: int = 3,
        n_cab: int = 4,
        use_lpf: bool = True,
        use_sa: bool = True,
        use_cab: bool = True,
        per_channel_dynamic: bool = False,
        sigmas: Optional[Sequence[float]] = None,
        sigma_divisor: float = 4.0,
    ):
        super().__init__()
        self.mode = mode
        levels = []
        for s in range(NUM_SCALES):
            c = channels << s
            if mode == "sfcm":
                sigma = None if sigmas is None else sigmas[s]
                levels.append(SFCMFELevel(c, s, kf, n_cab, use_lpf, use_sa, use_cab, per_channel_dynamic,
                                          sigma, sigma_divisor))
            elif mode == "conv1x1":
                levels.append(Conv1x1Fusion(c, s))
            elif mode == "efnet":
                levels.append(CrossAttentionFusion(c, s))
            elif mode == "refid":
                levels.append(GatedFusion(c, s))
            else:
                raise FusionError(f"unknown fusion mode {mode!r}")
        self.levels = nn.ModuleList(levels)

    def forward(self, aligned_pyr: List[torch.Tensor], event_pyr: List[torch.Tensor]) -> List[torch.Tensor]:
        """Return enhanced features ordered by scale, ``[s=0, s=1, s=2]``."""
        if len(aligned_pyr) != NUM_SCALES or len(event_pyr) != NUM_SCALES:
            raise FusionError(f"pyramids need {NUM_SCALES} scales, got {len(aligned_pyr)} and {len(event_pyr)}")
        out: List[Optional[torch.Tensor]] = [None] * NUM_SCALES
        prev = None
        for s in reversed(range(NUM_SCALES)):
            level = self.levels[s]
            takes_prev = isinstance(level, SFCMFELevel) and level.has_prev
            prev = level(aligned_pyr[s], event_pyr[s], prev if takes_prev else None)
            out[s] = prev
        return out


def run_pyramid(module: SFCMFE, aligned_pyr, event_pyr):
    return module(aligned_pyr, event_pyr)
