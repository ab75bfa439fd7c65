"""Event-guided deformable temporal feature alignment.

Neighbor-frame features (t-1, t+1) are warped onto timestamp t with modulated
deformable convolution. Offsets are predicted from templates that mix frame
and event features and are refined coarse-to-fine: the offset feature of
scale s+1 is upsampled with a 4x4 transposed conv and fed into scale s.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .primitives import ModulatedDeformConv, TransposedAttentionBlock, UpsampleDeconv4

NUM_SCALES = 3
FORWARD, BACKWARD = "forward", "backward"


class AlignmentError(ValueError):
    pass


@dataclass
class PyramidBundle:
    """``blur[k][s]`` / ``event[k][s]`` for k in (t-1, t, t+1), s in (0, 1, 2)."""

    blur: list
    event: list

    def __post_init__(self):
        for name, pyr in (("blur", self.blur), ("event", self.event)):
            if len(pyr) != 3 or any(len(levels) != NUM_SCALES for levels in pyr):
                raise AlignmentError(f"{name} pyramid must be 3 timestamps x {NUM_SCALES} scales")
        for s in range(NUM_SCALES):
            ref = self.blur[1][s].shape
            for k in range(3):
                for pyr in (self.blur, self.event):
                    if pyr[k][s].shape != ref:
                        raise AlignmentError(f"scale {s}: shape {tuple(pyr[k][s].shape)} != {tuple(ref)}")
            if s > 0:
                prev = self.blur[1][s - 1].shape
                if ref[-2] * 2 != prev[-2] or ref[-1] * 2 != prev[-1]:
                    raise AlignmentError(f"scale {s} does not halve scale {s - 1}")

    def level(self, s: int):
        return [self.blur[k][s] for k in range(3)], [self.event[k][s] for k in range(3)]


@dataclass
class AlignState:
    scale: int
    aligned: torch.Tensor
    offset_feat_fwd: torch.Tensor
    offset_feat_bwd: torch.Tensor
    offsets_fwd: Optional[torch.Tensor] = None
    offsets_bwd: Optional[torch.Tensor] = None
    masks_fwd: Optional[torch.Tensor] = None
    masks_bwd: Optional[torch.Tensor] = None


@dataclass
class BranchOutput:
    aligned: torch.Tensor
    offset_feat: torch.Tensor
    offsets: torch.Tensor
    masks: torch.Tensor


class TransformerEncoder(nn.Module):
    """Three-scale pyramid of transposed-attention blocks.

    Downsampling halves channels with a 3x3 conv then pixel-unshuffles, so
    each scale has twice the channels of the previous one.
    """

    def __init__(self, channels: int, depths=(2, 2, 2), heads=(1, 2, 4), ffn_expansion: float = 2.0):
        super().__init__()
        self.levels = nn.ModuleList()
        self.downs = nn.ModuleList()
        for s in range(NUM_SCALES):
            c = channels << s
            self.levels.append(nn.Sequential(*[TransposedAttentionBlock(c, heads[s], ffn_expansion)
                                               for _ in range(depths[s])]))
            if s < NUM_SCALES - 1:
                self.downs.append(nn.Sequential(nn.Conv2d(c, c // 2, 3, padding=1, bias=False), nn.PixelUnshuffle(2)))

    def forward(self, x) -> List[torch.Tensor]:
        out = []
        for s in range(NUM_SCALES):
            x = self.levels[s](x)
            out.append(x)
            if s < NUM_SCALES - 1:
                x = self.downs[s](x)
        return out


class AlignBranch(nn.Module):
    """One alignment direction at one scale."""

    def __init__(self, channels: int, has_prev: bool, offset_groups: int = 8, kernel_size: int = 3):
        super().__init__()
        c = channels
        self.has_prev = has_prev
        self.template_conv = nn.Conv2d(4 * c, c, 1)
        if has_prev:
            self.up_offset = UpsampleDeconv4(2 * c, c)
        self.offset_feat = nn.Conv2d(2 * c if has_prev else c, c, 3, padding=1)
        self.dcn = ModulatedDeformConv(c, c, kernel_size, offset_groups)
        self.offset_head = nn.Conv2d(c, self.dcn.offset_channels, 1)
        self.mask_head = nn.Conv2d(c, self.dcn.mask_channels, 1)
        # zero heads: offsets start at 0 and masks at sigmoid(0) = 0.5
        for head in (self.offset_head, self.mask_head):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def build_template(self, blur_t, blur_n, event_t, event_n):
        shapes = {tuple(t.shape) for t in (blur_t, blur_n, event_t, event_n)}
        if len(shapes) != 1:
            raise AlignmentError(f"template inputs differ in shape: {sorted(shapes)}")
        return F.relu(self.template_conv(torch.cat([blur_t, blur_n, event_t, event_n], dim=1)))

    def align(self, template, prev_offset_feat=None) -> BranchOutput:
        feat = template
        if self.has_prev:
            if prev_offset_feat is None:
                raise AlignmentError("finer scale requires the coarser offset feature")
            if prev_offset_feat.shape[-2] * 2 != template.shape[-2] or prev_offset_feat.shape[-1] * 2 != template.shape[-1]:
                raise AlignmentError(
                    f"offset feature {tuple(prev_offset_feat.shape[-2:])} is not from the next coarser scale"
                )
            feat = torch.cat([feat, self.up_offset(prev_offset_feat)], dim=1)
        elif prev_offset_feat is not None:
            raise AlignmentError("coarsest scale takes no previous offset feature")
        offset_feat = F.leaky_relu(self.offset_feat(feat), 0.1)
        offsets = self.offset_head(offset_feat)
        masks = torch.sigmoid(self.mask_head(offset_feat))
        aligned = self.dcn(template, offsets, masks)
        return BranchOutput(aligned, offset_feat, offsets, masks)

    def forward(self, blur_t, blur_n, event_t, event_n, prev_offset_feat=None) -> BranchOutput:
        return self.align(self.build_template(blur_t, blur_n, event_t, event_n), prev_offset_feat)


class EDTFALevel(nn.Module):
    def __init__(self, channels: int, scale: int, offset_groups: int = 8, kernel_size: int = 3):
        super().__init__()
        self.scale = scale
        coarsest = scale == NUM_SCALES - 1
        self.forward_branch = AlignBranch(channels, not coarsest, offset_groups, kernel_size)
        self.backward_branch = AlignBranch(channels, not coarsest, offset_groups, kernel_size)
        self.residual = nn.Conv2d(2 * channels, channels, 3, padding=1)
        if coarsest:
            self.base = nn.Conv2d(channels, channels, 3, padding=1)
        else:
            self.base = UpsampleDeconv4(2 * channels, channels)

    def forward(self, blur, event, prev: Optional[AlignState] = None) -> AlignState:
        """``blur`` and ``event`` are ``[t-1, t, t+1]`` features at this scale."""
        s = self.scale
        if s == NUM_SCALES - 1:
            if prev is not None:
                raise AlignmentError(f"scale {s} is the coarsest and takes no previous state")
            base = self.base(blur[1])
            prev_fwd = prev_bwd = None
        else:
            if prev is None or prev.scale != s + 1:
                got = None if prev is None else prev.scale
                raise AlignmentError(f"scale {s} needs the state from scale {s + 1}, got {got}")
            base = self.base(prev.aligned)
            prev_fwd, prev_bwd = prev.offset_feat_fwd, prev.offset_feat_bwd
        fwd = self.forward_branch(blur[1], blur[0], event[1], event[0], prev_fwd)
        bwd = self.backward_branch(blur[1], blur[2], event[1], event[2], prev_bwd)
        aligned = base + self.residual(torch.cat([fwd.aligned, bwd.aligned], dim=1))
        return AlignState(s, aligned, fwd.offset_feat, bwd.offset_feat, fwd.offsets, bwd.offsets, fwd.masks, bwd.masks)


def edtfa_level(level: EDTFALevel, bundle: PyramidBundle, prev: Optional[AlignState] = None) -> AlignState:
    blur, event = bundle.level(level.scale)
    return level(blur, event, prev)


class EDTFA(nn.Module):
    """Coarse-to-fine alignment stack over three scales."""

    def __init__(self, channels: int, offset_groups: int = 8, kernel_size: int = 3):
        super().__init__()
        self.levels = nn.ModuleList(
            [EDTFALevel(channels << s, s, offset_groups, kernel_size) for s in range(NUM_SCALES)]
        )

    def forward(self, bundle: PyramidBundle) -> List[AlignState]:
        """Return states ordered s = 2, 1, 0; the last holds the full-resolution feature."""
        states = []
        prev = None
        for s in reversed(range(NUM_SCALES)):
            prev = edtfa_level(self.levels[s], bundle, prev)
            states.append(prev)
        return states
