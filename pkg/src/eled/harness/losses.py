from __future__ import annotations

import torch

from ..network import downsample


def charbonnier(a, b, eps: float = 1e-3):
    return torch.sqrt((a - b) ** 2 + eps**2).mean()


def multiscale_loss(outputs, target, weights=(1.0, 0.5, 0.25), eps: float = 1e-3):
    """Weighted Charbonnier over the three output scales; the target is
    bilinearly downsampled to each scale."""
    outputs = list(outputs)
    if len(outputs) != len(weights):
        raise ValueError(f"{len(outputs)} outputs but {len(weights)} weights")
    if target.shape != outputs[0].shape:
        raise ValueError(f"target {tuple(target.shape)} does not match full-scale output {tuple(outputs[0].shape)}")
    total = outputs[0].new_zeros(())
    for s, (out, w) in enumerate(zip(outputs, weights)):
        ref = downsample(target, s)
        if ref.shape != out.shape:
            raise ValueError(f"scale {s}: output {tuple(out.shape)} vs target {tuple(ref.shape)}")
        if w:
            total = total + w * charbonnier(out, ref, eps)
    return total
