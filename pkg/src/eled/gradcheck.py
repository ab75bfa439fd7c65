"""Analytic-vs-central-difference gradient checks for the learned primitives.

Each case builds a small double-precision module and random 2-channel 6x6
inputs, projects the output onto a fixed random tensor to get a scalar, and
compares autograd gradients (w.r.t. inputs and parameters) with central
differences. The error is the relative L2 distance of the full gradient
vectors.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence

import torch

from .primitives import (
    ChannelAttentionBlock,
    SpatialAttentionFuse,
    SpectralFilter,
    TransposedAttentionBlock,
    UpsampleDeconv4,
    deform_conv2d,
    gaussian_lowpass_mask,
    pixelwise_dynamic_filter,
)

DTYPE = torch.float64
CHANNELS, SIZE = 2, 6


@dataclass
class GradCheckResult:
    name: str
    trial: int
    rel_error: float
    passed: bool
    seconds: float


def central_difference(scalar_fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor], h: float = 1e-6):
    grads = []
    with torch.no_grad():
        for t in tensors:
            g = torch.zeros_like(t)
            flat, gflat = t.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = scalar_fn().item()
                flat[i] = orig - h
                down = scalar_fn().item()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def relative_gradient_error(fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor], seed: int = 0) -> float:
    """``fn`` maps the (captured) tensors to an output tensor."""
    with torch.no_grad():
        probe = fn()
    gen = torch.Generator().manual_seed(seed + 7919)
    proj = torch.randn(probe.shape, generator=gen, dtype=probe.dtype)
    scalar = lambda: (fn() * proj).sum()
    analytic = torch.autograd.grad(scalar(), list(tensors), allow_unused=True)
    analytic = [torch.zeros_like(t) if g is None else g for g, t in zip(analytic, tensors)]
    numeric = central_difference(scalar, tensors)
    a = torch.cat([g.reshape(-1) for g in analytic])
    n = torch.cat([g.reshape(-1) for g in numeric])
    denom = max(a.norm().item(), n.norm().item(), 1e-12)
    return (a - n).norm().item() / denom


def _rand(gen, *shape, scale=1.0):
    return (torch.randn(*shape, generator=gen, dtype=DTYPE) * scale).requires_grad_(True)


def _module_params(module):
    return [p for p in module.parameters()]


def _randomize(module, gen, scale=0.5):
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=DTYPE) * scale)
    return module


def case_transposed_attention(gen):
    block = _randomize(TransposedAttentionBlock(CHANNELS, heads=1).to(DTYPE), gen)
    x = _rand(gen, 1, CHANNELS, SIZE, SIZE)
    return (lambda: block(x)), [x] + _module_params(block)


def case_deformable_conv(gen):
    k, groups = 3, 1
    x = _rand(gen, 1, CHANNELS, SIZE, SIZE)
    # continuous random offsets avoid the bilinear kinks at integer positions
    offset = _rand(gen, 1, 2 * groups * k * k, SIZE, SIZE, scale=1.3)
    mask_logits = _rand(gen, 1, groups * k * k, SIZE, SIZE)
    weight = _rand(gen, CHANNELS, CHANNELS, k, k, scale=0.5)
    bias = _rand(gen, CHANNELS, scale=0.1)
    fn = lambda: deform_conv2d(x, offset, torch.sigmoid(mask_logits), weight, bias)
    return fn, [x, offset, mask_logits, weight, bias]


def case_dynamic_filter(gen):
    x = _rand(gen, 1, CHANNELS, SIZE, SIZE)
    logits = _rand(gen, 1, 9, SIZE, SIZE)
    fn = lambda: pixelwise_dynamic_filter(x, torch.softmax(logits, dim=1), 3)
    return fn, [x, logits]


def case_spectral_filter(gen):
    module = _randomize(SpectralFilter(CHANNELS, identity_init=False).to(DTYPE), gen)
    mask = gaussian_lowpass_mask(SIZE, SIZE, SIZE / 4, dtype=DTYPE)
    x = _rand(gen, 1, CHANNELS, SIZE, SIZE)
    return (lambda: module(x, mask)), [x] + _module_params(module)


def case_channel_attention(gen):
    block = _randomize(ChannelAttentionBlock(CHANNELS).to(DTYPE), gen)
    x = _rand(gen, 1, CHANNELS, SIZE, SIZE)
    return (lambda: block(x)), [x] + _module_params(block)


def case_spatial_fuse(gen):
    fuse = _randomize(SpatialAttentionFuse(CHANNELS).to(DTYPE), gen)
    a = _rand(gen, 1, CHANNELS, SIZE, SIZE)
    b = _rand(gen, 1, CHANNELS, SIZE, SIZE)
    return (lambda: fuse(a, b)), [a, b] + _module_params(fuse)


def case_deconv4(gen):
    up = _randomize(UpsampleDeconv4(CHANNELS).to(DTYPE), gen)
    x = _rand(gen, 1, CHANNELS, SIZE, SIZE)
    return (lambda: up(x)), [x] + _module_params(up)


CASES: Dict[str, Callable] = {
    "transposed_attention": case_transposed_attention,
    "deformable_conv": case_deformable_conv,
    "dynamic_filter": case_dynamic_filter,
    "spectral_filter": case_spectral_filter,
    "channel_attention": case_channel_attention,
    "spatial_attention_fuse": case_spatial_fuse,
    "deconv4": case_deconv4,
}


def run_case(name: str, trial: int, tol: float = 1e-4) -> GradCheckResult:
    start = time.perf_counter()
    gen = torch.Generator().manual_seed(1000 * trial + sum(map(ord, name)))
    fn, tensors = CASES[name](gen)
    err = relative_gradient_error(fn, tensors, seed=trial)
    return GradCheckResult(name, trial, err, err < tol, time.perf_counter() - start)


def run_suite(trials: int = 5, tol: float = 1e-4, names=None) -> List[GradCheckResult]:
    names = list(CASES) if names is None else list(names)
    unknown = set(names) - set(CASES)
    if unknown:
        raise KeyError(f"unknown gradcheck cases: {sorted(unknown)}")
    return [run_case(n, t, tol) for n in names for t in range(trials)]
