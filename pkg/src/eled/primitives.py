"""Learned building blocks shared by the alignment, fusion and decoder stages.

Tensors are NCHW throughout.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def gaussian_lowpass_mask(height: int, width: int, sigma: float, dtype=torch.float64, device=None) -> torch.Tensor:
    """Gaussian low-pass mask on a DC-centered spectrum.

    The center sits at ``(W // 2, H // 2)``, which is where ``fftshift`` puts
    the DC term, so the mask is 1 at DC and decays radially.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    yc, xc = height // 2, width // 2
    y = torch.arange(height, dtype=dtype, device=device)[:, None]
    x = torch.arange(width, dtype=dtype, device=device)[None, :]
    r2 = (x - xc) ** 2 + (y - yc) ** 2
    return torch.exp(-r2 / (2.0 * float(sigma) ** 2))


class SpectralConv(nn.Module):
    """1x1 conv, ReLU, 1x1 conv over stacked (real, imag) spectrum channels.

    The hidden width is twice the input width so the block can represent the
    identity exactly: relu(z) - relu(-z) = z.
    """

    def __init__(self, channels: int, identity_init: bool = True):
        super().__init__()
        c2 = 2 * channels
        self.conv1 = nn.Conv2d(c2, 2 * c2, 1)
        self.conv2 = nn.Conv2d(2 * c2, c2, 1)
        if identity_init:
            self.reset_identity()

    @torch.no_grad()
    def reset_identity(self):
        c2 = self.conv2.out_channels
        eye = torch.eye(c2)
        self.conv1.weight.copy_(torch.cat([eye, -eye], 0)[:, :, None, None])
        self.conv2.weight.copy_(torch.cat([eye, -eye], 1)[:, :, None, None])
        self.conv1.bias.zero_()
        self.conv2.bias.zero_()

    def forward(self, z):
        return self.conv2(F.relu(self.conv1(z)))


class SpectralFilter(nn.Module):
    """Low-pass filtering in the Fourier domain followed by a spectral conv,
    with a residual connection back to the spatial input."""

    def __init__(self, channels: int, identity_init: bool = True):
        super().__init__()
        self.channels = channels
        self.spectral_conv = SpectralConv(channels, identity_init)

    def filtered(self, x, mask):
        """Filtered component only (no residual)."""
        if mask.shape[-2:] != x.shape[-2:]:
            raise ValueError(f"mask {tuple(mask.shape[-2:])} does not match feature {tuple(x.shape[-2:])}")
        c = x.shape[1]
        spec = torch.fft.fftshift(torch.fft.fft2(x, norm="ortho"), dim=(-2, -1))
        spec = spec * mask.to(dtype=x.dtype, device=x.device)
        z = self.spectral_conv(torch.cat([spec.real, spec.imag], dim=1))
        spec = torch.complex(z[:, :c], z[:, c:])
        return torch.fft.ifft2(torch.fft.ifftshift(spec, dim=(-2, -1)), norm="ortho").real

    def forward(self, x, mask):
        return x + self.filtered(x, mask)


def spectral_filter(x, mask, module: SpectralFilter):
    return module(x, mask)


def deform_conv2d(x, offset, mask, weight, bias=None):
    """Modulated deformable convolution, stride 1, "same" padding.

    ``offset`` is ``(N, 2*G*k*k, H, W)`` laid out per group and tap as
    ``(dy, dx)`` pairs (taps in row-major order); ``mask`` is ``(N, G*k*k, H, W)``
    in [0, 1]. Samples outside the feature map read as zero.
    """
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"kernel must be square and odd, got {kh}x{kw}")
    if cin != c:
        raise ValueError(f"weight expects {cin} input channels, got {c}")
    taps = kh * kw
    if offset.shape[1] % (2 * taps) != 0:
        raise ValueError(f"offset channels {offset.shape[1]} not a multiple of 2*{taps}")
    groups = offset.shape[1] // (2 * taps)
    if c % groups != 0:
        raise ValueError(f"{groups} offset groups do not divide {c} channels")
    if mask.shape[1] != groups * taps:
        raise ValueError(f"mask has {mask.shape[1]} channels, expected {groups * taps}")
    if offset.shape[-2:] != (h, w) or mask.shape[-2:] != (h, w):
        raise ValueError("offset/mask spatial size must match input")
    lo, hi = float(mask.detach().min()), float(mask.detach().max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"modulation mask outside [0, 1]: [{lo}, {hi}]")

    r = kh // 2
    dtype, device = x.dtype, x.device
    tap_y = (torch.arange(kh, dtype=dtype, device=device) - r).repeat_interleave(kw)
    tap_x = (torch.arange(kw, dtype=dtype, device=device) - r).repeat(kh)
    base_y = torch.arange(h, dtype=dtype, device=device)
    base_x = torch.arange(w, dtype=dtype, device=device)

    off = offset.view(n, groups, taps, 2, h, w)
    py = base_y[:, None] + tap_y[:, None, None] + off[:, :, :, 0]  # (n, g, taps, h, w)
    px = base_x[None, :] + tap_x[:, None, None] + off[:, :, :, 1]
    # pixel index -> normalized coordinate for align_corners=False
    gx = (2.0 * px + 1.0) / w - 1.0
    gy = (2.0 * py + 1.0) / h - 1.0
    grid = torch.stack([gx, gy], dim=-1).view(n * groups, taps * h, w, 2)
    sampled = F.grid_sample(
        x.reshape(n * groups, c // groups, h, w), grid, mode="bilinear", padding_mode="zeros", align_corners=False
    )
    sampled = sampled.view(n, groups, c // groups, taps, h, w) * mask.view(n, groups, 1, taps, h, w)
    out = torch.einsum("nckhw,ock->nohw", sampled.reshape(n, c, taps, h, w), weight.reshape(cout, c, taps))
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1)
    return out


class ModulatedDeformConv(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, offset_groups: int = 8, bias=True):
        super().__init__()
        if in_channels % offset_groups != 0:
            raise ValueError(f"{offset_groups} offset groups do not divide {in_channels} channels")
        self.kernel_size = kernel_size
        self.offset_groups = offset_groups
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))

    @property
    def offset_channels(self) -> int:
        return 2 * self.offset_groups * self.kernel_size**2

    @property
    def mask_channels(self) -> int:
        return self.offset_groups * self.kernel_size**2

    def forward(self, x, offset, mask):
        return deform_conv2d(x, offset, mask, self.weight, self.bias)


def pixelwise_dynamic_filter(x, kernels, kernel_size: int = 3, check: bool = True):
    """Apply a per-pixel ``k x k`` kernel with zero padding.

    ``kernels`` is ``(N, k*k, H, W)`` (shared across channels) or
    ``(N, C*k*k, H, W)`` (one kernel per channel). Each pixel's taps must sum
    to 1.
    """
    n, c, h, w = x.shape
    k = kernel_size
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    taps = k * k
    if kernels.shape[-2:] != (h, w):
        raise ValueError("kernel map spatial size must match input")
    if kernels.shape[1] == taps:
        kv = kernels.view(n, 1, taps, h, w)
    elif kernels.shape[1] == c * taps:
        kv = kernels.view(n, c, taps, h, w)
    else:
        raise ValueError(f"kernel map has {kernels.shape[1]} channels, expected {taps} or {c * taps}")
    if check:
        sums = kv.sum(dim=2).detach()
        err = float((sums - 1.0).abs().max())
        if err > 1e-5:
            raise ValueError(f"dynamic kernels not normalized (max |sum - 1| = {err:.3g})")
    cols = F.unfold(x, k, padding=k // 2).view(n, c, taps, h, w)
    return (cols * kv).sum(dim=2)


class DynamicFilterPredictor(nn.Module):
    """Predict softmax-normalized per-pixel kernels from a feature map."""

    def __init__(self, channels: int, kernel_size: int = 3, per_channel: bool = False):
        super().__init__()
        self.kernel_size = kernel_size
        self.per_channel = per_channel
        taps = kernel_size**2
        out = channels * taps if per_channel else taps
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.LeakyReLU(0.1),
            nn.Conv2d(channels, out, 3, padding=1),
        )

    def forward(self, x):
        logits = self.body(x)
        n, _, h, w = logits.shape
        taps = self.kernel_size**2
        return torch.softmax(logits.view(n, -1, taps, h, w), dim=2).view(n, -1, h, w)


class DynamicFilter(nn.Module):
    def __init__(self, channels: int, kernel_size: int = 3, per_channel: bool = False):
        super().__init__()
        self.kernel_size = kernel_size
        self.predictor = DynamicFilterPredictor(channels, kernel_size, per_channel)

    def forward(self, x):
        return pixelwise_dynamic_filter(x, self.predictor(x), self.kernel_size, check=False)


class LayerNorm2d(nn.Module):
    """LayerNorm over the channel axis of an NCHW tensor."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        # channels-last view: reducing over a strided channel axis is slow on CPU
        y = F.layer_norm(x.permute(0, 2, 3, 1), (x.shape[1],), self.weight, self.bias, self.eps)
        return y.permute(0, 3, 1, 2)


class TransposedAttention(nn.Module):
    """Multi-head attention across channels (C/heads x C/heads per head)."""

    def __init__(self, channels: int, heads: int = 1):
        super().__init__()
        if channels % heads != 0:
            raise ValueError(f"{heads} heads do not divide {channels} channels")
        self.heads = heads
        self.temperature = nn.Parameter(torch.ones(heads, 1, 1))
        self.qkv = nn.Conv2d(channels, channels * 3, 1, bias=False)
        self.qkv_dw = nn.Conv2d(channels * 3, channels * 3, 3, padding=1, groups=channels * 3, bias=False)
        self.project_out = nn.Conv2d(channels, channels, 1, bias=False)

    def _qkv(self, x):
        n, c, h, w = x.shape
        q, k, v = self.qkv_dw(self.qkv(x)).chunk(3, dim=1)
        shape = (n, self.heads, c // self.heads, h * w)
        return q.reshape(shape), k.reshape(shape), v.reshape(shape)

    def _attend(self, x):
        q, k, v = self._qkv(x)
        q = F.normalize(q, dim=-1)
        k = F.normalize(k, dim=-1)
        return torch.softmax((q @ k.transpose(-2, -1)) * self.temperature, dim=-1), v

    def attention(self, x):
        """Per-head channel attention matrices, ``(N, heads, c, c)``."""
        return self._attend(x)[0]

    def forward(self, x):
        attn, v = self._attend(x)
        return self.project_out((attn @ v).reshape(x.shape))


class GatedFeedForward(nn.Module):
    def __init__(self, channels: int, expansion: float = 2.0):
        super().__init__()
        hidden = max(1, int(channels * expansion))
        self.project_in = nn.Conv2d(channels, hidden * 2, 1, bias=False)
        self.dwconv = nn.Conv2d(hidden * 2, hidden * 2, 3, padding=1, groups=hidden * 2, bias=False)
        self.project_out = nn.Conv2d(hidden, channels, 1, bias=False)

    def forward(self, x):
        x1, x2 = self.dwconv(self.project_in(x)).chunk(2, dim=1)
        return self.project_out(F.gelu(x1) * x2)


class TransposedAttentionBlock(nn.Module):
    """Pre-norm transformer block: channel attention then gated FFN, both residual."""

    def __init__(self, channels: int, heads: int = 1, ffn_expansion: float = 2.0):
        super().__init__()
        self.norm1 = LayerNorm2d(channels)
        self.attn = TransposedAttention(channels, heads)
        self.norm2 = LayerNorm2d(channels)
        self.ffn = GatedFeedForward(channels, ffn_expansion)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class ChannelAttentionBlock(nn.Module):
    """conv-ReLU-conv branch gated per channel by pooled statistics, plus residual."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.ReLU(inplace=False),
            nn.Conv2d(channels, channels, 3, padding=1),
        )
        self.squeeze = nn.Conv2d(channels, hidden, 1)
        self.excite = nn.Conv2d(hidden, channels, 1)

    def gate(self, feat):
        pooled = feat.mean(dim=(2, 3), keepdim=True)
        return torch.sigmoid(self.excite(F.relu(self.squeeze(pooled))))

    def forward(self, x):
        res = self.body(x)
        return x + res * self.gate(res)


class SpatialAttentionFuse(nn.Module):
    """out = a * sigmoid(conv_a(a)) + b * sigmoid(conv_b(b)), one map per input."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv_a = nn.Conv2d(channels, 1, 3, padding=1)
        self.conv_b = nn.Conv2d(channels, 1, 3, padding=1)

    def forward(self, a, b):
        if a.shape != b.shape:
            raise ValueError(f"fuse inputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
        return a * torch.sigmoid(self.conv_a(a)) + b * torch.sigmoid(self.conv_b(b))


def bilinear_upsample_kernel(channels: int, dtype=torch.float32) -> torch.Tensor:
    """4x4 transposed-conv weight reproducing x2 bilinear (half-pixel) upsampling."""
    k1 = torch.tensor([0.25, 0.75, 0.75, 0.25], dtype=dtype)
    k2 = k1[:, None] * k1[None, :]
    weight = torch.zeros(channels, channels, 4, 4, dtype=dtype)
    for c in range(channels):
        weight[c, c] = k2
    return weight


class UpsampleDeconv4(nn.Module):
    """Transposed conv, kernel 4, stride 2, padding 1: doubles H and W."""

    def __init__(self, in_channels: int, out_channels: int | None = None):
        super().__init__()
        out_channels = out_channels or in_channels
        self.deconv = nn.ConvTranspose2d(in_channels, out_channels, 4, stride=2, padding=1)

    @torch.no_grad()
    def bilinear_init(self):
        if self.deconv.in_channels != self.deconv.out_channels:
            raise ValueError("bilinear init needs equal in/out channels")
        self.deconv.weight.copy_(bilinear_upsample_kernel(self.deconv.in_channels, self.deconv.weight.dtype))
        self.deconv.bias.zero_()

    def forward(self, x):
        return self.deconv(x)


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.leaky_relu(self.conv1(x), 0.1))
