"""Full restoration network: shallow extractors, transformer encoders,
alignment, CNN encoders, cross-modal fusion, and a UNet-style decoder that
emits residual images at three scales."""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ConfigError, ModelConfig
from .ed_tfa import EDTFA, NUM_SCALES, PyramidBundle, TransformerEncoder
from .primitives import ResBlock, UpsampleDeconv4
from .sfcm_fe import SFCMFE

CHECKPOINT_FORMAT = "eled-checkpoint/1"


class StageError(ValueError):
    """Input or intermediate shape mismatch, tagged with the failing stage."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def downsample(img, scale: int):
    """Bilinear downsample by ``2**scale``."""
    if scale == 0:
        return img
    return F.interpolate(img, scale_factor=0.5**scale, mode="bilinear", align_corners=False, antialias=False)


@dataclass
class MultiScaleOutput:
    outputs: List[torch.Tensor]  # [S_0, S_1, S_2]
    aux: Optional[dict] = None

    def __getitem__(self, s):
        return self.outputs[s]

    def __len__(self):
        return len(self.outputs)


def _shallow(in_channels: int, channels: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, channels, 3, padding=1),
        nn.LeakyReLU(0.1),
        nn.Conv2d(channels, channels, 3, padding=1),
    )


class CNNEncoder(nn.Module):
    """Residual blocks per scale with stride-2 conv downsampling (channels double)."""

    def __init__(self, channels: int, depth: int = 2):
        super().__init__()
        self.levels = nn.ModuleList()
        self.downs = nn.ModuleList()
        for s in range(NUM_SCALES):
            c = channels << s
            self.levels.append(nn.Sequential(*[ResBlock(c) for _ in range(depth)]))
            if s < NUM_SCALES - 1:
                self.downs.append(nn.Conv2d(c, 2 * c, 3, stride=2, padding=1))

    def forward(self, x):
        out = []
        for s in range(NUM_SCALES):
            x = self.levels[s](x)
            out.append(x)
            if s < NUM_SCALES - 1:
                x = self.downs[s](x)
        return out


class Decoder(nn.Module):
    def __init__(self, channels: int, depth: int = 2):
        super().__init__()
        self.blocks = nn.ModuleList()
        self.heads = nn.ModuleList()
        self.ups = nn.ModuleList()
        self.merges = nn.ModuleList()
        for s in range(NUM_SCALES):
            c = channels << s
            self.blocks.append(nn.Sequential(*[ResBlock(c) for _ in range(depth)]))
            head = nn.Conv2d(c, 3, 3, padding=1)
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
            self.heads.append(head)
            if s < NUM_SCALES - 1:
                self.ups.append(UpsampleDeconv4(2 * c, c))
                self.merges.append(nn.Conv2d(2 * c, c, 1))

    def forward(self, feats):
        """``feats`` ordered [s=0, s=1, s=2]; returns residuals in the same order."""
        residuals: List[Optional[torch.Tensor]] = [None] * NUM_SCALES
        x = None
        for s in reversed(range(NUM_SCALES)):
            if x is None:
                x = feats[s]
            else:
                x = self.merges[s](torch.cat([self.ups[s](x), feats[s]], dim=1))
            x = self.blocks[s](x)
            residuals[s] = self.heads[s](x)
        return residuals


class ELEDNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config.channels
        self.shallow_blur = _shallow(3, c)
        self.shallow_event = _shallow(config.voxel_bins, c)
        self.blur_encoder = TransformerEncoder(c, config.encoder_depths, config.heads, config.ffn_expansion)
        if config.use_edtfa:
            if config.share_encoders:
                self.event_encoder = self.blur_encoder
            else:
                self.event_encoder = TransformerEncoder(c, config.encoder_depths, config.heads, config.ffn_expansion)
            self.edtfa = EDTFA(c, config.offset_groups, config.dcn_kernel)
        self.aligned_cnn = CNNEncoder(c, config.cnn_depth)
        self.event_cnn = CNNEncoder(c, config.cnn_depth)
        self.fusion = SFCMFE(
            c, config.fusion, config.kf, config.n_cab, config.use_lpf, config.use_sa, config.use_cab,
            config.per_channel_dynamic, config.sigmas, config.sigma_divisor,
        )
        self.decoder = Decoder(c, config.decoder_depth)

    def _check_inputs(self, blurs, voxels):
        if blurs.dim() != 5 or blurs.shape[1] != 3 or blurs.shape[2] != 3:
            raise StageError("input", f"blurs must be (N, 3 frames, 3, H, W), got {tuple(blurs.shape)}")
        if voxels.dim() != 5 or voxels.shape[1] != 3:
            raise StageError("input", f"voxels must be (N, 3 grids, B, H, W), got {tuple(voxels.shape)}")
        if voxels.shape[2] != self.config.voxel_bins:
            raise StageError("input", f"voxel bins {voxels.shape[2]} != configured {self.config.voxel_bins}")
        if blurs.shape[0] != voxels.shape[0] or blurs.shape[-2:] != voxels.shape[-2:]:
            raise StageError("input", f"blurs {tuple(blurs.shape)} and voxels {tuple(voxels.shape)} disagree")
        h, w = blurs.shape[-2:]
        if h % 4 or w % 4:
            raise StageError("input", f"H and W must be divisible by 4, got {h}x{w}")

    def forward(self, blurs, voxels, return_aux: bool = False) -> MultiScaleOutput:
        """``blurs`` (N, 3, 3, H, W) and ``voxels`` (N, 3, B, H, W), frames
        ordered (t-1, t, t+1)."""
        self._check_inputs(blurs, voxels)
        n = blurs.shape[0]
        k_blur = self.shallow_blur(blurs.flatten(0, 1))  # (3N, C, H, W), frame-major within sample
        k_event = self.shallow_event(voxels.flatten(0, 1))
        aux = {}

        if self.config.use_edtfa:
            f_blur = self.blur_encoder(k_blur)
            f_event = self.event_encoder(k_event)
            split = lambda pyr: [[level.view(n, 3, *level.shape[1:])[:, k] for level in pyr] for k in range(3)]
            bundle = PyramidBundle(split(f_blur), split(f_event))
            states = self.edtfa(bundle)
            aligned0 = states[-1].aligned
            aux["offsets"] = [t for st in states for t in (st.offsets_fwd, st.offsets_bwd)]
        else:
            # baseline: center-frame encoder feature goes straight to the CNN encoder
            center = k_blur.view(n, 3, *k_blur.shape[1:])[:, 1]
            aligned0 = self.blur_encoder(center)[0]

        k_event_t = k_event.view(n, 3, *k_event.shape[1:])[:, 1]
        g_aligned = self.aligned_cnn(aligned0)
        g_event = self.event_cnn(k_event_t)
        try:
            g_x = self.fusion(g_aligned, g_event)
        except ValueError as exc:
            raise StageError("fusion", str(exc)) from exc
        residuals = self.decoder(g_x)

        center_blur = blurs[:, 1]
        outputs = [torch.clamp(downsample(center_blur, s) + residuals[s], 0.0, 1.0) for s in range(NUM_SCALES)]
        return MultiScaleOutput(outputs, aux if return_aux else None)


def build_model(config: ModelConfig, seed: Optional[int] = None) -> ELEDNet:
    if seed is not None:
        torch.manual_seed(seed)
    return ELEDNet(config)


def count_params(config_or_model) -> int:
    """Exact number of learnable scalars (shared modules counted once)."""
    model = config_or_model if isinstance(config_or_model, nn.Module) else ELEDNet(config_or_model)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def params_report(n_params: int) -> dict:
    """Parameter count both as millions of parameters and float32 megabytes."""
    return {"params": n_params, "params_m": n_params / 1e6, "float32_mb": n_params * 4 / 2**20}


# ------------------------------------------------------------- checkpoints


def save_checkpoint(path, model: ELEDNet, optimizer=None, step: int = 0, extra: Optional[dict] = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "config_hash": model.config.hash(),
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "step": int(step),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path, expected_config: Optional[ModelConfig] = None, map_location="cpu"):
    """Return ``(model, payload)``. Raises ``ConfigError`` when the stored
    config does not reproduce its recorded hash or differs from
    ``expected_config``."""
    payload = torch.load(path, map_location=map_location, weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: not an eled checkpoint")
    config = ModelConfig.from_dict(payload["config"])
    if config.hash() != payload["config_hash"]:
        raise ConfigError(f"{path}: config hash mismatch ({config.hash()} != {payload['config_hash']})")
    if expected_config is not None and expected_config.hash() != config.hash():
        raise ConfigError(f"{path}: checkpoint config {config.hash()} != expected {expected_config.hash()}")
    model = ELEDNet(config)
    model.load_state_dict(payload["state_dict"])
    return model, payload
