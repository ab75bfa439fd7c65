"""Model/training configuration, flat dotted-key config files, and hashing.

Config files are plain text, one ``section.key = value`` per line; ``#``
starts a comment. Values are parsed as JSON when possible (numbers, booleans,
lists), otherwise kept as strings::

    model.channels = 16
    model.encoder_depths = [1, 1, 1]
    train.lr = 1e-3
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

FUSION_MODES = ("sfcm", "conv1x1", "efnet", "refid")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    channels: int = 32
    voxel_bins: int = 16
    encoder_depths: tuple = (2, 2, 2)
    heads: tuple = (1, 2, 4)
    ffn_expansion: float = 2.0
    cnn_depth: int = 2
    decoder_depth: int = 2
    n_cab: int = 4
    kf: int = 3
    offset_groups: int = 8
    dcn_kernel: int = 3
    sigmas: Optional[tuple] = None  # per scale; None -> max(H_s, W_s) / sigma_divisor
    sigma_divisor: float = 4.0
    variant: str = "full"
    use_edtfa: bool = True
    fusion: str = "sfcm"
    use_cab: bool = True
    use_sa: bool = True
    use_lpf: bool = True
    share_encoders: bool = False
    per_channel_dynamic: bool = False

    def __post_init__(self):
        self.encoder_depths = tuple(int(d) for d in self.encoder_depths)
        self.heads = tuple(int(h) for h in self.heads)
        if self.sigmas is not None:
            self.sigmas = tuple(float(s) for s in self.sigmas)
        self.validate()

    def validate(self):
        c = self.channels
        if c < 8:
            raise ConfigError(f"channels must be >= 8, got {c}")
        if len(self.encoder_depths) != 3 or len(self.heads) != 3:
            raise ConfigError("encoder_depths and heads need one entry per scale (3)")
        positive = {
            "voxel_bins": self.voxel_bins, "cnn_depth": self.cnn_depth, "decoder_depth": self.decoder_depth,
            "offset_groups": self.offset_groups, "kf": self.kf, "dcn_kernel": self.dcn_kernel,
        }
        for name, value in positive.items():
            if value < 1:
                raise ConfigError(f"{name} must be positive, got {value}")
        if any(d < 1 for d in self.encoder_depths) or any(h < 1 for h in self.heads):
            raise ConfigError("encoder depths and head counts must be positive")
        if self.n_cab < 0:
            raise ConfigError("n_cab must be >= 0")
        if self.kf % 2 == 0 or self.dcn_kernel % 2 == 0:
            raise ConfigError("kf and dcn_kernel must be odd")
        if c % 2:
            raise ConfigError("channels must be even (transformer downsampling halves them)")
        if c % self.offset_groups:
            raise ConfigError(f"offset_groups {self.offset_groups} must divide channels {c}")
        for s, h in enumerate(self.heads):
            if (c << s) % h:
                raise ConfigError(f"{h} heads do not divide {c << s} channels at scale {s}")
        if self.sigmas is not None and (len(self.sigmas) != 3 or min(self.sigmas) <= 0):
            raise ConfigError("sigmas needs three positive values")
        if self.sigma_divisor <= 0:
            raise ConfigError("sigma_divisor must be positive")
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.variant not in ("full", "small", "custom"):
            raise ConfigError(f"unknown variant {self.variant!r}")

    @classmethod
    def full(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def small(cls, **overrides) -> "ModelConfig":
        base = dict(channels=16, n_cab=2, variant="small")
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_variant(cls, variant: str, **overrides) -> "ModelConfig":
        if variant == "small":
            return cls.small(**overrides)
        if variant == "full":
            return cls.full(**overrides)
        return cls(variant=variant, **overrides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_depths"] = list(self.encoder_depths)
        d["heads"] = list(self.heads)
        d["sigmas"] = None if self.sigmas is None else list(self.sigmas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        return config_hash(self.to_dict())


@dataclass
class TrainConfig:
    lr: float = 2e-4
    schedule: str = "cosine"  # "cosine" or "constant"
    min_lr: float = 1e-6
    batch_size: int = 4
    crop_size: int = 64
    steps: int = 2000
    loss_weights: tuple = (1.0, 0.5, 0.25)
    charbonnier_eps: float = 1e-3
    grad_clip: float = 1.0
    eval_every: int = 200
    seed: int = 0
    deterministic: bool = True
    log_every: int = 50

    def __post_init__(self):
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        if len(self.loss_weights) != 3 or min(self.loss_weights) < 0:
            raise ConfigError("loss_weights needs three non-negative values")
        if self.crop_size % 4:
            raise ConfigError(f"crop_size must be divisible by 4, got {self.crop_size}")
        if self.lr < 0 or self.batch_size < 1 or self.steps < 0:
            raise ConfigError("lr >= 0, batch_size >= 1 and steps >= 0 required")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(obj) -> str:
    """Short stable hash of a JSON-serializable object."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _parse_value(raw: str):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        lowered = raw.lower()
        if lowered in ("true", "false"):
            return lowered == "true"
        return raw


def parse_flat_config(text: str, source: str = "<config>") -> dict:
    """Parse dotted-key lines into a nested dict."""
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        set_dotted(out, key, _parse_value(value))
    return out


def set_dotted(tree: dict, key: str, value) -> None:
    node = tree
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"key {key!r} conflicts with a scalar value")
    node[parts[-1]] = value


def load_flat_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_flat_config(text, str(path))


def dump_flat_config(tree: dict, prefix: str = "") -> str:
    lines = []
    for key in sorted(tree):
        value = tree[key]
        full = f"{prefix}{key}"
        if isinstance(value, dict):
            lines.append(dump_flat_config(value, full + ".").rstrip("\n"))
        else:
            lines.append(f"{full} = {json.dumps(value)}")
    return "\n".join(line for line in lines if line) + "\n"
