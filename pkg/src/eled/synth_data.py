"""Synthetic paired data: procedural scenes, frame-averaged blur, low-light
degradation, and simulated events, written to a self-describing directory.

Dataset layout::

    <root>/manifest.json
    <root>/<scene>/blur/000000.png     low-light blurry frame (8-bit RGB)
    <root>/<scene>/sharp/000000.png    normal-light sharp frame at the window center
    <root>/<scene>/events/000000.evt   events inside that blur frame's exposure

``manifest.json`` schema (version 1)::

    {
      "format": "eled-dataset", "version": 1,
      "degradation": {DegradationConfig fields},
      "scenes": [{"name", "height", "width", "fps", "blur_window",
                  "blur_exposure_s", "num_blur_frames", "alpha", "seed", "num_events",
                  "split", "source"}],
      "triplets": [{"scene", "center", "blur": [3 paths], "events": [3 paths],
                    "sharp": path, "windows": [[t0, t1] x 3], "metadata": {...}}],
      "files": {relative path: sha256 hex}
    }

All paths are relative to the dataset root.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from PIL import Image

from .events import EventStream, read_events, simulate_events, to_luminance, write_events_binary

logger = logging.getLogger(__name__)

MIN_CANVAS = 32
TEXTURES = ("checker", "stripes", "noise", "disc")


class DatasetIOError(OSError):
    pass


@dataclass
class Sprite:
    height: int
    width: int
    texture: str = "checker"
    color: tuple = (1.0, 1.0, 1.0)
    start: tuple = (0.0, 0.0)  # top-left (x, y) at frame 0
    motion: str = "linear"  # "linear" or "sine"
    velocity: tuple = (0.0, 0.0)  # px/frame, linear motion
    amplitude: tuple = (0.0, 0.0)  # px, sine motion
    period: float = 60.0  # frames, sine motion
    texture_seed: int = 0

    def position(self, k: int) -> tuple[int, int]:
        if self.motion == "linear":
            x = self.start[0] + self.velocity[0] * k
            y = self.start[1] + self.velocity[1] * k
        elif self.motion == "sine":
            phase = np.sin(2 * np.pi * k / self.period)
            x = self.start[0] + self.amplitude[0] * phase
            y = self.start[1] + self.amplitude[1] * phase
        else:
            raise ValueError(f"unknown motion {self.motion!r}")
        return int(np.floor(x + 0.5)), int(np.floor(y + 0.5))

    def render_texture(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(rgb (3,h,w), alpha (h,w))``."""
        h, w = self.height, self.width
        rng = np.random.default_rng(self.texture_seed)
        yy, xx = np.mgrid[0:h, 0:w]
        alpha = np.ones((h, w))
        if self.texture == "checker":
            cell = int(rng.integers(2, 6))
            pattern = 0.35 + 0.65 * (((yy // cell) + (xx // cell)) % 2)
        elif self.texture == "stripes":
            period = float(rng.uniform(3, 8))
            pattern = 0.5 + 0.5 * np.sin(2 * np.pi * (xx + 0.5 * yy) / period)
        elif self.texture == "noise":
            coarse = rng.uniform(0.2, 1.0, size=((h + 3) // 4, (w + 3) // 4))
            pattern = np.kron(coarse, np.ones((4, 4)))[:h, :w]
        elif self.texture == "disc":
            cy, cx = (h - 1) / 2, (w - 1) / 2
            r2 = ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2
            alpha = (r2 <= 1.0).astype(np.float64)
            pattern = 0.6 + 0.4 * np.cos(np.sqrt(r2) * 6)
        else:
            raise ValueError(f"unknown texture {self.texture!r}")
        rgb = np.asarray(self.color, dtype=np.float64)[:, None, None] * pattern[None]
        return np.clip(rgb, 0.0, 1.0), alpha


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    sprites: list = field(default_factory=list)
    background: tuple = ((0.25, 0.25, 0.3), (0.55, 0.5, 0.45))  # two end colors
    background_angle: float = 0.0  # radians, gradient direction
    fps: float = 240.0
    length: int = 63
    blur_window: int = 9
    seed: int = 0
    name: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["sprites"] = [s if isinstance(s, Sprite) else Sprite(**s) for s in d.get("sprites", [])]
        return cls(**d)


@dataclass
class ImageSequenceScene:
    """User-supplied sharp frames (any PNG/JPEG directory, sorted by name)."""

    directory: str
    fps: float = 240.0
    blur_window: int = 9
    seed: int = 0
    name: str = ""
    gamma: float = 2.2


@dataclass
class DegradationConfig:
    alpha_range: tuple = (0.06, 0.15)
    gamma: float = 2.2
    shot_scale: float = 2e-3
    read_sigma: float = 2e-3
    contrast_threshold: float = 0.2
    event_eps: float = 1e-3
    event_noise: bool = True  # events see the same noise model as the frames
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alpha_range"] = list(self.alpha_range)
        return d


def _validate_spec(spec: SceneSpec) -> None:
    if spec.height < MIN_CANVAS or spec.width < MIN_CANVAS:
        raise ValueError(f"canvas {spec.width}x{spec.height} below {MIN_CANVAS}x{MIN_CANVAS}")
    if spec.blur_window < 1 or spec.blur_window % 2 == 0:
        raise ValueError(f"blur window must be odd and >= 1, got {spec.blur_window}")
    if spec.length < 3 * spec.blur_window:
        raise ValueError(f"length {spec.length} < 3 blur windows of {spec.blur_window}")
    if spec.fps <= 0:
        raise ValueError("fps must be positive")
    for i, s in enumerate(spec.sprites):
        if s.texture not in TEXTURES:
            raise ValueError(f"sprite {i}: unknown texture {s.texture!r}")
        for k in range(spec.length):
            x, y = s.position(k)
            if x + s.width <= 0 or y + s.height <= 0 or x >= spec.width or y >= spec.height:
                raise ValueError(f"sprite {i} leaves the canvas at frame {k}")


def _background(spec: SceneSpec) -> np.ndarray:
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    u = np.cos(spec.background_angle) * xx / spec.width + np.sin(spec.background_angle) * yy / spec.height
    u = (u - u.min()) / max(u.max() - u.min(), 1e-12)
    c0 = np.asarray(spec.background[0], dtype=np.float64)[:, None, None]
    c1 = np.asarray(spec.background[1], dtype=np.float64)[:, None, None]
    return c0 * (1 - u) + c1 * u


def render_sequence(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Render ``spec.length`` linear-intensity frames.

    Returns ``(frames (T, 3, H, W) in [0, 1], timestamps (T,) seconds)``.
    Sprites are composited in list order at integer positions.
    """
    _validate_spec(spec)
    bg = _background(spec)
    textures = [s.render_texture() for s in spec.sprites]
    frames = np.empty((spec.length, 3, spec.height, spec.width))
    for k in range(spec.length):
        frame = bg.copy()
        for sprite, (rgb, alpha) in zip(spec.sprites, textures):
            x, y = sprite.position(k)
            # clip sprite rectangle against canvas
            x0, y0 = max(x, 0), max(y, 0)
            x1, y1 = min(x + sprite.width, spec.width), min(y + sprite.height, spec.height)
            sx, sy = x0 - x, y0 - y
            a = alpha[sy : sy + y1 - y0, sx : sx + x1 - x0]
            region = frame[:, y0:y1, x0:x1]
            frame[:, y0:y1, x0:x1] = region * (1 - a) + rgb[:, sy : sy + y1 - y0, sx : sx + x1 - x0] * a
        frames[k] = frame
    timestamps = np.arange(spec.length) / spec.fps
    return np.clip(frames, 0.0, 1.0), timestamps


def random_scene(
    seed: int,
    height: int = 64,
    width: int = 64,
    num_blur_frames: int = 7,
    blur_window: int = 9,
    fps: float = 240.0,
    num_sprites: int = 3,
    max_speed: float = 1.5,
    name: str = "",
) -> SceneSpec:
    """Sample a scene whose sprites stay on canvas for the whole sequence."""
    rng = np.random.default_rng(seed)
    length = num_blur_frames * blur_window
    sprites = []
    for i in range(num_sprites):
        sh = int(rng.integers(height // 6, height // 2))
        sw = int(rng.integers(width // 6, width // 2))
        texture = TEXTURES[int(rng.integers(len(TEXTURES)))]
        color = tuple(float(c) for c in rng.uniform(0.3, 1.0, size=3))
        start = (float(rng.uniform(0, width - sw)), float(rng.uniform(0, height - sh)))
        if rng.random() < 0.6:
            # reachable x stays in [-(sw-1), width-1] so at least one column overlaps
            span = max(length - 1, 1)
            vx = rng.uniform(max(-max_speed, (-(sw - 1) - start[0]) / span), min(max_speed, (width - 1 - start[0]) / span))
            vy = rng.uniform(max(-max_speed, (-(sh - 1) - start[1]) / span), min(max_speed, (height - 1 - start[1]) / span))
            sprites.append(Sprite(sh, sw, texture, color, start, "linear", velocity=(float(vx), float(vy)),
                                  texture_seed=int(rng.integers(2**31))))
        else:
            ax = rng.uniform(-1, 1) * min(max_speed * 8, sw - 1)
            ay = rng.uniform(-1, 1) * min(max_speed * 8, sh - 1)
            sprites.append(Sprite(sh, sw, texture, color, start, "sine", amplitude=(float(ax), float(ay)),
                                  period=float(rng.uniform(40, 120)), texture_seed=int(rng.integers(2**31))))
    bg0 = tuple(float(c) for c in rng.uniform(0.1, 0.4, size=3))
    bg1 = tuple(float(c) for c in rng.uniform(0.4, 0.8, size=3))
    spec = SceneSpec(height, width, sprites, (bg0, bg1), float(rng.uniform(0, 2 * np.pi)), fps, length,
                     blur_window, seed, name or f"scene_{seed:04d}")
    _validate_spec(spec)
    return spec


def synthesize_blur(frames) -> np.ndarray:
    """Blurry frame as the linear-intensity mean of an odd-length window."""
    frames = np.asarray(frames, dtype=np.float64)
    n = frames.shape[0]
    if n < 1 or n % 2 == 0:
        raise ValueError(f"blur window must have odd length, got {n}")
    return frames.mean(axis=0)


def low_light_linear(frame_linear, alpha, shot_scale=0.0, read_sigma=0.0, rng=None) -> np.ndarray:
    """Attenuated sensor signal before display encoding, clipped at 0."""
    if not alpha > 0 or alpha > 1:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    x = alpha * np.asarray(frame_linear, dtype=np.float64)
    if shot_scale > 0 or read_sigma > 0:
        if rng is None:
            raise ValueError("noise requested without a random generator")
        if shot_scale > 0:
            photons = rng.poisson(np.clip(x, 0, None) / shot_scale)
            x = photons * shot_scale
        if read_sigma > 0:
            x = x + rng.normal(0.0, read_sigma, size=x.shape)
    return np.clip(x, 0.0, None)


def apply_low_light(frame_linear, alpha, shot_scale=0.0, read_sigma=0.0, gamma=2.2, rng=None) -> np.ndarray:
    """Low-light capture: scale by ``alpha``, add shot and read noise, then
    gamma-encode for display and clip to [0, 1]."""
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    x = low_light_linear(frame_linear, alpha, shot_scale, read_sigma, rng)
    return np.clip(x ** (1.0 / gamma), 0.0, 1.0)


def encode_display(frame_linear, gamma=2.2) -> np.ndarray:
    return np.clip(np.asarray(frame_linear, dtype=np.float64), 0.0, 1.0) ** (1.0 / gamma)


def load_image_sequence(directory, gamma: float = 2.2) -> np.ndarray:
    """Read a directory of sharp frames as linear intensity, (T, 3, H, W)."""
    directory = Path(directory)
    paths = sorted(p for p in directory.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
    if not paths:
        raise DatasetIOError(f"{directory}: no images found")
    frames = []
    for p in paths:
        try:
            img = np.asarray(Image.open(p).convert("RGB"), dtype=np.float64) / 255.0
        except OSError as exc:
            raise DatasetIOError(f"{p}: {exc}") from exc
        frames.append(img.transpose(2, 0, 1) ** gamma)
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise ValueError(f"{directory}: frames differ in size {shapes}")
    return np.stack(frames)


def save_png(path, image_chw: np.ndarray) -> None:
    arr = np.clip(np.asarray(image_chw), 0.0, 1.0).transpose(1, 2, 0)
    arr = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    try:
        Image.fromarray(arr, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise DatasetIOError(f"{path}: {exc}") from exc


def load_png(path) -> np.ndarray:
    try:
        arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise DatasetIOError(f"{path}: {exc}") from exc
    return arr.transpose(2, 0, 1)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _scene_frames(scene) -> tuple[np.ndarray, np.ndarray, float, int]:
    if isinstance(scene, SceneSpec):
        frames, ts = render_sequence(scene)
        return frames, ts, scene.fps, scene.blur_window
    frames = load_image_sequence(scene.directory, scene.gamma)
    if frames.shape[2] < MIN_CANVAS or frames.shape[3] < MIN_CANVAS:
        raise ValueError(f"{scene.directory}: frames smaller than {MIN_CANVAS}px")
    if len(frames) < 3 * scene.blur_window:
        raise ValueError(f"{scene.directory}: need at least {3 * scene.blur_window} frames")
    return frames, np.arange(len(frames)) / scene.fps, scene.fps, scene.blur_window


def _build_scene(args) -> dict:
    scene, cfg, root, name = args
    root = Path(root)
    frames, ts, fps, window = _scene_frames(scene)
    seed = scene.seed
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, seed, 0x5EED]))
    alpha = float(rng.uniform(*cfg.alpha_range))
    n_blur = len(frames) // window
    exposure = window / fps

    # event camera shares the attenuated optical path
    ev_noise = (cfg.shot_scale, cfg.read_sigma) if cfg.event_noise else (0.0, 0.0)
    lum = [to_luminance(low_light_linear(f, alpha, ev_noise[0], ev_noise[1], rng)) for f in frames[: n_blur * window]]
    stream = simulate_events(lum, ts[: n_blur * window], cfg.contrast_threshold, cfg.event_eps)

    for sub in ("blur", "sharp", "events"):
        try:
            (root / name / sub).mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise DatasetIOError(f"{root / name / sub}: {exc}") from exc

    windows = []
    files = {}
    for j in range(n_blur):
        chunk = frames[j * window : (j + 1) * window]
        blur = apply_low_light(synthesize_blur(chunk), alpha, cfg.shot_scale, cfg.read_sigma, cfg.gamma, rng)
        sharp = encode_display(chunk[window // 2], cfg.gamma)
        t0 = float(ts[j * window])
        win = (t0, t0 + exposure)
        windows.append(win)
        rel = {
            "blur": f"{name}/blur/{j:06d}.png",
            "sharp": f"{name}/sharp/{j:06d}.png",
            "events": f"{name}/events/{j:06d}.evt",
        }
        save_png(root / rel["blur"], blur)
        save_png(root / rel["sharp"], sharp)
        try:
            write_events_binary(root / rel["events"], stream.slice_time(*win))
        except OSError as exc:
            raise DatasetIOError(f"{root / rel['events']}: {exc}") from exc
        for p in rel.values():
            files[p] = _sha256(root / p)

    meta = {
        "alpha": alpha,
        "gamma": cfg.gamma,
        "shot_scale": cfg.shot_scale,
        "read_sigma": cfg.read_sigma,
        "contrast_threshold": cfg.contrast_threshold,
        "seed": seed,
        "blur_exposure_s": exposure,
    }
    triplets = []
    for j in range(1, n_blur - 1):
        triplets.append({
            "scene": name,
            "center": j,
            "blur": [f"{name}/blur/{k:06d}.png" for k in (j - 1, j, j + 1)],
            "events": [f"{name}/events/{k:06d}.evt" for k in (j - 1, j, j + 1)],
            "sharp": f"{name}/sharp/{j:06d}.png",
            "windows": [list(windows[k]) for k in (j - 1, j, j + 1)],
            "metadata": meta,
        })
    scene_entry = {
        "name": name,
        "height": int(frames.shape[2]),
        "width": int(frames.shape[3]),
        "fps": fps,
        "blur_window": window,
        "blur_exposure_s": exposure,
        "num_blur_frames": n_blur,
        "alpha": alpha,
        "seed": seed,
        "num_events": len(stream),
        "source": scene.to_dict() if isinstance(scene, SceneSpec) else {"directory": str(scene.directory)},
    }
    return {"scene": scene_entry, "triplets": triplets, "files": files}


def build_dataset(
    scenes: Sequence[Union[SceneSpec, ImageSequenceScene]],
    config: DegradationConfig,
    out_dir,
    workers: int | None = None,
    splits: Sequence[str] | None = None,
) -> dict:
    """Render, degrade, and write every scene; return the manifest dict.

    ``splits`` tags each scene (default ``"train"``). ``workers`` defaults to
    ``ELED_NUM_WORKERS`` (or 1). Output is independent of the worker count.
    """
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetIOError(f"{root}: {exc}") from exc
    if workers is None:
        workers = int(os.environ.get("ELED_NUM_WORKERS", "1"))
    names = [s.name or f"scene_{i:03d}" for i, s in enumerate(scenes)]
    if len(set(names)) != len(names):
        raise ValueError("scene names must be unique")
    splits = ["train"] * len(scenes) if splits is None else list(splits)
    if len(splits) != len(scenes):
        raise ValueError(f"{len(splits)} split tags for {len(scenes)} scenes")
    jobs = [(s, config, str(root), n) for s, n in zip(scenes, names)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_build_scene, jobs))
    else:
        results = [_build_scene(j) for j in jobs]
    for r, split in zip(results, splits):
        r["scene"]["split"] = split

    manifest = {
        "format": "eled-dataset",
        "version": 1,
        "degradation": config.to_dict(),
        "scenes": [r["scene"] for r in results],
        "triplets": [t for r in results for t in r["triplets"]],
        "files": {k: v for r in results for k, v in sorted(r["files"].items())},
    }
    path = root / "manifest.json"
    try:
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    except OSError as exc:
        raise DatasetIOError(f"{path}: {exc}") from exc
    logger.info("wrote %d triplets from %d scenes to %s", len(manifest["triplets"]), len(scenes), root)
    return manifest


def load_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except OSError as exc:
        raise DatasetIOError(f"{path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetIOError(f"{path}: invalid JSON ({exc})") from exc
    if manifest.get("format") != "eled-dataset":
        raise DatasetIOError(f"{path}: not an eled dataset manifest")
    return manifest


def manifest_hash(root) -> str:
    return hashlib.sha256((Path(root) / "manifest.json").read_bytes()).hexdigest()


def make_scene_specs(
    num_scenes: int,
    triplets_per_scene: int,
    height: int = 64,
    width: int = 64,
    seed: int = 0,
    blur_window: int = 9,
    fps: float = 240.0,
    prefix: str = "scene",
) -> list[SceneSpec]:
    """Random scenes sized so each yields exactly ``triplets_per_scene`` triplets."""
    if triplets_per_scene < 1:
        raise ValueError("need at least one triplet per scene")
    return [
        random_scene(seed * 1000 + i, height, width, triplets_per_scene + 2, blur_window, fps, name=f"{prefix}_{i:03d}")
        for i in range(num_scenes)
    ]


def read_triplet(root, triplet: dict) -> dict:
    """Load one manifest triplet into numpy arrays (events stay raw). The
    sharp frame is optional (``None`` when absent)."""
    root = Path(root)
    if len(triplet.get("blur", [])) != 3 or len(triplet.get("events", [])) != 3 or len(triplet.get("windows", [])) != 3:
        raise DatasetIOError("a triplet needs exactly 3 blur frames, 3 event files and 3 windows")
    sharp = triplet.get("sharp")
    out = {
        "blur": np.stack([load_png(root / p) for p in triplet["blur"]]),
        "sharp": load_png(root / sharp) if sharp else None,
        "windows": [tuple(w) for w in triplet["windows"]],
    }
    streams: list[EventStream] = []
    for p in triplet["events"]:
        try:
            streams.append(read_events(root / p))
        except OSError as exc:
            raise DatasetIOError(f"{root / p}: {exc}") from exc
    out["events"] = streams
    return out
