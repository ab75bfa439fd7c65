"""Event streams: voxelization, a log-intensity event simulator, and file I/O.

Two on-disk formats are supported:

* CSV with header ``t,x,y,p`` (t in seconds, written with ``repr`` so floats
  round-trip exactly).
* Packed little-endian binary: magic ``EVT1``, ``uint32`` record count, then
  records of ``(float64 t, uint16 x, uint16 y, int8 p)`` with no padding.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"EVT1"
RECORD_DTYPE = np.dtype([("t", "<f8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])
assert RECORD_DTYPE.itemsize == 13

# guards floor() against 0.19999999999 vs 0.2 style rounding in log space
_CROSSING_TOL = 1e-9


class EventBoundsError(ValueError):
    """An event lies outside the sensor array."""


class EventFormatError(ValueError):
    """An event file is malformed."""


@dataclass
class EventStream:
    """Columnar event stream sorted by timestamp."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        self.x = np.asarray(self.x, dtype=np.int64).reshape(-1)
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        self.p = np.asarray(self.p, dtype=np.int8).reshape(-1)
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ValueError("event columns differ in length")
        if n and not np.all(np.isin(self.p, (-1, 1))):
            raise ValueError("polarity must be +1 or -1")
        if n > 1 and np.any(np.diff(self.t) < 0):
            raise ValueError("event stream must be sorted by t")

    @classmethod
    def empty(cls) -> "EventStream":
        return cls(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0))

    @classmethod
    def from_records(cls, records) -> "EventStream":
        """Build from an iterable of ``(t, x, y, p)`` tuples."""
        arr = np.asarray(list(records), dtype=np.float64).reshape(-1, 4)
        return cls(arr[:, 0], arr[:, 1].astype(np.int64), arr[:, 2].astype(np.int64), arr[:, 3].astype(np.int8))

    def __len__(self) -> int:
        return len(self.t)

    def check_bounds(self, height: int, width: int) -> None:
        if len(self) == 0:
            return
        bad = (self.x < 0) | (self.x >= width) | (self.y < 0) | (self.y >= height)
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise EventBoundsError(
                f"event {i} at (x={self.x[i]}, y={self.y[i]}) outside {width}x{height} sensor"
            )

    def slice_time(self, t_start: float, t_end: float) -> "EventStream":
        """Events with ``t_start <= t <= t_end``."""
        lo = np.searchsorted(self.t, t_start, side="left")
        hi = np.searchsorted(self.t, t_end, side="right")
        return EventStream(self.t[lo:hi], self.x[lo:hi], self.y[lo:hi], self.p[lo:hi])

    def __eq__(self, other):
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
        )


@dataclass
class VoxelGrid:
    bins: np.ndarray  # (B, H, W)
    window: tuple[float, float]

    @property
    def num_bins(self) -> int:
        return self.bins.shape[0]


def bilinear_time_weights(t_star: np.ndarray, num_bins: int):
    """Split each normalized timestamp into (bin index, weight) pairs.

    Returns ``(lower_bin, lower_weight, upper_bin, upper_weight)``; the upper
    weight is zeroed where the upper bin falls off the grid (only possible
    when ``t_star == num_bins - 1`` exactly, so the lower weight is then 1).
    """
    lower = np.floor(t_star).astype(np.int64)
    lower = np.clip(lower, 0, num_bins - 1)
    frac = t_star - lower
    upper = lower + 1
    w_lo = 1.0 - frac
    w_hi = np.where(upper < num_bins, frac, 0.0)
    return lower, w_lo, np.minimum(upper, num_bins - 1), w_hi


def events_to_voxel_grid(
    stream: EventStream,
    window: tuple[float, float],
    num_bins: int,
    height: int,
    width: int,
    normalize: bool = True,
) -> VoxelGrid:
    """Accumulate signed polarities into ``num_bins`` temporal bins.

    Each event inside ``[t_start, t_end]`` votes into its two nearest bins with
    linear (tent) weights; events outside the window are ignored.
    """
    t_start, t_end = float(window[0]), float(window[1])
    if num_bins < 1:
        raise ValueError(f"num_bins must be >= 1, got {num_bins}")
    if not t_end > t_start:
        raise ValueError(f"degenerate window ({t_start}, {t_end})")
    stream.check_bounds(height, width)

    grid = np.zeros(num_bins * height * width, dtype=np.float64)
    inside = (stream.t >= t_start) & (stream.t <= t_end)
    if np.any(inside):
        t = stream.t[inside]
        x = stream.x[inside]
        y = stream.y[inside]
        pol = stream.p[inside].astype(np.float64)
        t_star = (num_bins - 1) * (t - t_start) / (t_end - t_start)
        lo, w_lo, hi, w_hi = bilinear_time_weights(t_star, num_bins)
        pix = y * width + x
        np.add.at(grid, lo * height * width + pix, pol * w_lo)
        np.add.at(grid, hi * height * width + pix, pol * w_hi)

    grid = grid.reshape(num_bins, height, width)
    if normalize:
        peak = np.abs(grid).max()
        if peak > 0:
            grid = grid / peak
    return VoxelGrid(bins=grid.astype(np.float32), window=(t_start, t_end))


def simulate_events(
    frames_linear: Sequence[np.ndarray],
    timestamps: Sequence[float],
    contrast_threshold: float = 0.2,
    eps: float = 1e-3,
) -> EventStream:
    """Idealized DVS: emit an event each time log intensity moves ``c`` away
    from the per-pixel reference level.

    Log intensity is linearly interpolated between frames, so crossing times are
    exact for that model. No noise, refractory period, or threshold mismatch.
    Frames are 2-D (H, W); color input must be reduced to luminance first.
    """
    c = float(contrast_threshold)
    if not c > 0:
        raise ValueError(f"contrast threshold must be positive, got {contrast_threshold}")
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    frames = [np.asarray(f, dtype=np.float64) for f in frames_linear]
    ts = np.asarray(timestamps, dtype=np.float64)
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    if len(ts) != len(frames):
        raise ValueError("one timestamp per frame required")
    if np.any(np.diff(ts) <= 0):
        raise ValueError("timestamps must be strictly increasing")
    shape = frames[0].shape
    if len(shape) != 2 or any(f.shape != shape for f in frames):
        raise ValueError("frames must be equally sized 2-D arrays")
    if any(np.any(f < 0) for f in frames):
        raise ValueError("negative intensity in input frames")

    height, width = shape
    logs = [np.log(f.reshape(-1) + eps) for f in frames]
    ref = logs[0].copy()
    pix_index = np.arange(height * width)
    chunks_t, chunks_pix, chunks_p = [], [], []

    for i in range(len(frames) - 1):
        l0, l1 = logs[i], logs[i + 1]
        t0, dt = ts[i], ts[i + 1] - ts[i]
        delta = l1 - ref
        n = np.floor(np.abs(delta) / c + _CROSSING_TOL).astype(np.int64)
        fired = n > 0
        if not np.any(fired):
            continue
        counts = n[fired]
        sign = np.sign(delta[fired])
        pix = np.repeat(pix_index[fired], counts)
        # k-th crossing of each firing pixel, k = 1..n
        starts = np.cumsum(counts) - counts
        k = np.arange(counts.sum()) - np.repeat(starts, counts) + 1
        s = np.repeat(sign, counts)
        level = ref[pix] + s * k * c
        slope = l1[pix] - l0[pix]
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = np.where(slope != 0, (level - l0[pix]) / slope, 1.0)
        chunks_t.append(t0 + np.clip(frac, 0.0, 1.0) * dt)
        chunks_pix.append(pix)
        chunks_p.append(s.astype(np.int8))
        ref[fired] += sign * counts * c

    if not chunks_t:
        return EventStream.empty()
    t = np.concatenate(chunks_t)
    pix = np.concatenate(chunks_pix)
    p = np.concatenate(chunks_p)
    order = np.lexsort((pix, t))
    return EventStream(t[order], pix[order] % width, pix[order] // width, p[order])


def to_luminance(frame: np.ndarray) -> np.ndarray:
    """Rec.601 luma of a (3, H, W) or (H, W, 3) frame; 2-D frames pass through."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 2:
        return frame
    weights = np.array([0.299, 0.587, 0.114])
    if frame.shape[0] == 3:
        return np.tensordot(weights, frame, axes=1)
    if frame.shape[-1] == 3:
        return frame @ weights
    raise ValueError(f"cannot take luminance of shape {frame.shape}")


# --------------------------------------------------------------------- I/O


def write_events_binary(path, stream: EventStream) -> None:
    rec = np.empty(len(stream), dtype=RECORD_DTYPE)
    rec["t"] = stream.t
    rec["x"] = stream.x
    rec["y"] = stream.y
    rec["p"] = stream.p
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(stream)))
        fh.write(rec.tobytes())


def read_events_binary(path) -> EventStream:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise EventFormatError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 8:
        raise EventFormatError(f"{path}: truncated header")
    (count,) = struct.unpack("<I", data[4:8])
    expected = 8 + count * RECORD_DTYPE.itemsize
    if len(data) != expected:
        raise EventFormatError(f"{path}: expected {expected} bytes for {count} records, got {len(data)}")
    rec = np.frombuffer(data, dtype=RECORD_DTYPE, offset=8, count=count)
    return EventStream(rec["t"].copy(), rec["x"].astype(np.int64), rec["y"].astype(np.int64), rec["p"].copy())


def write_events_csv(path, stream: EventStream) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "x", "y", "p"])
        for t, x, y, p in zip(stream.t.tolist(), stream.x.tolist(), stream.y.tolist(), stream.p.tolist()):
            writer.writerow([repr(t), x, y, p])


def read_events_csv(path) -> EventStream:
    with open(path, newline="") as fh:
        text = fh.read()
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != ["t", "x", "y", "p"]:
        raise EventFormatError(f"{path}: expected header t,x,y,p, got {header}")
    rows = [r for r in reader if r]
    if not rows:
        return EventStream.empty()
    try:
        t = np.array([float(r[0]) for r in rows])
        x = np.array([int(r[1]) for r in rows])
        y = np.array([int(r[2]) for r in rows])
        p = np.array([int(r[3]) for r in rows])
    except (ValueError, IndexError) as exc:
        raise EventFormatError(f"{path}: {exc}") from exc
    return EventStream(t, x, y, p)


def read_events(path) -> EventStream:
    """Dispatch on extension: ``.csv`` for text, anything else binary."""
    if str(path).lower().endswith(".csv"):
        return read_events_csv(path)
    return read_events_binary(path)


def write_events(path, stream: EventStream) -> None:
    if str(path).lower().endswith(".csv"):
        write_events_csv(path, stream)
    else:
        write_events_binary(path, stream)
