"""In-memory triplet dataset read from a synthetic dataset directory."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch

from ..events import events_to_voxel_grid
from ..synth_data import load_manifest, read_triplet


def num_workers() -> int:
    try:
        return max(1, int(os.environ.get("ELED_NUM_WORKERS", "1")))
    except ValueError:
        return 1


def load_triplet_item(root, triplet: dict, voxel_bins: int = 16, normalize: bool = True) -> dict:
    """Read one triplet (manifest schema, paths relative to ``root``) and voxelize its events."""
    raw = read_triplet(root, triplet)
    _, _, h, w = raw["blur"].shape
    vox = np.stack([
        events_to_voxel_grid(ev, win, voxel_bins, h, w, normalize).bins
        for ev, win in zip(raw["events"], raw["windows"])
    ])
    item = {
        "blurs": torch.from_numpy(raw["blur"].astype(np.float32)),
        "voxels": torch.from_numpy(vox.astype(np.float32)),
        "sharp": torch.from_numpy(raw["sharp"].astype(np.float32)) if raw.get("sharp") is not None else None,
        "id": f"{triplet.get('scene', 'triplet')}/{int(triplet.get('center', 0)):06d}",
    }
    return item


class TripletDataset:
    """Every triplet of a manifest, voxelized once at load time.

    Items are dicts of float32 tensors: ``blurs`` (3, 3, H, W), ``voxels``
    (3, B, H, W), ``sharp`` (3, H, W), plus ``id``.
    """

    def __init__(self, root, voxel_bins: int = 16, normalize: bool = True, split: Optional[str] = None,
                 limit: Optional[int] = None):
        self.root = Path(root)
        self.manifest = load_manifest(self.root)
        self.voxel_bins = voxel_bins
        scenes = {s["name"]: s for s in self.manifest["scenes"]}
        triplets = self.manifest["triplets"]
        if split is not None:
            triplets = [t for t in triplets if scenes[t["scene"]].get("split", "train") == split]
        if limit is not None:
            triplets = triplets[:limit]
        self.triplets = triplets

        load = lambda t: load_triplet_item(self.root, t, voxel_bins, normalize)
        with ThreadPoolExecutor(max_workers=num_workers()) as pool:
            self.items = list(pool.map(load, self.triplets))

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]


def crop_item(item: dict, top: int, left: int, size: int) -> dict:
    sl = (slice(top, top + size), slice(left, left + size))
    return {
        "blurs": item["blurs"][..., sl[0], sl[1]],
        "voxels": item["voxels"][..., sl[0], sl[1]],
        "sharp": item["sharp"][..., sl[0], sl[1]],
        "id": item["id"],
    }


def collate(items) -> dict:
    return {
        "blurs": torch.stack([it["blurs"] for it in items]),
        "voxels": torch.stack([it["voxels"] for it in items]),
        "sharp": torch.stack([it["sharp"] for it in items]),
        "id": [it["id"] for it in items],
    }


def batch_stream(dataset, batch_size: int, seed: int, crop_size: Optional[int] = None) -> Iterator[dict]:
    """Endless shuffled batches; order and crops depend only on ``seed``."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(seed)
    while True:
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            if len(idx) < batch_size and len(dataset) >= batch_size:
                break
            items = []
            for i in idx:
                item = dataset[int(i)]
                h, w = item["sharp"].shape[-2:]
                if crop_size is not None and crop_size < min(h, w):
                    top = int(rng.integers(0, h - crop_size + 1))
                    left = int(rng.integers(0, w - crop_size + 1))
                    item = crop_item(item, top, left, crop_size)
                items.append(item)
            yield collate(items)
