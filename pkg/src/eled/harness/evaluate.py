"""Evaluation reports.

EvalReport JSON schema::

    {
      "per_sample": [{"id": str, "psnr": float, "ssim": float}, ...],
      "mean_psnr": float, "mean_ssim": float,
      "num_samples": int,
      "config_hash": str,       # model config hash, or "identity"
      "provenance": str,        # package version, git revision, config hash
      "runtime_s": float        # omitted in deterministic mode (see save_report)
    }
"""

from __future__ import annotations

import json
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .. import __version__
from .metrics import psnr, ssim


@dataclass
class EvalReport:
    per_sample: list = field(default_factory=list)
    mean_psnr: float = float("nan")
    mean_ssim: float = float("nan")
    runtime_s: float = 0.0
    config_hash: str = ""
    provenance: str = ""

    def to_dict(self, include_runtime: bool = True) -> dict:
        d = {
            "per_sample": self.per_sample,
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "num_samples": len(self.per_sample),
            "config_hash": self.config_hash,
            "provenance": self.provenance,
        }
        if include_runtime:
            d["runtime_s"] = self.runtime_s
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["per_sample"], d["mean_psnr"], d["mean_ssim"], d.get("runtime_s", 0.0),
                   d.get("config_hash", ""), d.get("provenance", ""))


def git_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return "nogit"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "nogit"


def provenance(config_hash: str) -> str:
    return f"eled-{__version__}+g{git_revision()}:{config_hash}"


@torch.no_grad()
def evaluate(model, dataset, batch_size: int = 4) -> EvalReport:
    """Score S_0 against the sharp target. ``model=None`` scores the center
    blurry input itself (identity baseline)."""
    start = time.perf_counter()
    if model is not None:
        was_training = model.training
        model.eval()
    rows = []
    for i in range(0, len(dataset), batch_size):
        items = [dataset[j] for j in range(i, min(i + batch_size, len(dataset)))]
        blurs = torch.stack([it["blurs"] for it in items])
        if model is None:
            pred = blurs[:, 1]
        else:
            voxels = torch.stack([it["voxels"] for it in items])
            pred = model(blurs, voxels).outputs[0]
        for it, p in zip(items, pred):
            p = p.double().numpy()
            t = it["sharp"].double().numpy()
            rows.append({"id": it["id"], "psnr": psnr(p, t), "ssim": ssim(p, t)})
    if model is not None and was_training:
        model.train()
    cfg_hash = "identity" if model is None else model.config.hash()
    return EvalReport(
        per_sample=rows,
        mean_psnr=float(np.mean([r["psnr"] for r in rows])) if rows else float("nan"),
        mean_ssim=float(np.mean([r["ssim"] for r in rows])) if rows else float("nan"),
        runtime_s=time.perf_counter() - start,
        config_hash=cfg_hash,
        provenance=provenance(cfg_hash),
    )


def save_report(report: EvalReport, path, deterministic: bool = False) -> Path:
    """Write the report JSON. In deterministic mode the wall-clock runtime
    goes to a ``.timing.json`` sidecar so the report itself is reproducible."""
    path = Path(path)
    path.write_text(json.dumps(report.to_dict(include_runtime=not deterministic), indent=2, sort_keys=True))
    if deterministic:
        path.with_suffix(".timing.json").write_text(json.dumps({"runtime_s": report.runtime_s}))
    return path


def load_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


def format_report(report: EvalReport) -> str:
    lines = [f"{'sample':<24} {'PSNR':>8} {'SSIM':>7}"]
    for r in report.per_sample:
        lines.append(f"{r['id']:<24} {r['psnr']:8.3f} {r['ssim']:7.4f}")
    lines.append(f"{'mean':<24} {report.mean_psnr:8.3f} {report.mean_ssim:7.4f}")
    return "\n".join(lines)
