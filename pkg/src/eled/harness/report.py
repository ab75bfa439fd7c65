"""Render saved artifacts (eval reports, ablation tables, loss curves) as
plain-text tables and static PNG plots."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .ablation import format_table, load_table  # noqa: E402
from .evaluate import format_report, load_report  # noqa: E402


class ReportError(ValueError):
    pass


def read_loss_curve(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(rows[0]) != {"step", "loss", "lr"}:
        raise ReportError(f"{path}: expected columns step, loss, lr")
    return [(int(r["step"]), float(r["loss"]), float(r["lr"])) for r in rows]


def detect_kind(path) -> str:
    path = Path(path)
    if path.suffix == ".csv":
        return "loss_curve"
    try:
        d = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ReportError(f"{path}: {exc}") from exc
    if isinstance(d, dict) and "suite" in d and "rows" in d:
        return "ablation"
    if isinstance(d, dict) and "per_sample" in d:
        return "eval"
    raise ReportError(f"{path}: not an eval report, ablation table or loss curve")


def plot_loss_curve(curve, out_path) -> Path:
    steps = [c[0] for c in curve]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, [c[1] for c in curve], lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return Path(out_path)


def plot_eval(report, out_path) -> Path:
    ids = [s["id"] for s in report.per_sample]
    fig, ax = plt.subplots(figsize=(max(4, 0.4 * len(ids) + 2), 3.5))
    ax.bar(range(len(ids)), [s["psnr"] for s in report.per_sample])
    ax.axhline(report.mean_psnr, color="k", ls="--", lw=1, label=f"mean {report.mean_psnr:.2f} dB")
    ax.set_xticks(range(len(ids)))
    ax.set_xticklabels(ids, rotation=90, fontsize=6)
    ax.set_ylabel("PSNR (dB)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return Path(out_path)


def plot_ablation(suite, rows, out_path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    x = range(len(rows))
    ax.bar(x, [r.psnr if r.psnr is not None else 0.0 for r in rows])
    ax.set_xticks(list(x))
    ax.set_xticklabels([r.name for r in rows])
    ax.set_ylabel("PSNR (dB)")
    ax.set_title(f"ablation: {suite}")
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return Path(out_path)


def render(paths, out_dir) -> List[Path]:
    """Write a ``.txt`` table and a ``.png`` plot per input into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for path in map(Path, paths):
        kind = detect_kind(path)
        stem = out_dir / path.stem
        if kind == "loss_curve":
            curve = read_loss_curve(path)
            if not curve:
                raise ReportError(f"{path}: empty loss curve")
            text = f"loss curve: {len(curve)} steps, first {curve[0][1]:.5f}, last {curve[-1][1]:.5f}\n"
            written.append(plot_loss_curve(curve, stem.with_suffix(".png")))
        elif kind == "eval":
            report = load_report(path)
            text = format_report(report)
            written.append(plot_eval(report, stem.with_suffix(".png")))
        else:
            suite, rows = load_table(path)
            text = format_table(rows, suite)
            written.append(plot_ablation(suite, rows, stem.with_suffix(".png")))
        txt = stem.with_suffix(".txt")
        txt.write_text(text)
        written.append(txt)
    return written
