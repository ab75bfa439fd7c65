"""Optimization loop with clipping, cosine decay, periodic eval, and
best-checkpoint tracking."""

from __future__ import annotations

import csv
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from ..config import TrainConfig
from ..network import save_checkpoint
from .data import batch_stream
from .evaluate import evaluate
from .losses import multiscale_loss

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, dump_path: Path):
        super().__init__(f"non-finite loss at step {step}; state dumped to {dump_path}")
        self.step = step
        self.dump_path = dump_path


@dataclass
class TrainResult:
    checkpoint: Path
    best_checkpoint: Path
    loss_curve: list = field(default_factory=list)  # (step, loss, lr)
    evals: list = field(default_factory=list)  # (step, mean PSNR)
    best_psnr: float = float("-inf")


def set_determinism(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(deterministic)


def lr_at(step: int, cfg: TrainConfig) -> float:
    if cfg.schedule == "constant" or cfg.steps == 0:
        return cfg.lr
    floor = min(cfg.min_lr, cfg.lr)
    return floor + (cfg.lr - floor) * 0.5 * (1 + math.cos(math.pi * step / cfg.steps))


def write_loss_curve(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "lr"])
        for step, loss, lr in curve:
            writer.writerow([step, repr(loss), repr(lr)])


def train(
    model,
    dataset,
    cfg: TrainConfig,
    out_dir,
    eval_dataset=None,
    log: Optional[Callable[[str], None]] = None,
) -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log = log or logger.info
    set_determinism(cfg.seed, cfg.deterministic)
    eval_dataset = eval_dataset if eval_dataset is not None else dataset

    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    batches = batch_stream(dataset, cfg.batch_size, cfg.seed, cfg.crop_size)
    result = TrainResult(out_dir / "last.pt", out_dir / "best.pt")
    model.train()

    for step in range(1, cfg.steps + 1):
        lr = lr_at(step - 1, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        batch = next(batches)
        out = model(batch["blurs"], batch["voxels"])
        loss = multiscale_loss(out.outputs, batch["sharp"], cfg.loss_weights, cfg.charbonnier_eps)
        if not torch.isfinite(loss):
            dump = out_dir / f"nan_step{step:06d}.pt"
            torch.save({"step": step, "model": model.state_dict(), "optimizer": optimizer.state_dict(),
                        "batch": batch, "loss": loss.item()}, dump)
            raise TrainingDiverged(step, dump)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        optimizer.step()
        result.loss_curve.append((step, loss.item(), lr))
        if cfg.log_every and step % cfg.log_every == 0:
            log(f"step {step:5d}  loss {loss.item():.5f}  lr {lr:.3g}")

        if (cfg.eval_every and step % cfg.eval_every == 0) or step == cfg.steps:
            report = evaluate(model, eval_dataset)
            model.train()
            result.evals.append((step, report.mean_psnr))
            log(f"step {step:5d}  eval PSNR {report.mean_psnr:.3f} dB")
            if report.mean_psnr > result.best_psnr:
                result.best_psnr = report.mean_psnr
                save_checkpoint(result.best_checkpoint, model, optimizer, step, {"psnr": report.mean_psnr})

    save_checkpoint(result.checkpoint, model, optimizer, cfg.steps, {"train_config": cfg.to_dict()})
    if not result.best_checkpoint.exists():
        save_checkpoint(result.best_checkpoint, model, optimizer, cfg.steps)
    write_loss_curve(out_dir / "loss_curve.csv", result.loss_curve)
    return result
