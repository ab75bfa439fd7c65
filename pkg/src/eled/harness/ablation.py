"""Ablation runner.

Suites:

* ``edtfa``: Ver.1 (no alignment, 1x1 fusion) through Ver.4 (full model).
* ``sfcmfe``: CAB / spatial attention / low-pass branch toggles inside the
  fusion module.
* ``lpf-branch``: no low-pass branch vs. the branch at several Gaussian
  widths (sigma = max(H_s, W_s) / divisor).
* ``fusion-alt``: 1x1 fusion, cross-attention and gated stand-ins, full
  fusion module.

Every configuration is trained with the same TrainConfig. Published
reference numbers are carried along for side-by-side printing only.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, List, Optional

from ..config import ConfigError, ModelConfig, TrainConfig, config_hash
from ..network import build_model, count_params, params_report
from .evaluate import evaluate
from .train import train

SUITES = ("edtfa", "sfcmfe", "lpf-branch", "fusion-alt")


@dataclass
class AblationRow:
    name: str
    description: str
    config: ModelConfig
    ref_psnr: Optional[float] = None
    ref_params_m: Optional[float] = None


@dataclass
class AblationResult:
    name: str
    description: str
    config_hash: str
    params: int
    params_m: float
    float32_mb: float
    psnr: Optional[float] = None
    ssim: Optional[float] = None
    ref_psnr: Optional[float] = None
    ref_params_m: Optional[float] = None


def default_base() -> ModelConfig:
    """Toy-scale base shared by all suites: small width, one transformer block
    per scale, four CABs per fusion level."""
    return ModelConfig.small(n_cab=4, encoder_depths=(1, 1, 1))


def suite_rows(suite: str, base: Optional[ModelConfig] = None) -> List[AblationRow]:
    """Configurations of a suite; a pure function of ``(suite, base)``."""
    base = default_base() if base is None else base
    v = lambda **kw: replace(base, **kw)
    if suite == "edtfa":
        return [
            AblationRow("Ver.1", "no alignment, 1x1 fusion", v(use_edtfa=False, fusion="conv1x1"), 29.59, 1.8),
            AblationRow("Ver.2", "alignment, 1x1 fusion", v(use_edtfa=True, fusion="conv1x1"), 30.78, 5.0),
            AblationRow("Ver.3", "no alignment, SFCM-FE", v(use_edtfa=False, fusion="sfcm"), 30.40, 9.7),
            AblationRow("Ver.4", "alignment, SFCM-FE (full)", v(use_edtfa=True, fusion="sfcm"), 31.30, 12.8),
        ]
    if suite == "sfcmfe":
        def toggles(cab, sa, lpf):
            return v(use_edtfa=True, fusion="sfcm", use_cab=cab, use_sa=sa, use_lpf=lpf)
        return [
            AblationRow("Ver.1", "-CAB -SA -LPF", toggles(False, False, False), 30.78),
            AblationRow("Ver.2", "+CAB -SA -LPF", toggles(True, False, False), 30.81),
            AblationRow("Ver.3", "+CAB +SA -LPF", toggles(True, True, False), 30.79),
            AblationRow("Ver.4", "-CAB +SA +LPF", toggles(False, True, True), 31.22),
            AblationRow("Ver.5", "+CAB +SA +LPF", toggles(True, True, True), 31.30),
        ]
    if suite == "lpf-branch":
        rows = [AblationRow("no-LPF", "branch (a) bypassed", v(fusion="sfcm", use_lpf=False), 30.79)]
        for divisor in (8.0, 4.0, 2.0):
            ref = 31.30 if divisor == base.sigma_divisor else None
            rows.append(AblationRow(f"sigma/{divisor:g}", f"low-pass sigma = max(H, W) / {divisor:g}",
                                    v(fusion="sfcm", use_lpf=True, sigma_divisor=divisor), ref))
        return rows
    if suite == "fusion-alt":
        return [
            AblationRow("w/o", "1x1 fusion", v(fusion="conv1x1"), 30.78),
            AblationRow("efnet", "cross-attention stand-in", v(fusion="efnet"), 30.55),
            AblationRow("refid", "gated stand-in", v(fusion="refid"), 30.86),
            AblationRow("sfcm", "SFCM-FE", v(fusion="sfcm"), 31.30),
        ]
    raise ConfigError(f"unknown ablation suite {suite!r}; choose from {SUITES}")


def suite_hash(suite: str, base: Optional[ModelConfig] = None) -> str:
    return config_hash([row.config.to_dict() for row in suite_rows(suite, base)])


def describe_row(row: AblationRow) -> AblationResult:
    n = count_params(row.config)
    rep = params_report(n)
    return AblationResult(row.name, row.description, row.config.hash(), n, rep["params_m"], rep["float32_mb"],
                          ref_psnr=row.ref_psnr, ref_params_m=row.ref_params_m)


def run_ablation(
    suite: str,
    dataset,
    train_cfg: TrainConfig,
    out_dir,
    base: Optional[ModelConfig] = None,
    eval_dataset=None,
    log: Optional[Callable[[str], None]] = None,
) -> List[AblationResult]:
    """Train and evaluate every row of ``suite`` under the same budget, then
    write ``ablation_<suite>.json`` and ``.txt`` into ``out_dir``."""
    rows = suite_rows(suite, base)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    eval_dataset = dataset if eval_dataset is None else eval_dataset
    results = []
    for i, row in enumerate(rows):
        if log:
            log(f"[{suite}] {row.name}: {row.description} (config {row.config.hash()})")
        model = build_model(row.config, seed=train_cfg.seed)
        train(model, dataset, train_cfg, out_dir / f"{suite}_{i}_{row.name}", log=log)
        report = evaluate(model, eval_dataset)
        res = describe_row(row)
        res.psnr, res.ssim = report.mean_psnr, report.mean_ssim
        results.append(res)
    save_table(results, suite, out_dir)
    return results


def format_table(results: List[AblationResult], suite: str = "") -> str:
    fmt = lambda x, spec: format("-", f">{int(float(spec[:-1]))}") if x is None else format(x, spec)
    head = f"{'row':<10} {'description':<30} {'PSNR':>8} {'SSIM':>7} {'params(M)':>10} {'MB':>8} {'ref PSNR':>9} {'ref M':>6}"
    lines = [f"ablation suite: {suite}" if suite else "ablation", head, "-" * len(head)]
    for r in results:
        lines.append(
            f"{r.name:<10} {r.description:<30} {fmt(r.psnr, '8.3f')} {fmt(r.ssim, '7.4f')} "
            f"{r.params_m:10.3f} {r.float32_mb:8.2f} {fmt(r.ref_psnr, '9.2f')} {fmt(r.ref_params_m, '6.1f')}"
        )
    return "\n".join(lines) + "\n"


def save_table(results: List[AblationResult], suite: str, out_dir) -> Path:
    out_dir = Path(out_dir)
    path = out_dir / f"ablation_{suite}.json"
    path.write_text(json.dumps({"suite": suite, "rows": [asdict(r) for r in results]}, indent=2, sort_keys=True))
    (out_dir / f"ablation_{suite}.txt").write_text(format_table(results, suite))
    return path


def load_table(path) -> tuple:
    d = json.loads(Path(path).read_text())
    return d["suite"], [AblationResult(**r) for r in d["rows"]]
