"""Command-line entry point: ``eled <command> [flags]``.

Exit codes: 0 success, 1 usage error (bad flags, bad config), 2 runtime
failure. Every command prints the hash of its resolved configuration.

Config files use flat dotted keys (see :mod:`eled.config`); recognized
sections are ``model``, ``train``, ``degrade`` and ``synth``. Flags given on
the command line override config-file values.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ModelConfig, TrainConfig, config_hash, dump_flat_config, load_flat_config

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
SECTIONS = ("model", "train", "degrade", "synth")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, out_help: str = "output directory") -> None:
    p.add_argument("--config", type=Path, help="flat dotted-key config file")
    p.add_argument("--seed", type=int, help="random seed (default from config, else 0)")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                   help="deterministic algorithms (default on)")
    p.add_argument("--out", type=Path, help=out_help)


def _model_flags(p) -> None:
    p.add_argument("--variant", choices=("small", "full"), help="model size (default small)")


def _train_flags(p) -> None:
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--crop", type=int, help="square crop size, divisible by 4")
    p.add_argument("--eval-every", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="eled", description="Event-guided low-light video enhancement and deblurring.")
    parser.add_argument("--version", action="version", version=f"eled {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="build a synthetic dataset")
    _common(p, "dataset directory (required)")
    p.add_argument("--scenes", type=int, help="number of training scenes (default 2)")
    p.add_argument("--triplets", type=int, help="triplets per scene (default 4)")
    p.add_argument("--test-scenes", type=int, help="extra scenes tagged split=test (default 0)")
    p.add_argument("--size", type=int, help="square frame size in pixels (default 64)")
    p.add_argument("--blur-window", type=int, help="sharp frames averaged per blurry frame, odd (default 9)")
    p.add_argument("--image-dir", type=Path, action="append", default=[],
                   help="directory of sharp frames to use as an extra scene (repeatable)")

    p = sub.add_parser("train", help="train a model on a dataset")
    _common(p, "run directory for checkpoints and loss curve (required)")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--split", help="train only on scenes with this split tag")
    p.add_argument("--eval-data", type=Path, help="dataset for periodic evaluation (default: --data)")
    _model_flags(p)
    _train_flags(p)

    p = sub.add_parser("eval", help="score a checkpoint (or the identity baseline)")
    _common(p, "directory for eval.json")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", help="only scenes with this split tag")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--identity", action="store_true", help="score the center blurry frame itself")

    p = sub.add_parser("infer", help="restore one triplet")
    _common(p, "directory for restored.png (required)")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True,
                   help="triplet directory (with triplet.json) or dataset directory (with manifest.json)")
    p.add_argument("--index", type=int, default=0, help="triplet index when --input is a dataset")
    p.add_argument("--grid", action="store_true", help="also write blurry | restored | sharp side by side")

    p = sub.add_parser("ablate", help="run an ablation suite")
    _common(p, "directory for tables and runs (required)")
    p.add_argument("--suite", required=True, help="edtfa, sfcmfe, lpf-branch or fusion-alt")
    p.add_argument("--data", type=Path, help="training dataset (required unless --dry-run)")
    p.add_argument("--eval-data", type=Path)
    p.add_argument("--dry-run", action="store_true", help="only list configurations and parameter counts")
    p.add_argument("--variant", choices=("toy", "small", "full"), default="toy",
                   help="base configuration (default toy)")
    _train_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks of the learned primitives")
    _common(p, "directory for gradcheck.json")
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--case", action="append", help="restrict to a case (repeatable)")

    p = sub.add_parser("report", help="render JSON reports / loss curves to tables and plots")
    _common(p, "directory for tables and images (default: next to each input)")
    p.add_argument("inputs", nargs="+", type=Path, help="eval JSON, ablation JSON or loss_curve.csv")
    return parser


# ------------------------------------------------------------ resolution


def _load_config(args) -> dict:
    tree = load_flat_config(args.config) if args.config else {}
    unknown = set(tree) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}; expected {SECTIONS}")
    for k, v in tree.items():
        if not isinstance(v, dict):
            raise ConfigError(f"top-level key {k!r} needs a section prefix")
    return tree


def _seed(args, tree) -> int:
    if args.seed is not None:
        return args.seed
    return int(tree.get("train", {}).get("seed", 0))


def _resolve_model(args, tree, variant_default="small") -> ModelConfig:
    section = dict(tree.get("model", {}))
    variant = getattr(args, "variant", None) or section.pop("variant", variant_default)
    section.pop("variant", None)
    if variant == "toy":
        from .harness.ablation import default_base

        base = default_base().to_dict()
        base.update(section)
        return ModelConfig.from_dict(base)
    return ModelConfig.from_variant(variant, **section)


def _resolve_train(args, tree, seed) -> TrainConfig:
    d = dict(tree.get("train", {}))
    for flag, key in (("steps", "steps"), ("lr", "lr"), ("batch_size", "batch_size"), ("crop", "crop_size"),
                      ("eval_every", "eval_every")):
        value = getattr(args, flag, None)
        if value is not None:
            d[key] = value
    d["seed"] = seed
    if args.deterministic is not None:
        d["deterministic"] = args.deterministic
    return TrainConfig.from_dict(d)


def _announce(command: str, resolved: dict, seed: int) -> str:
    h = config_hash({"command": command, "seed": seed, **resolved})
    print(f"config hash: {h}  (command {command}, seed {seed})", flush=True)
    return h


def _require_out(args) -> Path:
    if args.out is None:
        raise UsageError(f"{args.command}: --out is required")
    return args.out


def _write_resolved(out: Path, resolved: dict, h: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.txt").write_text(f"# config hash {h}\n" + dump_flat_config(resolved))


def _set_determinism(seed: int, deterministic: bool) -> None:
    from .harness.train import set_determinism

    set_determinism(seed, deterministic)


# ------------------------------------------------------------ commands


def cmd_synth(args, tree) -> int:
    from .synth_data import DegradationConfig, ImageSequenceScene, build_dataset, make_scene_specs

    out = _require_out(args)
    seed = _seed(args, tree)
    synth = dict(tree.get("synth", {}))
    for flag in ("scenes", "triplets", "test_scenes", "size", "blur_window"):
        value = getattr(args, flag)
        if value is not None:
            synth[flag] = value
    known = {"scenes": 2, "triplets": 4, "test_scenes": 0, "size": 64, "blur_window": 9, "fps": 240.0}
    unknown = set(synth) - set(known)
    if unknown:
        raise ConfigError(f"unknown synth keys {sorted(unknown)}")
    synth = {**known, **synth}
    if synth["scenes"] < 0 or synth["test_scenes"] < 0 or synth["scenes"] + synth["test_scenes"] < 1:
        raise UsageError("synth: need at least one scene")
    degrade = dict(tree.get("degrade", {}))
    degrade["seed"] = seed
    try:
        dcfg = DegradationConfig(**degrade)
    except TypeError as exc:
        raise ConfigError(f"degrade: {exc}") from exc
    resolved = {"synth": synth, "degrade": dcfg.to_dict(), "image_dirs": [str(d) for d in args.image_dir]}
    h = _announce("synth", resolved, seed)

    total = synth["scenes"] + synth["test_scenes"]
    specs = make_scene_specs(total, synth["triplets"], synth["size"], synth["size"], seed, synth["blur_window"],
                             synth["fps"]) if total else []
    splits = ["train"] * synth["scenes"] + ["test"] * synth["test_scenes"]
    for i in range(synth["scenes"], total):
        specs[i].name = f"test_{i - synth['scenes']:03d}"
    for j, d in enumerate(args.image_dir):
        specs.append(ImageSequenceScene(str(d), synth["fps"], synth["blur_window"], seed, f"images_{j:03d}"))
        splits.append("train")
    manifest = build_dataset(specs, dcfg, out, splits=splits)
    (out / "synth_config.txt").write_text(f"# config hash {h}\n" + dump_flat_config({"synth": synth}))
    print(f"wrote {len(manifest['triplets'])} triplets from {len(manifest['scenes'])} scenes to {out}")
    return EXIT_OK


def cmd_train(args, tree) -> int:
    from .harness.data import TripletDataset
    from .harness.train import train
    from .network import build_model, count_params

    out = _require_out(args)
    seed = _seed(args, tree)
    mcfg = _resolve_model(args, tree)
    tcfg = _resolve_train(args, tree, seed)
    resolved = {"model": mcfg.to_dict(), "train": tcfg.to_dict(), "data": str(args.data), "split": args.split}
    h = _announce("train", resolved, seed)
    _write_resolved(out, {"model": mcfg.to_dict(), "train": tcfg.to_dict()}, h)
    _set_determinism(seed, tcfg.deterministic)
    dataset = TripletDataset(args.data, mcfg.voxel_bins, split=args.split)
    if len(dataset) == 0:
        raise RuntimeError(f"[data] no triplets in {args.data} (split {args.split})")
    eval_ds = TripletDataset(args.eval_data, mcfg.voxel_bins) if args.eval_data else None
    model = build_model(mcfg, seed=seed)
    print(f"model {mcfg.variant}: {count_params(model)} parameters; {len(dataset)} training triplets")
    start = time.perf_counter()
    result = train(model, dataset, tcfg, out, eval_dataset=eval_ds, log=print)
    print(f"final loss {result.loss_curve[-1][1]:.6f}" if result.loss_curve else "no steps run")
    print(f"best eval PSNR {result.best_psnr:.4f} dB; {time.perf_counter() - start:.1f}s")
    print(f"checkpoints: {result.checkpoint} {result.best_checkpoint}")
    return EXIT_OK


def cmd_eval(args, tree) -> int:
    from .harness.data import TripletDataset
    from .harness.evaluate import evaluate, format_report, save_report
    from .network import load_checkpoint

    seed = _seed(args, tree)
    deterministic = True if args.deterministic is None else args.deterministic
    model = None
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
    bins = model.config.voxel_bins if model is not None else int(tree.get("model", {}).get("voxel_bins", 16))
    resolved = {"model": model.config.to_dict() if model else "identity", "data": str(args.data),
                "split": args.split, "checkpoint": str(args.checkpoint) if args.checkpoint else None}
    _announce("eval", resolved, seed)
    _set_determinism(seed, deterministic)
    dataset = TripletDataset(args.data, bins, split=args.split)
    if len(dataset) == 0:
        raise RuntimeError(f"[data] no triplets in {args.data} (split {args.split})")
    report = evaluate(model, dataset)
    print(format_report(report))
    print(f"mean PSNR {report.mean_psnr!r} dB, mean SSIM {report.mean_ssim!r}")
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        path = save_report(report, args.out / "eval.json", deterministic)
        print(f"wrote {path}")
    return EXIT_OK


def cmd_infer(args, tree) -> int:
    import torch

    from .harness.data import load_triplet_item
    from .network import load_checkpoint
    from .synth_data import DatasetIOError, load_manifest, save_png

    out = _require_out(args)
    seed = _seed(args, tree)
    model, _ = load_checkpoint(args.checkpoint)
    src = args.input
    if (src / "triplet.json").is_file():
        try:
            triplet = json.loads((src / "triplet.json").read_text())
        except json.JSONDecodeError as exc:
            raise DatasetIOError(f"{src / 'triplet.json'}: {exc}") from exc
    elif (src / "manifest.json").is_file():
        triplets = load_manifest(src)["triplets"]
        if not 0 <= args.index < len(triplets):
            raise UsageError(f"infer: --index {args.index} out of range (dataset has {len(triplets)} triplets)")
        triplet = triplets[args.index]
    else:
        raise DatasetIOError(f"{src}: neither triplet.json nor manifest.json found")
    resolved = {"model": model.config.to_dict(), "input": str(src), "index": args.index}
    _announce("infer", resolved, seed)
    _set_determinism(seed, True if args.deterministic is None else args.deterministic)
    item = load_triplet_item(src, triplet, model.config.voxel_bins)
    model.eval()
    with torch.no_grad():
        restored = model(item["blurs"][None], item["voxels"][None]).outputs[0][0].numpy()
    out.mkdir(parents=True, exist_ok=True)
    save_png(out / "restored.png", restored)
    print(f"wrote {out / 'restored.png'}")
    if item["sharp"] is not None:
        from .harness.metrics import psnr

        sharp = item["sharp"].numpy()
        print(f"PSNR input {psnr(item['blurs'][1].numpy(), sharp):.3f} dB -> restored {psnr(restored, sharp):.3f} dB")
    if args.grid:
        panels = [item["blurs"][1].numpy(), restored] + ([item["sharp"].numpy()] if item["sharp"] is not None else [])
        save_png(out / "grid.png", np.concatenate(panels, axis=2))
        print(f"wrote {out / 'grid.png'}")
    return EXIT_OK


def cmd_ablate(args, tree) -> int:
    from .harness.ablation import SUITES, describe_row, format_table, run_ablation, save_table, suite_rows

    if args.suite not in SUITES:
        raise UsageError(f"ablate: unknown suite {args.suite!r}; choose from {', '.join(SUITES)}")
    out = _require_out(args)
    seed = _seed(args, tree)
    base = _resolve_model(args, tree, "toy")
    tcfg = _resolve_train(args, tree, seed)
    rows = suite_rows(args.suite, base)
    resolved = {"suite": args.suite, "rows": [r.config.to_dict() for r in rows], "train": tcfg.to_dict(),
                "data": str(args.data), "dry_run": args.dry_run}
    h = _announce("ablate", resolved, seed)
    out.mkdir(parents=True, exist_ok=True)
    if args.dry_run:
        results = [describe_row(r) for r in rows]
        save_table(results, args.suite, out)
    else:
        if args.data is None:
            raise UsageError("ablate: --data is required unless --dry-run")
        from .harness.data import TripletDataset

        _set_determinism(seed, tcfg.deterministic)
        dataset = TripletDataset(args.data, base.voxel_bins, split="train")
        eval_ds = TripletDataset(args.eval_data, base.voxel_bins) if args.eval_data else None
        results = run_ablation(args.suite, dataset, tcfg, out, base, eval_ds, log=print)
    (out / f"ablation_{args.suite}.hash").write_text(h + "\n")
    print(format_table(results, args.suite))
    return EXIT_OK


def cmd_gradcheck(args, tree) -> int:
    from .gradcheck import CASES, run_suite

    seed = _seed(args, tree)
    names = args.case or list(CASES)
    unknown = set(names) - set(CASES)
    if unknown:
        raise UsageError(f"gradcheck: unknown case(s) {sorted(unknown)}; choose from {', '.join(CASES)}")
    if args.trials < 1 or not args.tol > 0:
        raise UsageError("gradcheck: --trials must be >= 1 and --tol > 0")
    _announce("gradcheck", {"cases": names, "trials": args.trials, "tol": args.tol}, seed)
    start = time.perf_counter()
    results = run_suite(args.trials, args.tol, names)
    worst = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.rel_error)
    for name, err in worst.items():
        ok = all(r.passed for r in results if r.name == name)
        print(f"{'PASS' if ok else 'FAIL'}  {name:<24} max rel err {err:.3e}")
    elapsed = time.perf_counter() - start
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {elapsed:.1f}s")
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "gradcheck.json").write_text(json.dumps(
            {"tol": args.tol, "results": [vars(r) for r in results]}, indent=2))
    if failed:
        print(f"gradient check failed for: {sorted({r.name for r in failed})}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_report(args, tree) -> int:
    from .harness.report import render

    seed = _seed(args, tree)
    _announce("report", {"inputs": [str(p) for p in args.inputs]}, seed)
    written = []
    for path in args.inputs:
        if not path.is_file():
            raise UsageError(f"report: {path} does not exist")
        written += render([path], args.out or path.parent)
    for p in written:
        if p.suffix == ".txt":
            print(p.read_text(), end="")
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
    "ablate": cmd_ablate, "gradcheck": cmd_gradcheck, "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        tree = _load_config(args)
        return COMMANDS[args.command](args, tree)
    except (UsageError, ConfigError) as exc:
        print(f"error: [{args.command}] {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        stage = getattr(exc, "stage", None)
        tag = f"{args.command}/{stage}" if stage else args.command
        print(f"error: [{tag}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
