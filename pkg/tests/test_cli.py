import json
import re
import subprocess
import sys

import pytest

from eled.cli import COMMANDS, main

HASH = re.compile(r"config hash: ([0-9a-f]{16})")


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(
        "# tiny model for fast tests\n"
        "model.encoder_depths = [1, 1, 1]\n"
        "model.n_cab = 1\n"
        "train.batch_size = 2\n"
        "train.log_every = 0\n"
    )
    assert main(["synth", "--out", str(root / "data"), "--scenes", "1", "--triplets", "2",
                 "--test-scenes", "1", "--size", "32", "--seed", "4"]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--split", "train",
                 "--out", str(root / "run"), "--steps", "2", "--crop", "32", "--eval-every", "0"]) == 0
    return root, cfg


@pytest.mark.parametrize("command", [None, *COMMANDS])
def test_help_exits_zero(capsys, command):
    argv = ["--help"] if command is None else [command, "--help"]
    code, out, _ = run(capsys, *argv)
    assert code == 0 and "usage" in out


def test_usage_errors(capsys, tmp_path):
    assert run(capsys)[0] == 1
    assert run(capsys, "bogus")[0] == 1
    assert run(capsys, "train")[0] == 1
    assert run(capsys, "synth")[0] == 1
    assert run(capsys, "gradcheck", "--case", "nope")[0] == 1
    assert run(capsys, "ablate", "--suite", "nope", "--out", tmp_path)[0] == 1
    assert run(capsys, "ablate", "--suite", "edtfa", "--out", tmp_path)[0] == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("oops.key = 1\n")
    code, _, err = run(capsys, "gradcheck", "--config", bad)
    assert code == 1 and "unknown config sections" in err


def test_runtime_error_exit_two(capsys, tmp_path):
    code, _, err = run(capsys, "eval", "--data", tmp_path / "missing", "--identity")
    assert code == 2 and err.startswith("error: [eval]")


def test_gradcheck_subset(capsys, tmp_path):
    code, out, _ = run(capsys, "gradcheck", "--case", "channel_attention", "--trials", "2", "--out", tmp_path)
    assert code == 0 and HASH.search(out)
    assert "PASS" in out
    res = json.loads((tmp_path / "gradcheck.json").read_text())["results"]
    assert len(res) == 2 and all(r["passed"] for r in res)


def test_synth_outputs(workspace):
    root, _ = workspace
    manifest = json.loads((root / "data" / "manifest.json").read_text())
    assert [s["split"] for s in manifest["scenes"]] == ["train", "test"]
    assert manifest["scenes"][1]["name"] == "test_000"
    assert (root / "data" / "synth_config.txt").is_file()


def test_eval_json_matches_stdout(capsys, workspace):
    root, _ = workspace
    out_dir = root / "eval"
    code, out, _ = run(capsys, "eval", "--data", root / "data", "--checkpoint", root / "run" / "last.pt",
                       "--out", out_dir)
    assert code == 0 and HASH.search(out)
    printed = float(re.search(r"mean PSNR (\S+) dB", out).group(1))
    report = json.loads((out_dir / "eval.json").read_text())
    assert report["mean_psnr"] == printed
    assert report["num_samples"] == 4
    assert "runtime_s" not in report


def test_eval_identity_and_split(capsys, workspace):
    root, _ = workspace
    code, out, _ = run(capsys, "eval", "--data", root / "data", "--identity", "--split", "test")
    assert code == 0
    assert out.count("test_000/") == 2


def test_train_writes_artifacts(workspace):
    root, _ = workspace
    run_dir = root / "run"
    for name in ("last.pt", "best.pt", "loss_curve.csv", "resolved_config.txt"):
        assert (run_dir / name).is_file()
    text = (run_dir / "resolved_config.txt").read_text()
    assert "model.n_cab = 1" in text and "train.steps = 2" in text


def test_infer(capsys, workspace):
    root, _ = workspace
    code, out, _ = run(capsys, "infer", "--checkpoint", root / "run" / "last.pt", "--input", root / "data",
                       "--index", "1", "--grid", "--out", root / "infer")
    assert code == 0 and "PSNR input" in out
    assert (root / "infer" / "restored.png").is_file() and (root / "infer" / "grid.png").is_file()
    assert run(capsys, "infer", "--checkpoint", root / "run" / "last.pt", "--input", root / "data",
               "--index", "99", "--out", root / "infer")[0] == 1


def test_ablate_dry_run_and_report(capsys, workspace):
    root, _ = workspace
    code, out, _ = run(capsys, "ablate", "--suite", "edtfa", "--dry-run", "--out", root / "abl")
    assert code == 0 and "Ver.4" in out
    h = HASH.search(out).group(1)
    assert (root / "abl" / "ablation_edtfa.hash").read_text().strip() == h
    code, out, _ = run(capsys, "report", root / "abl" / "ablation_edtfa.json", root / "run" / "loss_curve.csv",
                       "--out", root / "rep")
    assert code == 0
    assert (root / "rep" / "ablation_edtfa.png").is_file() and (root / "rep" / "loss_curve.png").is_file()


def test_config_hash_stable(capsys, tmp_path):
    a = HASH.search(run(capsys, "ablate", "--suite", "sfcmfe", "--dry-run", "--out", tmp_path / "a")[1])
    b = HASH.search(run(capsys, "ablate", "--suite", "sfcmfe", "--dry-run", "--out", tmp_path / "b")[1])
    c = HASH.search(run(capsys, "ablate", "--suite", "sfcmfe", "--dry-run", "--seed", "3",
                        "--out", tmp_path / "c")[1])
    assert a.group(1) == b.group(1) != c.group(1)


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "eled", "report", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "usage" in proc.stdout
