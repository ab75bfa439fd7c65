"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import contextlib
import json
import math
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from eled.cli import main
from eled.config import ModelConfig, TrainConfig
from eled.events import EventStream, bilinear_time_weights, events_to_voxel_grid, simulate_events
from eled.gradcheck import CASES, run_suite
from eled.harness.ablation import default_base, describe_row, suite_rows
from eled.harness.data import TripletDataset
from eled.harness.evaluate import evaluate
from eled.harness.metrics import psnr, ssim
from eled.harness.train import train
from eled.network import build_model, count_params, downsample
from eled.primitives import SpectralFilter, deform_conv2d, gaussian_lowpass_mask, pixelwise_dynamic_filter
from eled.synth_data import DegradationConfig, build_dataset, make_scene_specs

D = torch.float64


@pytest.fixture
def criterion(capsys):
    @contextlib.contextmanager
    def check(n, text):
        info = {}
        try:
            yield info
        except BaseException:
            with capsys.disabled():
                print(f"\nFAIL criterion {n}: {text} {info.get('detail', '')}".rstrip())
            raise
        with capsys.disabled():
            print(f"\nPASS criterion {n}: {text} {info.get('detail', '')}".rstrip())

    return check


def test_criterion_1_gradient_suite(criterion):
    with criterion(1, "gradient checks of all learned primitives") as info:
        start = time.perf_counter()
        results = run_suite(trials=5, tol=1e-4)
        elapsed = time.perf_counter() - start
        worst = max(r.rel_error for r in results)
        info["detail"] = f"(worst rel err {worst:.2e}, {len(results)} checks, {elapsed:.1f}s)"
        assert {r.name for r in results} == set(CASES)
        for name in CASES:
            assert sum(r.name == name for r in results) >= 5
        assert all(r.rel_error < 1e-4 for r in results)
        assert elapsed < 120


def test_criterion_2_degenerate_equivalence(criterion):
    with criterion(2, "degenerate-equivalence oracles") as info:
        g = torch.Generator().manual_seed(0)
        x = torch.randn(2, 4, 9, 7, generator=g, dtype=D)
        w = torch.randn(5, 4, 3, 3, generator=g, dtype=D)
        b = torch.randn(5, generator=g, dtype=D)
        groups = 2
        offsets = torch.zeros(2, 2 * groups * 9, 9, 7, dtype=D)
        masks = torch.ones(2, groups * 9, 9, 7, dtype=D)
        dcn_err = (deform_conv2d(x, offsets, masks, w, b) - F.conv2d(x, w, b, padding=1)).abs().max().item()
        assert dcn_err <= 1e-6

        kernels = torch.zeros(2, 9, 9, 7, dtype=D)
        kernels[:, 4] = 1.0
        assert torch.equal(pixelwise_dynamic_filter(x, kernels, 3), x)

        spec = SpectralFilter(4).to(D)
        allpass = torch.ones(9, 7, dtype=D)
        spec_err = (spec(x, allpass) - 2 * x).abs().max().item()
        assert spec_err <= 1e-5
        info["detail"] = f"(dcn {dcn_err:.1e}, dynamic exact, spectral {spec_err:.1e})"


def test_criterion_3_lowpass_mask(criterion):
    h, w, sigma = 97, 80, 9.0
    mask = gaussian_lowpass_mask(h, w, sigma, dtype=D).numpy()
    cy, cx = h // 2, w // 2

    @settings(max_examples=100, deadline=None, derandomize=True)
    @given(st.tuples(st.integers(0, h - 1), st.integers(0, w - 1)),
           st.tuples(st.integers(0, h - 1), st.integers(0, w - 1)))
    def monotone(p, q):
        rp = math.hypot(p[0] - cy, p[1] - cx)
        rq = math.hypot(q[0] - cy, q[1] - cx)
        if rp < rq:
            assert mask[p] > mask[q]
        elif rp == rq:
            assert mask[p] == pytest.approx(mask[q], abs=1e-15)

    with criterion(3, "Gaussian low-pass mask values and radial monotonicity"):
        assert mask[cy, cx] == 1.0
        assert abs(mask[cy, cx + 9] - math.exp(-0.5)) <= 1e-12
        assert abs(mask[cy + 9, cx] - math.exp(-0.5)) <= 1e-12
        monotone()


def test_criterion_4_voxel_and_simulator(criterion):
    with criterion(4, "voxel conservation, partition of unity, simulator threshold example") as info:
        rng = np.random.default_rng(0)
        n, B = 1000, 9
        t = np.sort(rng.uniform(0, 1, n))
        s = EventStream(t, rng.integers(0, 16, n), rng.integers(0, 12, n), rng.choice([-1, 1], n))
        grid = events_to_voxel_grid(s, (0.0, 1.0), B, 12, 16, normalize=False).bins
        total = float(s.p.sum())
        rel = abs(grid.sum() - total) / max(abs(total), 1.0)
        assert rel <= 1e-6
        _, wlo, _, whi = bilinear_time_weights((B - 1) * t, B)
        assert np.all(np.abs(wlo + whi - 1) <= 1e-6)
        assert np.all(wlo >= 0) and np.all(whi >= 0)

        frames = [np.full((1, 1), math.exp(v) - 1e-3) for v in (0.0, 0.45)]
        sim = simulate_events(frames, [0.0, 1.0], 0.2)
        assert len(sim) == 2
        info["detail"] = f"(conservation rel err {rel:.1e}, simulator {len(sim)} events)"


def test_criterion_5_identity_start(criterion):
    with criterion(5, "identity start: zero offsets and outputs equal downsampled blur"):
        model = build_model(ModelConfig.small(), seed=0)
        g = torch.Generator().manual_seed(1)
        blurs = torch.rand(2, 3, 3, 64, 64, generator=g)
        voxels = torch.rand(2, 3, 16, 64, 64, generator=g) * 2 - 1
        with torch.no_grad():
            out = model(blurs, voxels, return_aux=True)
        assert all(torch.count_nonzero(o) == 0 for o in out.aux["offsets"])
        for s in range(3):
            assert torch.equal(out[s], downsample(blurs[:, 1], s))


@pytest.mark.slow
def test_criterion_6_overfit(criterion, tmp_path):
    with criterion(6, "overfit surrogate beats identity baseline by 3 dB") as info:
        build_dataset(make_scene_specs(2, 4, 64, 64, seed=0), DegradationConfig(seed=0), tmp_path / "data")
        ds = TripletDataset(tmp_path / "data")
        assert len(ds) == 8
        baseline = evaluate(None, ds).mean_psnr
        cfg = TrainConfig(lr=1e-3, steps=60, batch_size=4, crop_size=64, eval_every=0, log_every=0, seed=0,
                          deterministic=True)
        start = time.perf_counter()
        model = build_model(ModelConfig.small(), seed=0)
        train(model, ds, cfg, tmp_path / "run")
        final = evaluate(model, ds).mean_psnr
        elapsed = time.perf_counter() - start
        info["detail"] = (f"(baseline {baseline:.2f} dB -> {final:.2f} dB after {cfg.steps} steps, "
                          f"{elapsed:.0f}s on {torch.get_num_threads()} thread(s))")
        assert cfg.steps <= 2000
        assert final >= baseline + 3.0
        assert elapsed <= 30 * 60


def test_criterion_7_ablation_structure(criterion):
    with criterion(7, "edtfa ablation suite: four configurations, monotone parameter counts") as info:
        details = []
        for label, base in (("toy", default_base()), ("full", ModelConfig.full())):
            rows = suite_rows("edtfa", base)
            assert [r.name for r in rows] == ["Ver.1", "Ver.2", "Ver.3", "Ver.4"]
            assert [(r.config.use_edtfa, r.config.fusion) for r in rows] == [
                (False, "conv1x1"), (True, "conv1x1"), (False, "sfcm"), (True, "sfcm")]
            assert [r.ref_params_m for r in rows] == [1.8, 5.0, 9.7, 12.8]
            params = [describe_row(r).params for r in rows]
            assert all(a < b for a, b in zip(params, params[1:]))
            assert params[-1] == count_params(base)
            details.append(f"{label} " + " < ".join(f"{p / 1e6:.2f}M" for p in params))
        info["detail"] = "(" + "; ".join(details) + ")"


def test_criterion_8_metrics(criterion):
    with criterion(8, "PSNR and SSIM correctness") as info:
        a, b = np.full((3, 16, 16), 0.5), np.full((3, 16, 16), 0.6)
        assert abs(psnr(a, b) - 20.0) <= 1e-9
        img = np.random.default_rng(0).uniform(0, 1, (3, 32, 32))
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)
        sigma = 0.05
        vals = []
        for seed in range(10):
            rng = np.random.default_rng(seed)
            clean = np.full((3, 64, 64), 0.5)
            vals.append(psnr(clean, np.clip(clean + rng.normal(0, sigma, clean.shape), 0, 1)))
        expected = 10 * math.log10(1 / sigma**2)
        info["detail"] = f"(noise PSNR {np.mean(vals):.3f} vs {expected:.3f} dB)"
        assert abs(np.mean(vals) - expected) <= 0.3


def _end_to_end(root):
    assert main(["synth", "--out", str(root / "data"), "--scenes", "1", "--triplets", "2", "--size", "32",
                 "--seed", "11", "--deterministic"]) == 0
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "run"), "--steps", "10",
                 "--crop", "32", "--batch-size", "2", "--eval-every", "0", "--seed", "11", "--deterministic"]) == 0
    assert main(["eval", "--data", str(root / "data"), "--checkpoint", str(root / "run" / "last.pt"),
                 "--out", str(root / "eval"), "--seed", "11", "--deterministic"]) == 0
    return (root / "run" / "loss_curve.csv").read_bytes(), (root / "eval" / "eval.json").read_bytes()


def test_criterion_9_determinism(criterion, tmp_path, capsys):
    with criterion(9, "two seeded end-to-end runs agree bit for bit") as info:
        loss_a, eval_a = _end_to_end(tmp_path / "a")
        loss_b, eval_b = _end_to_end(tmp_path / "b")
        capsys.readouterr()
        assert loss_a.count(b"\n") == 11
        assert loss_a == loss_b
        assert eval_a == eval_b
        info["detail"] = f"(mean PSNR {json.loads(eval_a)['mean_psnr']:.4f} dB both runs)"
