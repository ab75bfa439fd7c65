import pytest
import torch

from eled.gradcheck import CASES, central_difference, relative_gradient_error, run_case, run_suite


def test_central_difference_on_quadratic():
    x = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)
    (g,) = central_difference(lambda: (x**2).sum() + 3 * x[0], [x])
    torch.testing.assert_close(g, 2 * x + torch.tensor([3.0, 0, 0], dtype=torch.float64), atol=1e-8, rtol=0)


def test_detects_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return x**3

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 2 * x  # should be 3x^2

    x = (torch.rand(4, dtype=torch.float64) + 0.5).requires_grad_(True)
    assert relative_gradient_error(lambda: Wrong.apply(x), [x], seed=0) > 1e-2
    assert relative_gradient_error(lambda: x**3, [x], seed=0) < 1e-8


def test_all_primitives_covered():
    assert set(CASES) == {"transposed_attention", "deformable_conv", "dynamic_filter", "spectral_filter",
                          "channel_attention", "spatial_attention_fuse", "deconv4"}


def test_single_case_reproducible():
    a, b = run_case("dynamic_filter", 3), run_case("dynamic_filter", 3)
    assert a.passed and a.rel_error == b.rel_error


def test_unknown_case():
    with pytest.raises(KeyError):
        run_suite(1, names=["nope"])
