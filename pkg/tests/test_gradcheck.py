import torch

from cardium.gradcheck import check_module, relative_error


def test_relative_error_floor():
    a = torch.tensor([0.0, 1.0, 2e-7], dtype=torch.float64)
    n = torch.tensor([0.0, 1.001, 0.0], dtype=torch.float64)
    err = relative_error(a, n)
    assert err[0] == 0.0
    assert abs(err[1].item() - 0.001 / 1.001) < 1e-12
    assert abs(err[2].item() - 0.2) < 1e-12  # floor 1e-6 dominates


def test_check_module_catches_a_wrong_backward():
    class Broken(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x * x

        @staticmethod
        def backward(ctx, g):
            return g  # should be 2x * g

    lin = torch.nn.Linear(3, 1)
    x = torch.randn(4, 3, dtype=torch.float64)
    good = check_module("lin", lin, lambda: lin(x).pow(2).sum())
    assert max(r.max_rel_error for r in good) < 1e-6
    bad = check_module("lin", lin, lambda: Broken.apply(lin(x)).sum())
    assert max(r.max_rel_error for r in bad) > 0.1
