"""Central finite-difference gradient verification for the network modules.

Every check runs in float64 with the module in eval mode (dropout and
stochastic depth off), so the function being differentiated is fixed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
from torch import nn

from .encoders import ImageEncoder, ImageEncoderConfig, TabularEncoder, TabularEncoderConfig
from .fusion import VARIANTS, FusionConfig, FusionModel


@dataclass(frozen=True)
class GradReport:
    name: str
    max_rel_error: float
    n_checked: int


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-6) -> torch.Tensor:
    """Elementwise |a - n| / max(|a|, |n|, floor).

    The floor keeps exactly-zero gradients (the key-projection bias is
    softmax-invariant, for one) from dividing by zero.
    """
    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.full_like(analytic, floor))
    return (analytic - numeric).abs() / denom


def check_module(name: str, module: nn.Module, loss_fn: Callable[[], torch.Tensor], step: float = 1e-5) -> list[GradReport]:
    """One report per parameter tensor; ``loss_fn`` closes over the inputs."""
    module.double().eval()
    module.zero_grad()
    loss_fn().backward()
    reports = []
    with torch.no_grad():
        for pname, p in module.named_parameters():
            analytic = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
            numeric = torch.zeros_like(p)
            flat, nflat = p.view(-1), numeric.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                nflat[i] = (up - down) / (2 * step)
            err = relative_error(analytic, numeric)
            reports.append(GradReport(f"{name}:{pname}", float(err.max()), p.numel()))
    return reports


def _weighted_sum(out: torch.Tensor, gen: torch.Generator) -> Callable[[torch.Tensor], torch.Tensor]:
    # a random linear functional exercises every output coordinate
    w = torch.randn(out.shape, generator=gen, dtype=torch.float64)
    return lambda y: (y * w).sum()


def tiny_fusion(variant: str, dim: int = 8) -> FusionModel:
    return FusionModel(FusionConfig(variant=variant, layers=1, heads=2, dropout=0.1, shared_dim=dim,
                                    mlp_hidden=(8, 4), image_dim=dim, tabular_dim=dim))


def check_all(seed: int = 0, batch: int = 4) -> list[GradReport]:
    """All five fusion variants plus both encoders at toy sizes."""
    gen = torch.Generator().manual_seed(seed)
    reports: list[GradReport] = []

    for variant in VARIANTS:
        torch.manual_seed(seed)
        model = tiny_fusion(variant).double()
        zi = torch.randn(batch, 8, generator=gen, dtype=torch.float64)
        zt = torch.randn(batch, 8, generator=gen, dtype=torch.float64)
        f = _weighted_sum(model(zi, zt), gen)
        reports += check_module(variant, model, lambda m=model, f=f: f(m(zi, zt)))

    torch.manual_seed(seed)
    img = ImageEncoder(ImageEncoderConfig(image_size=(1, 8, 8), patch_size=4, hidden_dim=8, layers=2, heads=2,
                                          dropout_path=0.1, dropout_head=0.1)).double()
    x = torch.rand(2, 1, 8, 8, generator=gen, dtype=torch.float64)
    f_img = _weighted_sum(img(x), gen)
    reports += check_module("image-encoder", img, lambda: f_img(img(x)))

    torch.manual_seed(seed)
    tab = TabularEncoder(TabularEncoderConfig(n_features=4, token_dim=4, output_dim=8, layers=2, heads=2)).double()
    t = torch.randn(3, 4, generator=gen, dtype=torch.float64)
    f_tab = _weighted_sum(tab(t), gen)
    reports += check_module("tabular-encoder", tab, lambda: f_tab(tab(t)))
    return reports
