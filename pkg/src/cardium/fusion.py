"""Multimodal interaction module and the four ablation fusion strategies.

All variants treat the batch as the attention sequence: every patient's
embedding is one token, and no positional encoding is added over patients,
so each variant is equivariant to permuting the batch rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .encoders import project_to_shared
from .layers import DecoderLayer, EncoderBlock, MultiHeadAttention

VARIANTS = ("dual-decoder", "mlp", "encoder", "decoder", "encoder-cross")


@dataclass(frozen=True)
class FusionConfig:
    variant: str = "dual-decoder"
    layers: int = 2
    heads: int = 2
    dropout: float = 0.1
    shared_dim: int = 64
    mlp_hidden: tuple[int, int] = (128, 32)
    classes: int = 1
    image_dim: int = 64
    tabular_dim: int = 64
    mlp_ratio: float = 2.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown fusion variant {self.variant!r}; choose from {VARIANTS}")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.shared_dim % self.heads:
            raise ValueError(f"shared_dim {self.shared_dim} not divisible by heads {self.heads}")
        if self.classes < 1:
            raise ValueError("classes must be >= 1")

    @classmethod
    def published(cls, **kw) -> "FusionConfig":
        """Eight decoder layers, two heads, dropout 0.4."""
        return cls(**{"layers": 8, "heads": 2, "dropout": 0.4, **kw})


def mlp_head(in_dim: int, hidden: tuple[int, int], classes: int, dropout: float) -> nn.Sequential:
    h1, h2 = hidden
    return nn.Sequential(
        nn.Linear(in_dim, h1), nn.GELU(), nn.Dropout(dropout),
        nn.Linear(h1, h2), nn.GELU(), nn.Dropout(dropout),
        nn.Linear(h2, classes),
    )


def canonical_order(z_img: torch.Tensor, z_tab: torch.Tensor) -> torch.Tensor:
    """Lexicographic row order of the concatenated pair; identical rows tie harmlessly."""
    rows = torch.cat([z_img, z_tab], dim=1).detach().cpu().numpy()
    return torch.from_numpy(np.lexsort(rows.T[::-1]).copy())


def _check(z_img: torch.Tensor, z_tab: torch.Tensor, dim: int) -> None:
    if z_img.ndim != 2 or z_tab.ndim != 2 or z_img.shape != z_tab.shape or z_img.shape[1] != dim:
        raise ValueError(f"expected matching (B, {dim}) embeddings, got {tuple(z_img.shape)} and {tuple(z_tab.shape)}")


class DualDecoderFusion(nn.Module):
    """Two parallel decoder stacks. In every layer the image stack's
    cross-attention reads keys/values from the tabular encoder embedding
    ``Z_T`` (never from the tabular stack's running state), and vice versa."""

    def __init__(self, cfg: FusionConfig):
        super().__init__()
        d = cfg.shared_dim
        self.image_stack = nn.ModuleList(DecoderLayer(d, cfg.heads, cfg.mlp_ratio, cfg.dropout) for _ in range(cfg.layers))
        self.tabular_stack = nn.ModuleList(DecoderLayer(d, cfg.heads, cfg.mlp_ratio, cfg.dropout) for _ in range(cfg.layers))
        self.mlp = mlp_head(2 * d, cfg.mlp_hidden, cfg.classes, cfg.dropout)

    def refine(self, z_img, z_tab):
        x_img, x_tab = z_img.unsqueeze(0), z_tab.unsqueeze(0)
        mem_img, mem_tab = x_img, x_tab
        for img_layer, tab_layer in zip(self.image_stack, self.tabular_stack):
            x_img, x_tab = img_layer(x_img, mem_tab), tab_layer(x_tab, mem_img)
        return x_img.squeeze(0), x_tab.squeeze(0)

    def features(self, z_img, z_tab):
        return torch.cat(self.refine(z_img, z_tab), dim=-1)

    def forward(self, z_img, z_tab):
        return self.mlp(self.features(z_img, z_tab))


class MLPFusion(nn.Module):
    def __init__(self, cfg: FusionConfig):
        super().__init__()
        self.mlp = mlp_head(2 * cfg.shared_dim, cfg.mlp_hidden, cfg.classes, cfg.dropout)

    def features(self, z_img, z_tab):
        return torch.cat([z_img, z_tab], dim=-1)

    def forward(self, z_img, z_tab):
        return self.mlp(self.features(z_img, z_tab))


class EncoderFusion(nn.Module):
    """Concatenate, then a transformer encoder over the batch."""

    def __init__(self, cfg: FusionConfig):
        super().__init__()
        d = 2 * cfg.shared_dim
        self.blocks = nn.ModuleList(EncoderBlock(d, cfg.heads, cfg.mlp_ratio, cfg.dropout) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(d)
        self.mlp = mlp_head(d, cfg.mlp_hidden, cfg.classes, cfg.dropout)

    def features(self, z_img, z_tab):
        x = torch.cat([z_img, z_tab], dim=-1).unsqueeze(0)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x).squeeze(0)

    def forward(self, z_img, z_tab):
        return self.mlp(self.features(z_img, z_tab))


class DecoderFusion(nn.Module):
    """Image tokens through one decoder stack cross-attending to ``Z_T``."""

    def __init__(self, cfg: FusionConfig):
        super().__init__()
        d = cfg.shared_dim
        self.stack = nn.ModuleList(DecoderLayer(d, cfg.heads, cfg.mlp_ratio, cfg.dropout) for _ in range(cfg.layers))
        self.mlp = mlp_head(d, cfg.mlp_hidden, cfg.classes, cfg.dropout)

    def features(self, z_img, z_tab):
        x, mem = z_img.unsqueeze(0), z_tab.unsqueeze(0)
        for layer in self.stack:
            x = layer(x, mem)
        return x.squeeze(0)

    def forward(self, z_img, z_tab):
        return self.mlp(self.features(z_img, z_tab))


class EncoderCrossFusion(nn.Module):
    """Separate encoders per modality, then one cross-attention layer
    (queries from images, keys/values from the tabular encoding)."""

    def __init__(self, cfg: FusionConfig):
        super().__init__()
        d = cfg.shared_dim
        self.image_blocks = nn.ModuleList(EncoderBlock(d, cfg.heads, cfg.mlp_ratio, cfg.dropout) for _ in range(cfg.layers))
        self.tabular_blocks = nn.ModuleList(EncoderBlock(d, cfg.heads, cfg.mlp_ratio, cfg.dropout) for _ in range(cfg.layers))
        self.norm_q = nn.LayerNorm(d)
        self.norm_kv = nn.LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, cfg.heads, cfg.dropout)
        self.mlp = mlp_head(d, cfg.mlp_hidden, cfg.classes, cfg.dropout)

    def features(self, z_img, z_tab):
        x_img, x_tab = z_img.unsqueeze(0), z_tab.unsqueeze(0)
        for blk in self.image_blocks:
            x_img = blk(x_img)
        for blk in self.tabular_blocks:
            x_tab = blk(x_tab)
        kv = self.norm_kv(x_tab)
        x = x_img + self.cross_attn(self.norm_q(x_img), kv, kv)
        return x.squeeze(0)

    def forward(self, z_img, z_tab):
        return self.mlp(self.features(z_img, z_tab))


_CORES = {
    "dual-decoder": DualDecoderFusion,
    "mlp": MLPFusion,
    "encoder": EncoderFusion,
    "decoder": DecoderFusion,
    "encoder-cross": EncoderCrossFusion,
}


class FusionModel(nn.Module):
    """Shared-space projections followed by one fusion strategy.

    ``forward`` takes raw encoder embeddings (B, D_I) and (B, D_T).
    """

    def __init__(self, cfg: FusionConfig):
        super().__init__()
        self.cfg = cfg
        self.proj_image = project_to_shared(cfg.image_dim, cfg.shared_dim)
        self.proj_tabular = project_to_shared(cfg.tabular_dim, cfg.shared_dim)
        self.core = _CORES[cfg.variant](cfg)

    def project(self, z_img, z_tab):
        return self.proj_image(z_img), self.proj_tabular(z_tab)

    def _canonical(self, fn, z_img, z_tab):
        # Run rows in a content-defined order and scatter back. Reductions over
        # the batch then happen in the same order whatever order the caller
        # used, which makes row-permutation equivariance bit-exact.
        if z_img.ndim != 2 or z_tab.ndim != 2 or z_img.shape[0] != z_tab.shape[0]:
            raise ValueError(f"expected (B, D) embeddings with matching B, got {tuple(z_img.shape)} and {tuple(z_tab.shape)}")
        order = canonical_order(z_img, z_tab)
        out = fn(*self.project(z_img[order], z_tab[order]))
        inverse = torch.empty_like(order)
        inverse[order] = torch.arange(len(order))
        return out[inverse]

    def forward(self, z_img: torch.Tensor, z_tab: torch.Tensor) -> torch.Tensor:
        def run(zi, zt):
            _check(zi, zt, self.cfg.shared_dim)
            return self.core(zi, zt)
        return self._canonical(run, z_img, z_tab)

    def fused(self, z_img: torch.Tensor, z_tab: torch.Tensor) -> torch.Tensor:
        """Width-D fused representation (for the dual stacks, the mean of both refined streams)."""
        def run(zi, zt):
            if isinstance(self.core, DualDecoderFusion):
                a, b = self.core.refine(zi, zt)
                return 0.5 * (a + b)
            return self.core.features(zi, zt)
        return self._canonical(run, z_img, z_tab)

    def probabilities(self, logits: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(logits) if self.cfg.classes == 1 else logits.softmax(dim=-1)



@dataclass(frozen=True)
class FusionBatch:
    """Row i of ``z_img`` and ``z_tab`` belong to the same sample; B is the attention sequence length."""

    z_img: torch.Tensor
    z_tab: torch.Tensor

    def __post_init__(self):
        if self.z_img.shape[0] != self.z_tab.shape[0]:
            raise ValueError("FusionBatch rows must align")


def build_core(cfg: FusionConfig) -> nn.Module:
    """The bare strategy (no projections) mapping shared-space (B, D) pairs to logits."""
    return _CORES[cfg.variant](cfg)
