"""Modality encoders: a ViT-style image encoder and a feature-token
transformer for the encoded clinical vector."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .layers import EncoderBlock


@dataclass(frozen=True)
class ImageEncoderConfig:
    image_size: tuple[int, int, int] = (1, 64, 64)
    patch_size: int = 8
    hidden_dim: int = 64
    layers: int = 2
    heads: int = 4
    mlp_ratio: float = 2.0
    dropout_path: float = 0.1
    dropout_head: float = 0.2

    def __post_init__(self):
        c, h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"image {h}x{w} not divisible by patch_size {self.patch_size}")
        if self.hidden_dim % self.heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")

    @property
    def n_patches(self) -> int:
        _, h, w = self.image_size
        return (h // self.patch_size) * (w // self.patch_size)

    @classmethod
    def published(cls, image_size=(1, 224, 224)) -> "ImageEncoderConfig":
        """Published depth/heads (ViT-Small width) and dropout rates."""
        return cls(image_size=tuple(image_size), patch_size=16, hidden_dim=384, layers=12, heads=6,
                   mlp_ratio=4.0, dropout_path=0.3, dropout_head=0.2)


@dataclass(frozen=True)
class TabularEncoderConfig:
    n_features: int = 26
    token_dim: int = 8
    output_dim: int = 64
    layers: int = 2
    heads: int = 8
    mlp_ratio: float = 2.0
    dropout: float = 0.3
    dropout_head: float = 0.1

    def __post_init__(self):
        if self.token_dim % self.heads:
            raise ValueError(f"token_dim {self.token_dim} not divisible by heads {self.heads}")


class ImageEncoder(nn.Module):
    def __init__(self, cfg: ImageEncoderConfig):
        super().__init__()
        self.cfg = cfg
        c, _, _ = cfg.image_size
        p, d = cfg.patch_size, cfg.hidden_dim
        self.patch_embed = nn.Linear(c * p * p, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.randn(1, cfg.n_patches + 1, d) * 0.02)
        # linearly increasing stochastic depth over the blocks
        rates = np.linspace(0.0, cfg.dropout_path, cfg.layers) if cfg.layers > 1 else [cfg.dropout_path]
        self.blocks = nn.ModuleList(
            EncoderBlock(d, cfg.heads, cfg.mlp_ratio, dropout=cfg.dropout_path, drop_path=float(r)) for r in rates
        )
        self.norm = nn.LayerNorm(d)

    @property
    def out_dim(self) -> int:
        return self.cfg.hidden_dim

    def tokens(self, images: torch.Tensor) -> torch.Tensor:
        if tuple(images.shape[1:]) != tuple(self.cfg.image_size):
            raise ValueError(f"expected images of shape (B, {self.cfg.image_size}), got {tuple(images.shape)}")
        b = images.shape[0]
        p = self.cfg.patch_size
        patches = images.unfold(2, p, p).unfold(3, p, p)  # B, C, h, w, p, p
        patches = patches.permute(0, 2, 3, 1, 4, 5).reshape(b, -1, images.shape[1] * p * p)
        x = self.patch_embed(patches)
        x = torch.cat([self.cls_token.expand(b, -1, -1), x], dim=1)
        return x + self.pos_embed

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) -> z_I of shape (B, hidden_dim), the class-token output."""
        x = self.tokens(images)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x[:, 0])


class TabularEncoder(nn.Module):
    def __init__(self, cfg: TabularEncoderConfig):
        super().__init__()
        self.cfg = cfg
        n, t = cfg.n_features, cfg.token_dim
        # per-feature affine lift; the bias doubles as the feature identity embedding
        self.lift_weight = nn.Parameter(torch.randn(n, t) * 0.5)
        self.lift_bias = nn.Parameter(torch.randn(n, t) * 0.02)
        self.blocks = nn.ModuleList(EncoderBlock(t, cfg.heads, cfg.mlp_ratio, dropout=cfg.dropout) for _ in range(cfg.layers))
        self.proj = nn.Linear(n * t, cfg.output_dim)
        self.norm = nn.LayerNorm(cfg.output_dim)

    @property
    def out_dim(self) -> int:
        return self.cfg.output_dim

    def tokens(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 2 or x.shape[1] != self.cfg.n_features:
            raise ValueError(f"expected (B, {self.cfg.n_features}) tabular input, got {tuple(x.shape)}")
        tok = x.unsqueeze(-1) * self.lift_weight + self.lift_bias
        for blk in self.blocks:
            tok = blk(tok)
        return tok

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, n) -> z_T of shape (B, output_dim)."""
        tok = self.tokens(x)
        return self.norm(self.proj(tok.flatten(1)))


class ClassifierHead(nn.Module):
    """Dropout then a linear map to ``classes`` logits (one logit for binary)."""

    def __init__(self, in_dim: int, classes: int = 1, dropout: float = 0.0):
        super().__init__()
        if classes < 1:
            raise ValueError("classes must be >= 1")
        self.classes = classes
        self.drop = nn.Dropout(dropout)
        self.linear = nn.Linear(in_dim, classes)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.linear(self.drop(z))

    def probabilities(self, logits: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(logits) if self.classes == 1 else logits.softmax(dim=-1)


class UnimodalClassifier(nn.Module):
    """Encoder plus a detachable head, trained on one modality."""

    def __init__(self, encoder: nn.Module, head: ClassifierHead):
        super().__init__()
        self.encoder = encoder
        self.head = head

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder(x))


def attach_head(encoder: nn.Module, classes: int = 1, dropout: float | None = None) -> UnimodalClassifier:
    if dropout is None:
        dropout = getattr(encoder.cfg, "dropout_head", 0.0)
    return UnimodalClassifier(encoder, ClassifierHead(encoder.out_dim, classes, dropout))


def project_to_shared(in_dim: int, shared_dim: int) -> nn.Linear:
    """Learned affine map from an encoder's width to the shared fusion width."""
    if shared_dim <= 0:
        raise ValueError("shared_dim must be positive")
    return nn.Linear(in_dim, shared_dim)


# --------------------------------------------------------------------------
# checkpoints


def _config_json(cfg) -> str:
    d = asdict(cfg)
    d["__type__"] = type(cfg).__name__
    return json.dumps(d, sort_keys=True)


def save_checkpoint(path, model: nn.Module, config, schema_hash: str = "", extra: dict | None = None) -> None:
    """Single ``.npz`` file: named float arrays plus config JSON and schema hash."""
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {"config": json.loads(_config_json(config)), "schema_hash": schema_hash, "extra": extra or {}}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        arrays = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    return meta, arrays


def load_state(model: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = model.state_dict()
    missing = set(state) - set(arrays)
    unexpected = set(arrays) - set(state)
    if missing or unexpected:
        raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
    for k, v in state.items():
        if tuple(v.shape) != tuple(arrays[k].shape):
            raise ValueError(f"shape mismatch for {k}: model {tuple(v.shape)}, checkpoint {arrays[k].shape}")
    model.load_state_dict({k: torch.as_tensor(arrays[k], dtype=state[k].dtype) for k in state})


def config_from_meta(meta: dict):
    d = dict(meta["config"])
    kind = d.pop("__type__")
    from .fusion import FusionConfig

    types = {c.__name__: c for c in (ImageEncoderConfig, TabularEncoderConfig, FusionConfig)}
    if kind not in types:
        raise ValueError(f"unknown config type {kind!r}")
    for key, v in d.items():
        if isinstance(v, list):
            d[key] = tuple(v)
    return types[kind](**d)
