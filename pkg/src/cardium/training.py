"""Staged training with class-imbalance handling.

Stage order: image encoder + head, tabular encoder + head (with hard positive
mining), then the fusion module on top of both frozen encoders.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .metrics import aggregate_patient, compute_metrics

log = logging.getLogger(__name__)

STAGES = ("image", "tabular", "fusion")
SAMPLERS = ("none", "weighted-random")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "fusion"
    epochs: int = 30
    learning_rate: float = 1e-4
    weight_decay: float = 1e-2
    batch_size: int = 32
    pos_loss_factor: float = 1.2
    sampler: str = "weighted-random"
    hard_mining_period: int = 20
    mining_boost: float = 2.0
    mining_cap: float = 32.0
    augment: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.pos_loss_factor <= 0:
            raise ValueError("pos_loss_factor must be > 0")
        if self.hard_mining_period < 1:
            raise ValueError("hard_mining_period must be >= 1")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def published_fusion(cls, **kw) -> "TrainConfig":
        """Published fusion-stage schedule (presumes pretrained encoders)."""
        return cls(**{"stage": "fusion", "epochs": 100, "learning_rate": 5e-7, **kw})

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# sampling and loss


@dataclass
class SamplerState:
    weights: np.ndarray
    base: np.ndarray
    labels: np.ndarray
    class_counts: dict[int, int] = field(default_factory=dict)

    def draw(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        """Indices drawn with replacement, probability proportional to weight."""
        n = len(self.weights) if n is None else n
        p = self.weights / self.weights.sum()
        return rng.choice(len(p), size=n, replace=True, p=p)


def build_sampler(labels, mode: str = "weighted-random") -> SamplerState:
    y = np.asarray(labels).astype(np.int64)
    counts = {0: int(np.sum(y == 0)), 1: int(np.sum(y == 1))}
    if counts[0] == 0 or counts[1] == 0:
        raise TrainingError("sampler needs both classes in the training set")
    if mode == "weighted-random":
        w = np.where(y == 1, 1.0 / counts[1], 1.0 / counts[0])
    elif mode == "none":
        w = np.ones(len(y))
    else:
        raise ValueError(f"unknown sampler mode {mode!r}")
    return SamplerState(weights=w.astype(np.float64), base=w.astype(np.float64).copy(), labels=y, class_counts=counts)


def mine_hard_positives(state: SamplerState, probs, boost: float = 2.0, cap: float = 32.0,
                        threshold: float = 0.5) -> SamplerState:
    """Multiply the weight of every positive predicted below ``threshold`` by
    ``boost``, never beyond ``cap`` times its base weight."""
    p = np.asarray(probs, dtype=np.float64)
    fn = (state.labels == 1) & (p < threshold)
    w = state.weights.copy()
    w[fn] = np.minimum(w[fn] * boost, state.base[fn] * cap)
    return replace(state, weights=w)


def weighted_bce(logits: torch.Tensor, labels: torch.Tensor, pos_factor: float = 1.2) -> torch.Tensor:
    """Mean binary cross-entropy with positive-label terms scaled by ``pos_factor``."""
    logits = logits.reshape(-1)
    labels = labels.reshape(-1).to(logits.dtype)
    per = F.binary_cross_entropy_with_logits(logits, labels, reduction="none")
    w = torch.where(labels == 1, torch.full_like(per, pos_factor), torch.ones_like(per))
    return (w * per).mean()


def classification_loss(logits: torch.Tensor, labels: torch.Tensor, pos_factor: float) -> torch.Tensor:
    if logits.ndim == 2 and logits.shape[1] > 1:
        return F.cross_entropy(logits, labels.long())
    return weighted_bce(logits, labels, pos_factor)


# --------------------------------------------------------------------------
# helpers


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def augment_images(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Horizontal flip, rotation within +-10 degrees and brightness jitter."""
    b = x.shape[0]
    flip = torch.rand(b, generator=gen) < 0.5
    x = torch.where(flip[:, None, None, None], x.flip(-1), x)
    angle = (torch.rand(b, generator=gen) * 2 - 1) * math.radians(10)
    cos, sin = torch.cos(angle), torch.sin(angle)
    theta = torch.zeros(b, 2, 3, dtype=x.dtype)
    theta[:, 0, 0], theta[:, 0, 1], theta[:, 1, 0], theta[:, 1, 1] = cos, -sin, sin, cos
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    x = F.grid_sample(x, grid, padding_mode="border", align_corners=False)
    jitter = 1.0 + (torch.rand(b, 1, 1, 1, generator=gen) * 2 - 1) * 0.1
    return (x * jitter).clamp(0.0, 1.0)


@torch.no_grad()
def predict_logits(fn: Callable[[torch.Tensor], torch.Tensor], inputs: Sequence[torch.Tensor], batch: int = 256) -> torch.Tensor:
    n = inputs[0].shape[0]
    out = [fn(*(t[i:i + batch] for t in inputs)) for i in range(0, n, batch)]
    return torch.cat(out) if out else torch.empty(0, 1)


def patient_f1(probs: np.ndarray, groups: np.ndarray, labels: np.ndarray) -> float | None:
    """F1 after averaging sample probabilities per group (patient)."""
    pp, yy = [], []
    for g in np.unique(groups):
        m = groups == g
        pp.append(aggregate_patient(probs[m]))
        yy.append(int(labels[m][0]))
    return compute_metrics(pp, yy)["f1"]


@dataclass
class History:
    epoch: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_f1: list[float | None] = field(default_factory=list)

    def add(self, epoch: int, loss: float, f1: float | None) -> None:
        self.epoch.append(epoch)
        self.train_loss.append(loss)
        self.val_f1.append(f1)

    @classmethod
    def from_csv(cls, path) -> "History":
        h = cls()
        with open(path, encoding="utf-8") as fh:
            next(fh)
            for line in fh:
                e, l, f = line.rstrip("\n").split(",")
                h.add(int(e), float(l), float(f) if f else None)
        return h

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch,train_loss,val_f1\n")
            for e, l, f in zip(self.epoch, self.train_loss, self.val_f1):
                fh.write(f"{e},{l!r},{'' if f is None else repr(f)}\n")


@dataclass
class StageData:
    """Inputs and labels for one stage. ``groups`` maps samples to patients."""

    inputs: tuple[torch.Tensor, ...]
    labels: np.ndarray
    groups: np.ndarray
    val_inputs: tuple[torch.Tensor, ...] = ()
    val_labels: np.ndarray | None = None
    val_groups: np.ndarray | None = None


def fit(
    model: nn.Module,
    forward: Callable[..., torch.Tensor],
    data: StageData,
    cfg: TrainConfig,
    mining: bool = False,
    trainable: Sequence[nn.Parameter] | None = None,
) -> History:
    """Generic loop: weighted sampling, AdamW, weighted BCE, optional mining.

    ``forward(*batch_inputs, train=True)`` returns logits. All randomness is
    drawn from generators seeded by ``cfg.seed``.
    """
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    sampler = build_sampler(data.labels, cfg.sampler)
    params = list(trainable) if trainable is not None else [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    y_all = torch.as_tensor(data.labels, dtype=torch.float32)
    history = History()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            order = sampler.draw(rng)
            losses = []
            for i in range(0, len(order), cfg.batch_size):
                idx = torch.as_tensor(order[i:i + cfg.batch_size])
                batch = [t[idx] for t in data.inputs]
                if cfg.augment and cfg.stage == "image":
                    batch[0] = augment_images(batch[0], gen)
                loss = classification_loss(forward(*batch), y_all[idx], cfg.pos_loss_factor)
                if not torch.isfinite(loss):
                    raise TrainingError(f"{cfg.stage} stage: non-finite loss at epoch {epoch}, batch {i // cfg.batch_size}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(loss.item())
            model.eval()
            if mining and epoch % cfg.hard_mining_period == 0 and epoch < cfg.epochs:
                probs = torch.sigmoid(predict_logits(forward, data.inputs)).reshape(-1).numpy()
                sampler = mine_hard_positives(sampler, probs, cfg.mining_boost, cfg.mining_cap)
            f1 = None
            if data.val_inputs:
                probs = torch.sigmoid(predict_logits(forward, data.val_inputs)).reshape(-1).numpy()
                f1 = patient_f1(probs, data.val_groups, data.val_labels)
            history.add(epoch, float(np.mean(losses)), f1)
    model.eval()
    return history


def train_unimodal(classifier: nn.Module, data: StageData, cfg: TrainConfig) -> History:
    """Stage 1: an encoder with its temporary head. Hard positive mining runs
    only for the tabular stage."""
    if cfg.stage not in ("image", "tabular"):
        raise ValueError("train_unimodal handles the image and tabular stages")
    return fit(classifier, classifier, data, cfg, mining=cfg.stage == "tabular")


def freeze(module: nn.Module) -> None:
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()


def train_fusion(fusion: nn.Module, image_encoder: nn.Module, tabular_encoder: nn.Module,
                 data: StageData, cfg: TrainConfig, precomputed: bool = False) -> History:
    """Stage 2: fusion module over frozen encoders.

    ``data.inputs`` are raw (images, tabular vectors), or the encoders'
    embeddings when ``precomputed``. Either way both encoders are frozen and
    checksummed; any parameter change aborts the stage.
    """
    if cfg.stage != "fusion":
        raise ValueError("train_fusion needs stage='fusion'")
    encoders = [image_encoder, tabular_encoder]
    for m in encoders:
        freeze(m)
    before = [parameter_checksum(m) for m in encoders]

    def forward(a, b):
        if not precomputed:
            with torch.no_grad():
                a, b = image_encoder(a), tabular_encoder(b)
        return fusion(a, b)

    history = fit(fusion, forward, data, cfg, trainable=list(fusion.parameters()))
    after = [parameter_checksum(m) for m in encoders]
    if before != after:
        raise TrainingError("encoder parameters changed during the fusion stage")
    return history
