"""End-to-end wiring: per-fold preprocessing, staged training, inference."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .encoders import (
    ImageEncoder,
    ImageEncoderConfig,
    TabularEncoder,
    TabularEncoderConfig,
    UnimodalClassifier,
    attach_head,
    config_from_meta,
    load_state,
    read_checkpoint,
    save_checkpoint,
)
from .evaluation import (
    FoldPlan,
    evaluate_cv,
    half_data_subsample,
    image_order,
    make_folds,
    stratified_holdout,
)
from .fusion import FusionConfig, FusionModel
from .preprocessing import CategoryAliasMap, ConsolidationPolicy, TabularPreprocessor
from .records import PatientRecord
from .schema import TabularSchema, default_schema
from .synthetic import SyntheticConfig, default_alias_map
from .training import History, StageData, TrainConfig, train_fusion, train_unimodal

log = logging.getLogger(__name__)

SEED_ENV = "CARDIUM_SEED"


class MissingCheckpointError(RuntimeError):
    pass


class ConfigValidationError(ValueError):
    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = errors
        super().__init__("; ".join(f"{f}: {m}" for f, m in errors))


def _default_train() -> dict[str, TrainConfig]:
    return {
        "image": TrainConfig(stage="image", epochs=16, learning_rate=1e-3, batch_size=32, augment=True, seed=0),
        "tabular": TrainConfig(stage="tabular", epochs=30, learning_rate=3e-4, batch_size=32, seed=0),
        "fusion": TrainConfig(stage="fusion", epochs=30, learning_rate=1e-4, weight_decay=0.1, batch_size=32, seed=0),
    }


@dataclass
class RunConfig:
    data_dir: str = "data"
    run_dir: str = "run"
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    schema_path: str | None = None
    alias_map_path: str | None = None
    woe_eps: float = 0.5
    woe_folds: int = 5
    numerical_rule: str = "mean"
    ordinal_zscore: bool = True
    image_encoder: ImageEncoderConfig = field(default_factory=ImageEncoderConfig)
    tabular_encoder: TabularEncoderConfig = field(default_factory=TabularEncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    train: dict[str, TrainConfig] = field(default_factory=_default_train)
    folds: int = 3
    fold_seed: int = 0
    val_fraction: float = 0.1
    eval_batch: int = 64
    threshold: float = 0.5
    logit_average: bool = False
    batch_shuffles: int = 5
    seed: int = 0

    # ---- validation & (de)serialization

    def schema(self) -> TabularSchema:
        return TabularSchema.from_json(self.schema_path) if self.schema_path else default_schema()

    def alias_map(self) -> CategoryAliasMap:
        if self.alias_map_path:
            return CategoryAliasMap.from_json(self.alias_map_path)
        return CategoryAliasMap(default_alias_map())

    def policy(self) -> ConsolidationPolicy:
        return ConsolidationPolicy(self.numerical_rule)

    def validate(self) -> "RunConfig":
        errors: list[tuple[str, str]] = []
        if self.fusion.image_dim != self.image_encoder.hidden_dim:
            errors.append(("fusion.image_dim", f"{self.fusion.image_dim} != image_encoder.hidden_dim {self.image_encoder.hidden_dim}"))
        if self.fusion.tabular_dim != self.tabular_encoder.output_dim:
            errors.append(("fusion.tabular_dim", f"{self.fusion.tabular_dim} != tabular_encoder.output_dim {self.tabular_encoder.output_dim}"))
        if tuple(self.image_encoder.image_size) != tuple(self.synthetic.image_size):
            errors.append(("image_encoder.image_size", "must equal synthetic.image_size"))
        try:
            n = self.schema().n
            if self.tabular_encoder.n_features != n:
                errors.append(("tabular_encoder.n_features", f"{self.tabular_encoder.n_features} != schema width {n}"))
        except (OSError, ValueError) as exc:
            errors.append(("schema_path", str(exc)))
        if self.numerical_rule not in ("mean", "median", "last-by-date"):
            errors.append(("numerical_rule", "must be mean, median or last-by-date"))
        if self.woe_eps < 0:
            errors.append(("woe_eps", "must be >= 0"))
        if self.woe_folds < 2:
            errors.append(("woe_folds", "must be >= 2"))
        if self.folds < 2:
            errors.append(("folds", "must be >= 2"))
        if not 0.0 <= self.val_fraction < 0.5:
            errors.append(("val_fraction", "must lie in [0, 0.5)"))
        if self.eval_batch < 1:
            errors.append(("eval_batch", "must be >= 1"))
        for stage in ("image", "tabular", "fusion"):
            if stage not in self.train:
                errors.append((f"train.{stage}", "missing stage config"))
            elif self.train[stage].stage != stage:
                errors.append((f"train.{stage}.stage", f"must be {stage!r}"))
        if errors:
            raise ConfigValidationError(errors)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["synthetic"] = self.synthetic.to_dict()
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        errors: list[tuple[str, str]] = []
        kw = dict(d)

        def build(key, factory):
            if key not in kw:
                return
            try:
                sub = {k: tuple(v) if isinstance(v, list) else v for k, v in kw[key].items()}
                kw[key] = factory(**sub)
            except (TypeError, ValueError) as exc:
                errors.append((key, str(exc)))
                kw.pop(key)

        build("synthetic", SyntheticConfig)
        build("image_encoder", ImageEncoderConfig)
        build("tabular_encoder", TabularEncoderConfig)
        build("fusion", FusionConfig)
        if "train" in kw:
            train = _default_train()
            for stage, sub in kw["train"].items():
                try:
                    train[stage] = replace(train.get(stage, TrainConfig(stage=stage)), **sub)
                except (TypeError, ValueError) as exc:
                    errors.append((f"train.{stage}", str(exc)))
            kw["train"] = train
        unknown = set(kw) - set(cls.__dataclass_fields__)
        for key in sorted(unknown):
            errors.append((key, "unknown config field"))
            kw.pop(key)
        cfg = cls(**kw)
        try:
            cfg.validate()
        except ConfigValidationError as exc:
            errors += exc.errors
        if errors:
            raise ConfigValidationError(errors)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    def with_seed(self, seed: int) -> "RunConfig":
        """Same config with every stage and split seed derived from ``seed``."""
        train = {k: replace(v, seed=seed + i) for i, (k, v) in enumerate(sorted(self.train.items()))}
        return replace(self, seed=seed, fold_seed=seed, train=train)


def resolve_seed(cfg: RunConfig, flag: int | None = None) -> RunConfig:
    """Precedence: explicit flag, then ``CARDIUM_SEED``, then the config file."""
    if flag is not None:
        return cfg.with_seed(flag)
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        return cfg.with_seed(int(env))
    return cfg


def quick_config(**overrides) -> RunConfig:
    """Smaller, faster settings for smoke runs and tests."""
    base = RunConfig(
        synthetic=SyntheticConfig(n_patients=150, positive_rate=0.2, images_per_patient_range=(1, 2),
                                  image_size=(1, 32, 32), seed=7),
        image_encoder=ImageEncoderConfig(image_size=(1, 32, 32), patch_size=8, hidden_dim=32, layers=1, heads=2),
        tabular_encoder=TabularEncoderConfig(token_dim=16, output_dim=32, layers=1, heads=4),
        fusion=FusionConfig(shared_dim=32, image_dim=32, tabular_dim=32, layers=1, heads=2, mlp_hidden=(32, 16)),
        train={
            "image": TrainConfig(stage="image", epochs=2, learning_rate=1e-3),
            "tabular": TrainConfig(stage="tabular", epochs=3, learning_rate=1e-3, hard_mining_period=2),
            "fusion": TrainConfig(stage="fusion", epochs=3, learning_rate=1e-3),
        },
    )
    return replace(base, **overrides)


# --------------------------------------------------------------------------
# per-fold training


def _stack_images(records: Sequence[PatientRecord], images) -> tuple[torch.Tensor, np.ndarray, np.ndarray, list]:
    order = image_order(records)
    label = {r.patient_id: r.label for r in records}
    x = torch.as_tensor(np.stack([images[p][i] for p, i in order])) if order else torch.empty(0)
    y = np.array([label[p] for p, _ in order], dtype=np.int64)
    g = np.array([p for p, _ in order])
    return x, y, g, order


@dataclass
class FoldModels:
    """Everything trained for one outer fold."""

    preprocessor: TabularPreprocessor
    image_classifier: UnimodalClassifier | None
    tabular_classifier: UnimodalClassifier | None
    fusion: FusionModel | None
    histories: dict[str, History]
    fit_ids: list[str]
    val_ids: list[str]

    def tabular_matrix(self, records: Sequence[PatientRecord]) -> torch.Tensor:
        rows = [r.consolidated_row for r in records]
        return torch.as_tensor(self.preprocessor.transform(rows), dtype=torch.float32)

    @torch.no_grad()
    def embeddings(self, records, images, order=None) -> tuple[list[tuple[str, str]], torch.Tensor, torch.Tensor]:
        """Image embeddings per image and tabular embeddings broadcast to images."""
        order = order if order is not None else image_order(records)
        by_id = {r.patient_id: r for r in records}
        pids = sorted(by_id)
        tab = self.tabular_matrix([by_id[p] for p in pids])
        self.image_classifier.eval(), self.tabular_classifier.eval()
        z_tab_p = self.tabular_classifier.encoder(tab) if pids else torch.empty(0)
        pos = {p: i for i, p in enumerate(pids)}
        x = torch.as_tensor(np.stack([images[p][i] for p, i in order]))
        z_img = torch.cat([self.image_classifier.encoder(x[i:i + 256]) for i in range(0, len(order), 256)])
        z_tab = z_tab_p[[pos[p] for p, _ in order]]
        return order, z_img, z_tab

    @torch.no_grad()
    def predict_images(self, records, images, modality: str, eval_batch: int, order=None) -> dict[tuple[str, str], float]:
        """Image-level probabilities; multimodal inference runs in consecutive
        ``eval_batch``-sized chunks of ``order`` (attention spans each chunk)."""
        needed = {"image": self.image_classifier, "tabular": self.tabular_classifier, "multimodal": self.fusion}
        if needed.get(modality, self.fusion) is None or self.image_classifier is None or self.tabular_classifier is None:
            raise MissingCheckpointError(f"{modality} evaluation needs trained models for every stage it touches")
        if self.fusion is not None:
            self.fusion.eval()
        order, z_img, z_tab = self.embeddings(records, images, order)
        if modality == "image":
            logits = self.image_classifier.head(z_img)
        elif modality == "tabular":
            logits = self.tabular_classifier.head(z_tab)
        else:
            logits = torch.cat([self.fusion(z_img[i:i + eval_batch], z_tab[i:i + eval_batch])
                                for i in range(0, len(order), eval_batch)])
        probs = torch.sigmoid(logits.reshape(-1)).double().numpy()
        return {key: float(p) for key, p in zip(order, probs)}

    @torch.no_grad()
    def tap(self, records, images, tap: str, eval_batch: int) -> tuple[list[str], np.ndarray]:
        """Per-patient embedding at ``tap`` (mean over the patient's images)."""
        order, z_img, z_tab = self.embeddings(records, images)
        if tap == "image-encoder":
            z = z_img
        elif tap == "tabular-encoder":
            z = z_tab
        elif tap == "fused":
            z = torch.cat([self.fusion.fused(z_img[i:i + eval_batch], z_tab[i:i + eval_batch])
                           for i in range(0, len(order), eval_batch)])
        else:
            raise ValueError(f"unknown tap {tap!r}; choose image-encoder, tabular-encoder or fused")
        z = z.double().numpy()
        pids = sorted({p for p, _ in order})
        groups = np.array([p for p, _ in order])
        return pids, np.stack([z[groups == p].mean(axis=0) for p in pids])

    def save(self, directory, schema_hash: str) -> None:
        """``preprocessor.json``, ``split.json`` and one ``<stage>/`` folder per
        trained stage holding ``checkpoint.npz`` and ``history.csv``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.preprocessor.save(d / "preprocessor.json")
        with open(d / "split.json", "w", encoding="utf-8") as fh:
            json.dump({"fit_ids": self.fit_ids, "val_ids": self.val_ids}, fh, indent=2)
        models = {"image": self.image_classifier, "tabular": self.tabular_classifier, "fusion": self.fusion}
        for stage, model in models.items():
            if model is None:
                continue
            (d / stage).mkdir(exist_ok=True)
            save_checkpoint(d / stage / "checkpoint.npz", model, model.cfg if stage == "fusion" else model.encoder.cfg,
                            schema_hash)
            if stage in self.histories:
                self.histories[stage].to_csv(d / stage / "history.csv")

    @classmethod
    def load(cls, directory, schema_hash: str) -> "FoldModels":
        """Whatever stages exist under ``directory``; absent ones come back as None."""
        d = Path(directory)
        if not (d / "preprocessor.json").exists():
            raise MissingCheckpointError(f"no trained fold at {d}")
        pre = TabularPreprocessor.load(d / "preprocessor.json")
        with open(d / "split.json", encoding="utf-8") as fh:
            split = json.load(fh)
        loaded: dict[str, torch.nn.Module | None] = {}
        histories = {}
        for stage in ("image", "tabular", "fusion"):
            ckpt = d / stage / "checkpoint.npz"
            if not ckpt.exists():
                loaded[stage] = None
                continue
            meta, arrays = read_checkpoint(ckpt)
            if meta["schema_hash"] != schema_hash:
                raise ValueError(f"{ckpt}: schema hash {meta['schema_hash']} does not match {schema_hash}")
            mcfg = config_from_meta(meta)
            if stage == "image":
                model = attach_head(ImageEncoder(mcfg))
            elif stage == "tabular":
                model = attach_head(TabularEncoder(mcfg))
            else:
                model = FusionModel(mcfg)
            load_state(model, arrays)
            model.eval()
            loaded[stage] = model
            if (d / stage / "history.csv").exists():
                histories[stage] = History.from_csv(d / stage / "history.csv")
        return cls(pre, loaded["image"], loaded["tabular"], loaded["fusion"], histories,
                   split["fit_ids"], split["val_ids"])


def _seeded_init(factory, seed: int):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return factory()


def fit_preprocessor(cfg: RunConfig, fit_records: Sequence[PatientRecord], schema: TabularSchema) -> TabularPreprocessor:
    return TabularPreprocessor.fit(
        [r.consolidated_row for r in fit_records], [r.label for r in fit_records], schema, cfg.alias_map(),
        eps=cfg.woe_eps, k=cfg.woe_folds, seed=cfg.seed, ordinal_zscore=cfg.ordinal_zscore,
    )


def train_fold(
    cfg: RunConfig,
    records: Sequence[PatientRecord],
    images,
    train_ids: Sequence[str],
    fusion_cfg: FusionConfig | None = None,
    stages: Sequence[str] = ("image", "tabular", "fusion"),
    base: FoldModels | None = None,
) -> FoldModels:
    """Train one fold's models on ``train_ids`` (validation carved off inside).

    ``base`` supplies already-trained encoders when ``stages`` skips them.
    """
    schema = cfg.schema()
    by_id = {r.patient_id: r for r in records}
    train = [by_id[p] for p in sorted(train_ids)]
    fit_ids, val_ids = stratified_holdout(train, cfg.val_fraction, cfg.seed)
    fit = [by_id[p] for p in fit_ids]
    val = [by_id[p] for p in val_ids]
    pre = base.preprocessor if base is not None else fit_preprocessor(cfg, fit, schema)

    t_fit = torch.as_tensor(pre.transform([r.consolidated_row for r in fit], mode="train"), dtype=torch.float32)
    t_val = torch.as_tensor(pre.transform([r.consolidated_row for r in val]), dtype=torch.float32)
    y_fit = np.array([r.label for r in fit], dtype=np.int64)
    y_val = np.array([r.label for r in val], dtype=np.int64)
    x_fit, yi_fit, gi_fit, order_fit = _stack_images(fit, images)
    x_val, yi_val, gi_val, order_val = _stack_images(val, images)

    histories: dict[str, History] = dict(base.histories) if base is not None else {}
    tc = cfg.train
    img_clf = base.image_classifier if base is not None else None
    tab_clf = base.tabular_classifier if base is not None else None
    fusion = base.fusion if base is not None else None
    if "image" in stages:
        img_clf = _seeded_init(lambda: attach_head(ImageEncoder(cfg.image_encoder)), tc["image"].seed)
        histories["image"] = train_unimodal(img_clf, StageData((x_fit,), yi_fit, gi_fit, (x_val,), yi_val, gi_val), tc["image"])
    if "tabular" in stages:
        tab_clf = _seeded_init(lambda: attach_head(TabularEncoder(cfg.tabular_encoder)), tc["tabular"].seed)
        histories["tabular"] = train_unimodal(
            tab_clf, StageData((t_fit,), y_fit, np.array(fit_ids), (t_val,), y_val, np.array(val_ids)), tc["tabular"])

    if "fusion" in stages:
        if img_clf is None or tab_clf is None:
            raise MissingCheckpointError("the fusion stage needs both trained encoders (run the image and tabular stages first)")
        fcfg = fusion_cfg or cfg.fusion
        fusion = _seeded_init(lambda: FusionModel(fcfg), tc["fusion"].seed)
        # frozen encoders are evaluated once; fusion trains on cached embeddings
        pos_fit = {p: i for i, p in enumerate(fit_ids)}
        pos_val = {p: i for i, p in enumerate(val_ids)}
        with torch.no_grad():
            img_clf.eval(), tab_clf.eval()
            zi_fit, zt_fit = img_clf.encoder(x_fit), tab_clf.encoder(t_fit)
            zi_val = img_clf.encoder(x_val) if len(order_val) else None
            zt_val = tab_clf.encoder(t_val) if len(order_val) else None
        data = StageData(
            (zi_fit, zt_fit[[pos_fit[p] for p, _ in order_fit]]), yi_fit, gi_fit,
            (zi_val, zt_val[[pos_val[p] for p, _ in order_val]]) if len(order_val) else (), yi_val, gi_val,
        )
        histories["fusion"] = train_fusion(fusion, img_clf.encoder, tab_clf.encoder, data, tc["fusion"], precomputed=True)
    return FoldModels(pre, img_clf, tab_clf, fusion, histories, fit_ids, val_ids)


@dataclass
class CVRun:
    plan: FoldPlan
    folds: list[FoldModels]


def train_cv(cfg: RunConfig, records, images, half_data: bool = False, fusion_cfg: FusionConfig | None = None,
             plan: FoldPlan | None = None, stages=("image", "tabular", "fusion"), base: CVRun | None = None) -> CVRun:
    plan = plan or make_folds(records, cfg.folds, cfg.fold_seed)
    by_id = {r.patient_id: r for r in records}
    folds = []
    for k in range(plan.k):
        train_ids = plan.train_ids(k)
        if half_data:
            train_ids = [r.patient_id for r in half_data_subsample([by_id[p] for p in train_ids], cfg.seed + k)]
        log.info("fold %d: training on %d patients", k, len(train_ids))
        folds.append(train_fold(cfg, records, images, train_ids, fusion_cfg, stages,
                                base.folds[k] if base is not None else None))
    return CVRun(plan, folds)


def evaluate_run(cfg: RunConfig, run: CVRun, records, images, modality: str = "multimodal", label: str | None = None) -> dict:
    return evaluate_cv(run.folds, records, images, run.plan, cfg.eval_batch, modality, cfg.threshold,
                       cfg.logit_average, cfg.batch_shuffles, label=label)
