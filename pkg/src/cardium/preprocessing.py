"""Clinical-event consolidation, category refinement, z-scoring and
cross-fitted Weight-of-Evidence encoding.

Everything that looks at labels or statistics is fitted on training rows
only; the fitted objects are plain data and can be serialized to JSON.
"""

from __future__ import annotations

import json
import math
import statistics
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .records import ClinicalEvent
from .schema import BINARY, CATEGORICAL, NUMERICAL, ORDINAL, SchemaError, TabularSchema

OTHERS = "Others"
NUMERICAL_RULES = ("mean", "median", "last-by-date")


class PreprocessingError(ValueError):
    pass


# --------------------------------------------------------------------------
# consolidation


@dataclass(frozen=True)
class ConsolidationPolicy:
    """Binary: any positive. Ordinal: highest level. Categorical: union.
    Numerical: ``numerical_rule`` over the event values."""

    numerical_rule: str = "mean"

    def __post_init__(self):
        if self.numerical_rule not in NUMERICAL_RULES:
            raise PreprocessingError(f"numerical_rule must be one of {NUMERICAL_RULES}")


def _as_categories(name: str, value) -> tuple[str, ...]:
    if isinstance(value, str):
        return (value,)
    if isinstance(value, (list, tuple, set, frozenset)):
        if not all(isinstance(v, str) for v in value):
            raise PreprocessingError(f"{name}: categorical entries must be strings")
        return tuple(value)
    raise PreprocessingError(f"{name}: conflicting kind, expected categorical value, got {value!r}")


def _as_binary(name: str, value) -> int:
    if isinstance(value, (bool, np.bool_)):
        return int(value)
    if isinstance(value, (int, np.integer, float)) and value in (0, 1):
        return int(value)
    if isinstance(value, str) and value.strip() in ("0", "1"):
        return int(value.strip())
    raise PreprocessingError(f"{name}: conflicting kind, expected binary 0/1, got {value!r}")


def _as_float(name: str, value) -> float:
    if isinstance(value, (bool, np.bool_)) or isinstance(value, (tuple, list, set, frozenset)):
        raise PreprocessingError(f"{name}: conflicting kind, expected number, got {value!r}")
    try:
        return float(value)
    except (TypeError, ValueError):
        raise PreprocessingError(f"{name}: non-numeric value {value!r}") from None


def consolidate(
    events: Sequence[ClinicalEvent],
    schema: TabularSchema,
    policy: ConsolidationPolicy = ConsolidationPolicy(),
) -> dict[str, Any]:
    """Collapse a patient's events into one row keyed by every schema feature.

    Missing features map to ``None``; categorical features map to a
    frozenset of observed categories.
    """
    if len({e.patient_id for e in events}) > 1:
        raise PreprocessingError("events belong to more than one patient")
    ordered = sorted(events, key=lambda e: e.event_date)
    observed: dict[str, list] = {f.name: [] for f in schema}
    for ev in ordered:
        for key, value in ev.values.items():
            if key not in schema:
                raise SchemaError(f"unknown feature {key!r} in event of {ev.patient_id}")
            if value is None:
                continue
            observed[key].append(value)

    row: dict[str, Any] = {}
    for spec in schema:
        vals = observed[spec.name]
        if not vals:
            row[spec.name] = None
        elif spec.kind == BINARY:
            row[spec.name] = max(_as_binary(spec.name, v) for v in vals)
        elif spec.kind == ORDINAL:
            for v in vals:
                if not isinstance(v, str):
                    raise PreprocessingError(f"{spec.name}: conflicting kind, expected level name, got {v!r}")
            row[spec.name] = max(vals, key=spec.level_index)
        elif spec.kind == CATEGORICAL:
            cats = frozenset(c for v in vals for c in _as_categories(spec.name, v))
            row[spec.name] = cats or None
        else:
            nums = [_as_float(spec.name, v) for v in vals]
            if policy.numerical_rule == "mean":
                row[spec.name] = math.fsum(nums) / len(nums)
            elif policy.numerical_rule == "median":
                row[spec.name] = float(statistics.median(nums))
            else:
                row[spec.name] = nums[-1]
    return row


# --------------------------------------------------------------------------
# category refinement


def _mask(fit_split, n: int) -> np.ndarray:
    if fit_split is None:
        return np.ones(n, dtype=bool)
    arr = np.asarray(fit_split)
    if arr.dtype == bool:
        if arr.shape != (n,):
            raise PreprocessingError("fit_split mask length does not match rows")
        return arr
    m = np.zeros(n, dtype=bool)
    m[arr.astype(int)] = True
    return m


@dataclass
class CategoryAliasMap:
    aliases: dict[str, dict[str, str]] = field(default_factory=dict)
    rare_threshold: int = 4
    others_label: str = OTHERS

    def canonical(self, feature: str, raw: str) -> str:
        table = self.aliases.get(feature, {})
        if raw in table:
            return table[raw]
        key = raw.strip().lower()
        for k, v in table.items():
            if k.strip().lower() == key:
                return v
        return raw

    @classmethod
    def from_json(cls, path, **kw) -> "CategoryAliasMap":
        with open(path, encoding="utf-8") as fh:
            return cls(aliases=json.load(fh), **kw)

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.aliases, fh, indent=2, sort_keys=True)


@dataclass
class CategoryRefiner:
    """Alias canonicalization plus rare-category merge decided on a fitting split."""

    alias_map: CategoryAliasMap
    kept: dict[str, frozenset[str]] = field(default_factory=dict)

    def canonicalize(self, row: Mapping[str, Any], features: Iterable[str]) -> dict[str, Any]:
        out = dict(row)
        for f in features:
            v = row.get(f)
            if v:
                out[f] = frozenset(self.alias_map.canonical(f, c) for c in v)
        return out

    def fit(self, rows: Sequence[Mapping[str, Any]], schema: TabularSchema, fit_split=None) -> "CategoryRefiner":
        feats = [f.name for f in schema.of_kind(CATEGORICAL)]
        mask = _mask(fit_split, len(rows))
        self.kept = {}
        for f in feats:
            counts: Counter = Counter()
            for row, use in zip(rows, mask):
                if use:
                    row = self.canonicalize(row, [f])
                    counts.update(row.get(f) or ())
            self.kept[f] = frozenset(c for c, n in counts.items() if n >= self.alias_map.rare_threshold)
        return self

    def transform(self, rows: Sequence[Mapping[str, Any]]) -> list[dict[str, Any]]:
        others = self.alias_map.others_label
        out = []
        for row in rows:
            row = self.canonicalize(row, self.kept)
            for f, kept in self.kept.items():
                v = row.get(f)
                if v:
                    row[f] = frozenset(c if c in kept else others for c in v)
            out.append(row)
        return out


def refine_categories(rows, alias_map: CategoryAliasMap, fit_split, schema: TabularSchema) -> list[dict[str, Any]]:
    """Canonicalize aliases, then merge categories seen fewer than
    ``alias_map.rare_threshold`` times in the fitting rows into ``Others``."""
    return CategoryRefiner(alias_map).fit(rows, schema, fit_split).transform(rows)


# --------------------------------------------------------------------------
# numeric normalization


def _column(rows, spec, ordinal_zscore: bool) -> np.ndarray:
    out = np.full(len(rows), np.nan)
    for i, row in enumerate(rows):
        v = row.get(spec.name)
        if v is None or (isinstance(v, str) and v.strip() == ""):
            continue
        if spec.kind == ORDINAL:
            out[i] = spec.level_index(v)
            continue
        try:
            x = float(v)
        except (TypeError, ValueError):
            raise PreprocessingError(f"row {i}, feature {spec.name}: non-numeric value {v!r}") from None
        if not math.isfinite(x):
            raise PreprocessingError(f"row {i}, feature {spec.name}: non-finite value {v!r}")
        out[i] = x
    if spec.kind == NUMERICAL:
        lo, hi = spec.valid_range
        out = np.clip(out, lo, hi)
    return out


def _scaled_features(schema: TabularSchema, ordinal_zscore: bool):
    return [f for f in schema if f.kind == NUMERICAL or (f.kind == ORDINAL and ordinal_zscore)]


@dataclass
class NumericNormalizer:
    means: dict[str, float]
    stds: dict[str, float]
    fit_split_id: str = "train"
    ordinal_zscore: bool = True


def fit_normalizer(rows, schema: TabularSchema, fit_split=None, *, ordinal_zscore: bool = True,
                   fit_split_id: str = "train") -> NumericNormalizer:
    mask = _mask(fit_split, len(rows))
    fit_rows = [r for r, m in zip(rows, mask) if m]
    means, stds = {}, {}
    for spec in _scaled_features(schema, ordinal_zscore):
        col = _column(fit_rows, spec, ordinal_zscore)
        col = col[~np.isnan(col)]
        if col.size == 0:
            means[spec.name], stds[spec.name] = 0.0, 0.0
        else:
            means[spec.name] = float(col.mean())
            stds[spec.name] = float(col.std())
    return NumericNormalizer(means, stds, fit_split_id, ordinal_zscore)


def apply_normalizer(rows, norm: NumericNormalizer, schema: TabularSchema) -> np.ndarray:
    """Z-scored columns for the normalized features, in schema order."""
    specs = _scaled_features(schema, norm.ordinal_zscore)
    out = np.zeros((len(rows), len(specs)))
    for j, spec in enumerate(specs):
        col = _column(rows, spec, norm.ordinal_zscore)
        std = norm.stds[spec.name]
        if std == 0.0:
            z = np.zeros_like(col)
        else:
            z = (col - norm.means[spec.name]) / std
        out[:, j] = np.where(np.isnan(col), 0.0, z)
    return out


# --------------------------------------------------------------------------
# Weight of Evidence


def woe_fold_assignment(n: int, k: int, seed: int) -> np.ndarray:
    """Label-independent fold ids: seeded permutation dealt round-robin."""
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.empty(n, dtype=np.int64)
    folds[perm] = np.arange(n) % k
    return folds


@dataclass
class WoEEncoder:
    k: int
    eps: float
    folds: np.ndarray
    categories: dict[str, list[str]]
    # tables[feature][fold][category] -> WoE
    tables: dict[str, list[dict[str, float]]]

    def average_table(self, feature: str) -> dict[str, float]:
        per_fold = self.tables[feature]
        return {c: math.fsum(t[c] for t in per_fold) / self.k for c in self.categories[feature]}

    def value(self, feature: str, categories, fold: int | None = None) -> float:
        if not categories:
            return 0.0
        table = self.average_table(feature) if fold is None else self.tables[feature][fold]
        return math.fsum(table.get(c, 0.0) for c in sorted(categories))

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "eps": self.eps,
            "folds": self.folds.tolist(),
            "categories": self.categories,
            "tables": self.tables,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WoEEncoder":
        return cls(
            k=int(d["k"]),
            eps=float(d["eps"]),
            folds=np.asarray(d["folds"], dtype=np.int64),
            categories={f: list(c) for f, c in d["categories"].items()},
            tables={f: [dict(t) for t in ts] for f, ts in d["tables"].items()},
        )


def woe_value(c1: float, n1: float, c0: float, n0: float, eps: float, n_categories: int) -> float:
    p1 = (c1 + eps) / (n1 + eps * n_categories)
    p0 = (c0 + eps) / (n0 + eps * n_categories)
    if p1 <= 0.0 or p0 <= 0.0:
        raise PreprocessingError("zero category count with eps=0; WoE undefined")
    return math.log(p1) - math.log(p0)


def fit_woe(
    train_rows: Sequence[Mapping[str, Any]],
    labels,
    schema: TabularSchema,
    k: int = 5,
    eps: float = 0.5,
    seed: int = 0,
    folds=None,
) -> WoEEncoder:
    """Per-fold WoE tables, each computed from the rows outside that fold."""
    y = np.asarray(labels)
    if y.shape != (len(train_rows),):
        raise PreprocessingError("labels must align with train_rows")
    if not np.all((y == 0) | (y == 1)):
        raise PreprocessingError("labels must be binary 0/1")
    if k < 2:
        raise PreprocessingError("k must be >= 2")
    if eps < 0:
        raise PreprocessingError("eps must be >= 0")
    if folds is None:
        if len(train_rows) < k:
            raise PreprocessingError(f"need at least k={k} rows, got {len(train_rows)}")
        folds = woe_fold_assignment(len(train_rows), k, seed)
    folds = np.asarray(folds, dtype=np.int64)

    for j in range(k):
        out = folds != j
        if not np.any(y[out] == 1) or not np.any(y[out] == 0):
            raise PreprocessingError(f"WoE fold {j}: a class is absent from the rows outside the fold")

    feats = [f.name for f in schema.of_kind(CATEGORICAL)]
    categories, tables = {}, {}
    for f in feats:
        sets = [frozenset(r.get(f) or ()) for r in train_rows]
        vocab = sorted(set().union(*sets)) if sets else []
        categories[f] = vocab
        V = len(vocab)
        per_fold = []
        for j in range(k):
            out = folds != j
            n1 = int(np.sum(y[out] == 1))
            n0 = int(np.sum(y[out] == 0))
            c1: Counter = Counter()
            c0: Counter = Counter()
            for s, yi, use in zip(sets, y, out):
                if use:
                    (c1 if yi == 1 else c0).update(s)
            per_fold.append({c: woe_value(c1[c], n1, c0[c], n0, eps, V) for c in vocab})
        tables[f] = per_fold
    return WoEEncoder(k=k, eps=float(eps), folds=folds, categories=categories, tables=tables)


def apply_woe(rows, encoder: WoEEncoder, mode: str = "inference", fold: int | None = None) -> np.ndarray:
    """WoE columns (one per categorical feature, multi-category rows summed).

    ``mode="train"`` expects the encoder's own training rows in fit order and
    gives each row its fold's table; ``fold`` forces one table for all rows;
    ``mode="inference"`` uses the average of the per-fold tables.
    """
    feats = list(encoder.tables)
    out = np.zeros((len(rows), len(feats)))
    if mode == "train":
        if len(rows) != len(encoder.folds):
            raise PreprocessingError("train mode needs exactly the fitted training rows")
        row_folds = encoder.folds
    elif mode == "inference":
        row_folds = [fold] * len(rows)
    else:
        raise PreprocessingError(f"unknown WoE mode {mode!r}")
    averaged = {f: encoder.average_table(f) for f in feats} if mode == "inference" and fold is None else None
    for i, (row, fi) in enumerate(zip(rows, row_folds)):
        for j, f in enumerate(feats):
            cats = row.get(f)
            if not cats:
                continue
            table = averaged[f] if averaged is not None else encoder.tables[f][int(fi)]
            out[i, j] = math.fsum(table.get(c, 0.0) for c in sorted(cats))
    return out


# --------------------------------------------------------------------------
# full tabular pipeline


@dataclass
class TabularPreprocessor:
    schema: TabularSchema
    refiner: CategoryRefiner
    normalizer: NumericNormalizer
    woe: WoEEncoder

    @classmethod
    def fit(
        cls,
        rows: Sequence[Mapping[str, Any]],
        labels,
        schema: TabularSchema,
        alias_map: CategoryAliasMap | None = None,
        *,
        eps: float = 0.5,
        k: int = 5,
        seed: int = 0,
        ordinal_zscore: bool = True,
    ) -> "TabularPreprocessor":
        """Fit every stage on ``rows``, which must be training rows only."""
        refiner = CategoryRefiner(alias_map or CategoryAliasMap()).fit(rows, schema)
        refined = refiner.transform(rows)
        norm = fit_normalizer(refined, schema, ordinal_zscore=ordinal_zscore)
        woe = fit_woe(refined, labels, schema, k=k, eps=eps, seed=seed)
        return cls(schema, refiner, norm, woe)

    def transform(self, rows, mode: str = "inference") -> np.ndarray:
        """Encoded matrix of shape (len(rows), n)."""
        refined = self.refiner.transform(rows)
        scaled = apply_normalizer(refined, self.normalizer, self.schema)
        woe = apply_woe(refined, self.woe, mode=mode)
        scaled_names = [f.name for f in _scaled_features(self.schema, self.normalizer.ordinal_zscore)]
        woe_names = list(self.woe.tables)
        out = np.zeros((len(rows), self.schema.n))
        for j, spec in enumerate(self.schema):
            if spec.name in scaled_names:
                out[:, j] = scaled[:, scaled_names.index(spec.name)]
            elif spec.kind == CATEGORICAL:
                out[:, j] = woe[:, woe_names.index(spec.name)]
            elif spec.kind == BINARY:
                out[:, j] = [_as_binary(spec.name, r[spec.name]) if r.get(spec.name) is not None else 0
                             for r in refined]
            else:  # ordinal kept as raw level index
                out[:, j] = [spec.level_index(r[spec.name]) if r.get(spec.name) is not None else 0
                             for r in refined]
        return out

    def to_dict(self) -> dict:
        return {
            "schema_hash": self.schema.hash(),
            "schema": self.schema.to_dict(),
            "aliases": self.refiner.alias_map.aliases,
            "rare_threshold": self.refiner.alias_map.rare_threshold,
            "others_label": self.refiner.alias_map.others_label,
            "kept_categories": {f: sorted(v) for f, v in self.refiner.kept.items()},
            "means": self.normalizer.means,
            "stds": self.normalizer.stds,
            "fit_split_id": self.normalizer.fit_split_id,
            "ordinal_zscore": self.normalizer.ordinal_zscore,
            "woe": self.woe.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TabularPreprocessor":
        schema = TabularSchema.from_dict(d["schema"])
        if schema.hash() != d["schema_hash"]:
            raise PreprocessingError("schema hash mismatch in preprocessor bundle")
        amap = CategoryAliasMap(d["aliases"], d["rare_threshold"], d["others_label"])
        refiner = CategoryRefiner(amap, {f: frozenset(v) for f, v in d["kept_categories"].items()})
        norm = NumericNormalizer(d["means"], d["stds"], d["fit_split_id"], d["ordinal_zscore"])
        return cls(schema, refiner, norm, WoEEncoder.from_dict(d["woe"]))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "TabularPreprocessor":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def encode_row(consolidated_row: Mapping[str, Any], pre: TabularPreprocessor, fold: int | None = None) -> np.ndarray:
    """Encode one patient row into T of width n (inference tables unless ``fold`` is given)."""
    unknown = set(consolidated_row) - set(pre.schema.names)
    if unknown:
        raise SchemaError(f"row has features outside the schema: {sorted(unknown)}")
    if fold is None:
        return pre.transform([consolidated_row])[0]
    refined = pre.refiner.transform([consolidated_row])
    vec = pre.transform([consolidated_row])
    woe = apply_woe(refined, pre.woe, mode="inference", fold=fold)[0]
    for j, f in enumerate(pre.woe.tables):
        vec[0, pre.schema.names.index(f)] = woe[j]
    return vec[0]
