"""Patient-level cross-validation, report assembly and embedding export."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

import numpy as np

from .metrics import METRICS, aggregate_patient, compute_metrics, mean_std
from .records import PatientRecord, image_trimester

SCHEMA_VERSION = 1
MODALITIES = ("multimodal", "image", "tabular")

# Externally reported F1 scores, carried into reports for side-by-side reading only.
PUBLISHED_F1 = {"multimodal": 0.798, "image": 0.689, "tabular": 0.294}
PUBLISHED_VARIANT_F1 = {
    "mlp": 0.454,
    "encoder": 0.686,
    "decoder": 0.607,
    "encoder-cross": 0.681,
    "dual-decoder": 0.798,
}


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignment: Mapping[str, int]
    seed: int

    def test_ids(self, fold: int) -> list[str]:
        return sorted(p for p, f in self.assignment.items() if f == fold)

    def train_ids(self, fold: int) -> list[str]:
        return sorted(p for p, f in self.assignment.items() if f != fold)

    def to_dict(self) -> dict:
        return {"k": self.k, "seed": self.seed, "assignment": dict(sorted(self.assignment.items()))}

    @classmethod
    def from_dict(cls, d: dict) -> "FoldPlan":
        return cls(int(d["k"]), {p: int(f) for p, f in d["assignment"].items()}, int(d["seed"]))


def make_folds(records: Sequence[PatientRecord], k: int = 3, seed: int = 0) -> FoldPlan:
    """Stratified patient-level partition.

    Each class is shuffled and dealt round-robin; the negative deal starts
    where the positive deal stopped so fold sizes stay within one patient.
    """
    ids = sorted(r.patient_id for r in records)
    if len(set(ids)) != len(ids):
        raise EvaluationError("duplicate patient ids")
    label = {r.patient_id: r.label for r in records}
    pos = [p for p in ids if label[p] == 1]
    neg = [p for p in ids if label[p] == 0]
    if len(pos) < k or len(neg) < k:
        raise EvaluationError(f"need at least {k} patients per class, got {len(pos)} positive / {len(neg)} negative")
    rng = np.random.default_rng(seed)
    assignment: dict[str, int] = {}
    start = 0
    for group in (pos, neg):
        perm = rng.permutation(len(group))
        for i, j in enumerate(perm):
            assignment[group[j]] = (start + i) % k
        start = (start + len(group)) % k
    return FoldPlan(k, assignment, seed)


def stratified_holdout(records: Sequence[PatientRecord], fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Split ids into (kept, held out) with ``fraction`` of each class held out."""
    rng = np.random.default_rng(seed)
    kept, held = [], []
    for cls in (1, 0):
        ids = sorted(r.patient_id for r in records if r.label == cls)
        n_hold = int(math.floor(fraction * len(ids) + 0.5))
        if len(ids) >= 2:
            n_hold = max(1, min(n_hold, len(ids) - 1))
        else:
            n_hold = 0
        perm = rng.permutation(len(ids))
        held += [ids[j] for j in perm[:n_hold]]
        kept += [ids[j] for j in perm[n_hold:]]
    return sorted(kept), sorted(held)


def half_data_subsample(train_records: Sequence[PatientRecord], seed: int) -> list[PatientRecord]:
    """Keep half of each (label, trimester profile) stratum, rounded half-up.

    A stratum of one patient keeps its patient.
    """
    rng = np.random.default_rng(seed)
    strata: dict = {}
    for r in sorted(train_records, key=lambda r: r.patient_id):
        strata.setdefault((r.label, tuple(sorted(r.trimesters))), []).append(r)
    kept = []
    for key in sorted(strata):
        group = strata[key]
        n_keep = int(math.floor(len(group) / 2 + 0.5))
        perm = rng.permutation(len(group))
        kept += [group[j] for j in sorted(perm[:n_keep])]
    return sorted(kept, key=lambda r: r.patient_id)


# --------------------------------------------------------------------------
# reports


class FoldPredictor(Protocol):
    def predict_images(self, records: Sequence[PatientRecord], images, modality: str, eval_batch: int,
                       order: Sequence[tuple[str, str]] | None = None) -> dict[tuple[str, str], float]:
        ...


def image_order(records: Sequence[PatientRecord]) -> list[tuple[str, str]]:
    """Deterministic evaluation order: patients by id, images in record order."""
    return [(r.patient_id, i) for r in sorted(records, key=lambda r: r.patient_id) for i in r.image_refs]


def patient_probabilities(records, image_probs: Mapping[tuple[str, str], float], trimester: int | None = None,
                          use_logits: bool = False) -> tuple[list[str], list[float], list[int]]:
    ids, probs, labels = [], [], []
    for r in sorted(records, key=lambda r: r.patient_id):
        refs = r.image_refs if trimester is None else [i for i in r.image_refs if image_trimester(i) == trimester]
        if not refs:
            continue
        ids.append(r.patient_id)
        probs.append(aggregate_patient([image_probs[(r.patient_id, i)] for i in refs], use_logits))
        labels.append(r.label)
    return ids, probs, labels


def _fold_block(records, image_probs, threshold: float, use_logits: bool) -> dict:
    _, probs, labels = patient_probabilities(records, image_probs, use_logits=use_logits)
    block = {"metrics": compute_metrics(probs, labels, threshold), "slices": {}}
    for t in (1, 2, 3):
        _, tp, tl = patient_probabilities(records, image_probs, trimester=t, use_logits=use_logits)
        block["slices"][f"trimester_{t}"] = compute_metrics(tp, tl, threshold) if tp else None
    return block


def batch_sensitivity(predictor: FoldPredictor, records, images, modality: str, eval_batch: int,
                      reference: Mapping[tuple[str, str], float], shuffles: int = 5, seed: int = 0,
                      use_logits: bool = False) -> float:
    """Max |change| of any patient probability over seeded reshufflings of the evaluation batches."""
    _, ref, _ = patient_probabilities(records, reference, use_logits=use_logits)
    order = image_order(records)
    rng = np.random.default_rng(seed)
    drift = 0.0
    for _ in range(shuffles):
        perm = [order[j] for j in rng.permutation(len(order))]
        probs = predictor.predict_images(records, images, modality, eval_batch, order=perm)
        _, pp, _ = patient_probabilities(records, probs, use_logits=use_logits)
        drift = max(drift, float(np.max(np.abs(np.asarray(pp) - np.asarray(ref)))))
    return drift


def evaluate_cv(
    fold_models: Sequence[FoldPredictor],
    records: Sequence[PatientRecord],
    images,
    plan: FoldPlan,
    eval_batch: int = 64,
    modality: str = "multimodal",
    threshold: float = 0.5,
    use_logits: bool = False,
    shuffles: int = 5,
    label: str | None = None,
) -> dict:
    """MetricsReport over every fold of ``plan`` (one trained model per fold)."""
    if len(fold_models) != plan.k:
        raise EvaluationError(f"got {len(fold_models)} fold models for a {plan.k}-fold plan")
    if modality not in MODALITIES:
        raise EvaluationError(f"unknown modality {modality!r}")
    by_id = {r.patient_id: r for r in records}
    folds, drift = [], 0.0
    for k, model in enumerate(fold_models):
        test = [by_id[p] for p in plan.test_ids(k)]
        probs = model.predict_images(test, images, modality, eval_batch)
        block = _fold_block(test, probs, threshold, use_logits)
        block["fold"] = k
        folds.append(block)
        if shuffles:
            drift = max(drift, batch_sensitivity(model, test, images, modality, eval_batch, probs,
                                                 shuffles, seed=plan.seed + k, use_logits=use_logits))
    return assemble_report(folds, modality, label=label, diagnostics={"batch_sensitivity_max_drift": drift,
                                                                      "eval_batch": eval_batch, "shuffles": shuffles})


def assemble_report(folds: list[dict], modality: str, label: str | None = None, diagnostics: dict | None = None) -> dict:
    aggregate = {m: mean_std([f["metrics"][m] for f in folds]) for m in METRICS}
    slices = {}
    for t in (1, 2, 3):
        key = f"trimester_{t}"
        entries = [f["slices"][key] for f in folds if f["slices"].get(key)]
        slices[key] = {m: mean_std([e[m] for e in entries]) for m in METRICS}
    return {
        "schema_version": SCHEMA_VERSION,
        "modality": modality,
        "label": label or modality,
        "folds": folds,
        "aggregate": aggregate,
        "slices": slices,
        "diagnostics": diagnostics or {},
        "reference": {"published_f1": PUBLISHED_F1.get(modality)},
    }


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2)


def report_csv(report: dict) -> str:
    """Flat mirror: one row per fold, aggregate and trimester slice."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "scope", *[f"{m}_{s}" for m in METRICS for s in ("mean", "std")]])
    for f in report["folds"]:
        w.writerow([report["label"], f"fold_{f['fold']}", *[x for m in METRICS for x in (f["metrics"][m], "")]])
    w.writerow([report["label"], "aggregate", *[x for m in METRICS for x in (report["aggregate"][m]["mean"], report["aggregate"][m]["std"])]])
    for key, block in report["slices"].items():
        w.writerow([report["label"], key, *[x for m in METRICS for x in (block[m]["mean"], block[m]["std"])]])
    return buf.getvalue()


def write_report(report: dict, path_json, path_csv=None) -> None:
    with open(path_json, "w", encoding="utf-8") as fh:
        fh.write(report_json(report))
    if path_csv is not None:
        with open(path_csv, "w", encoding="utf-8") as fh:
            fh.write(report_csv(report))


def comparison_table(reports: Sequence[dict], reference: Mapping[str, float] | None = None) -> list[dict]:
    """Rows of ``label, f1 mean/std, ...`` for ablation summaries."""
    rows = []
    for rep in reports:
        row = {"label": rep["label"]}
        for m in METRICS:
            row[f"{m}_mean"] = rep["aggregate"][m]["mean"]
            row[f"{m}_std"] = rep["aggregate"][m]["std"]
        if reference is not None:
            row["published_f1"] = reference.get(rep["label"])
        rows.append(row)
    return rows


def format_mean_std(stat: Mapping) -> str:
    if stat["mean"] is None:
        return "undefined"
    return f"{stat['mean']:.3f} ± {stat['std']:.3f}"
