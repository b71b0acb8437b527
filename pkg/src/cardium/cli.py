"""``cardium`` command-line entry point.

Every subcommand reads one JSON config (``--config``; defaults apply when
omitted), resolves the seed (``--seed`` flag, then ``CARDIUM_SEED``, then the
config), writes the effective config to ``<run_dir>/config.json`` and keeps
all outputs under the run directory. Failures exit nonzero with a
``{"code", "field", "message"}`` JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .dataset_io import DatasetFormatError, load_dataset, load_images, write_dataset
from .evaluation import (
    MODALITIES,
    PUBLISHED_VARIANT_F1,
    comparison_table,
    make_folds,
    write_report,
)
from .fusion import VARIANTS
from .pipeline import (
    ConfigValidationError,
    CVRun,
    FoldModels,
    MissingCheckpointError,
    RunConfig,
    evaluate_run,
    fit_preprocessor,
    resolve_seed,
    train_cv,
    train_fold,
)
from .records import ValidationError
from .synthetic import ConfigError, generate_synthetic_dataset
from .training import TrainingError

log = logging.getLogger("cardium")

TAPS = ("image-encoder", "tabular-encoder", "fused")


class CLIError(Exception):
    def __init__(self, code: str, field: str | None, message: str, errors: list | None = None):
        super().__init__(message)
        self.code, self.field, self.message, self.errors = code, field, message, errors

    def payload(self) -> dict:
        out = {"code": self.code, "field": self.field, "message": self.message}
        if self.errors:
            out["errors"] = self.errors
        return out


# --------------------------------------------------------------------------
# shared plumbing


def load_config(args) -> RunConfig:
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
    except FileNotFoundError:
        raise CLIError("config_not_found", "config", f"no such file: {args.config}") from None
    except json.JSONDecodeError as exc:
        raise CLIError("config_parse", "config", f"invalid JSON: {exc}") from None
    except ConfigValidationError as exc:
        raise _validation_error(exc) from None
    if args.run_dir:
        cfg = replace(cfg, run_dir=args.run_dir)
    try:
        cfg = resolve_seed(cfg, args.seed)
    except ValueError:
        raise CLIError("invalid_seed", "CARDIUM_SEED", "environment seed must be an integer") from None
    try:
        cfg.validate()
    except ConfigValidationError as exc:
        raise _validation_error(exc) from None
    run = Path(cfg.run_dir)
    run.mkdir(parents=True, exist_ok=True)
    cfg.save(run / "config.json")
    return cfg


def _validation_error(exc: ConfigValidationError) -> CLIError:
    fields = [f for f, _ in exc.errors]
    return CLIError("config_invalid", ",".join(fields), str(exc),
                    errors=[{"field": f, "message": m} for f, m in exc.errors])


def data_dir(cfg: RunConfig) -> Path:
    d = Path(cfg.data_dir)
    return d if d.is_absolute() else Path(cfg.run_dir) / d


def load_data(cfg: RunConfig):
    root = data_dir(cfg)
    if not (root / "events.csv").exists():
        raise CLIError("missing_dataset", "data_dir", f"no dataset at {root}; run `cardium generate` first")
    records = load_dataset(root / "events.csv", root / "images", cfg.schema(), policy=cfg.policy())
    return records, load_images(records, root / "images")


def fold_dir(cfg: RunConfig, k: int) -> Path:
    return Path(cfg.run_dir) / f"fold_{k}"


def fold_indices(cfg: RunConfig, fold: str) -> list[int]:
    if fold == "all":
        return list(range(cfg.folds))
    k = int(fold)
    if not 0 <= k < cfg.folds:
        raise CLIError("invalid_fold", "fold", f"fold must lie in [0, {cfg.folds - 1}] or be 'all'")
    return [k]


def load_run(cfg: RunConfig, records) -> CVRun:
    plan = make_folds(records, cfg.folds, cfg.fold_seed)
    return CVRun(plan, [FoldModels.load(fold_dir(cfg, k), cfg.schema().hash()) for k in range(cfg.folds)])


def write_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


# --------------------------------------------------------------------------
# commands


def cmd_generate(cfg: RunConfig, args) -> None:
    ds = generate_synthetic_dataset(cfg.synthetic, cfg.schema(), cfg.policy())
    root = data_dir(cfg)
    write_dataset(ds.records, ds.images, root, cfg.schema())
    log.info("wrote %d patients to %s", len(ds.records), root)


def cmd_preprocess(cfg: RunConfig, args) -> None:
    records, _ = load_data(cfg)
    plan = make_folds(records, cfg.folds, cfg.fold_seed)
    out = Path(cfg.run_dir) / "preprocess"
    out.mkdir(exist_ok=True)
    by_id = {r.patient_id: r for r in records}
    for k in fold_indices(cfg, args.fold):
        fit = [by_id[p] for p in plan.train_ids(k)]
        pre = fit_preprocessor(cfg, fit, cfg.schema())
        pre.save(out / f"fold_{k}_preprocessor.json")
        ordered = sorted(records, key=lambda r: r.patient_id)
        x = pre.transform([r.consolidated_row for r in ordered])
        write_rows(out / f"fold_{k}_encoded.csv", [
            {"patient_id": r.patient_id, "fold": plan.assignment[r.patient_id],
             **{name: repr(float(v)) for name, v in zip(cfg.schema().names, row)}}
            for r, row in zip(ordered, x)
        ])
        log.info("fold %d: preprocessor fitted on %d patients", k, len(fit))


def cmd_train(cfg: RunConfig, args) -> None:
    records, images = load_data(cfg)
    plan = make_folds(records, cfg.folds, cfg.fold_seed)
    stages = ("image", "tabular", "fusion") if args.stage == "all" else (args.stage,)
    schema_hash = cfg.schema().hash()
    for k in fold_indices(cfg, args.fold):
        d = fold_dir(cfg, k)
        base = FoldModels.load(d, schema_hash) if (d / "preprocessor.json").exists() and args.stage != "all" else None
        if stages == ("fusion",) and (base is None or base.image_classifier is None or base.tabular_classifier is None):
            raise CLIError("missing_checkpoint", "stage",
                           f"fold {k}: the fusion stage needs image and tabular checkpoints under {d}")
        models = train_fold(cfg, records, images, plan.train_ids(k), stages=stages, base=base)
        models.save(d, schema_hash)
        log.info("fold %d: trained %s", k, ", ".join(stages))


def cmd_evaluate(cfg: RunConfig, args) -> None:
    records, images = load_data(cfg)
    run = load_run(cfg, records)
    report = evaluate_run(cfg, run, records, images, args.modality)
    out = Path(cfg.run_dir) / "reports"
    out.mkdir(exist_ok=True)
    write_report(report, out / f"{args.modality}.json", out / f"{args.modality}.csv")
    agg = report["aggregate"]["f1"]
    log.info("%s F1 %s", args.modality, "undefined" if agg["mean"] is None else f"{agg['mean']:.3f} ± {agg['std']:.3f}")


def cmd_ablate(cfg: RunConfig, args) -> None:
    records, images = load_data(cfg)
    plan = make_folds(records, cfg.folds, cfg.fold_seed)
    reports = []
    reference = None
    if args.fusion_variant:
        variants = VARIANTS if args.fusion_variant == "all" else (args.fusion_variant,)
        base = train_cv(cfg, records, images, plan=plan, stages=("image", "tabular"))
        for v in variants:
            fcfg = replace(cfg.fusion, variant=v)
            run = train_cv(cfg, records, images, fusion_cfg=fcfg, plan=plan, stages=("fusion",), base=base)
            reports.append(evaluate_run(cfg, run, records, images, "multimodal", label=v))
        reference = PUBLISHED_VARIANT_F1
    else:
        settings = [("baseline", cfg, False)]
        if args.no_sampler:
            train = {s: replace(t, sampler="none") for s, t in cfg.train.items()}
            settings.append(("no-sampler", replace(cfg, train=train), False))
        if args.pos_factor is not None:
            train = {s: replace(t, pos_loss_factor=args.pos_factor) for s, t in cfg.train.items()}
            settings.append((f"pos-factor={args.pos_factor:g}", replace(cfg, train=train), False))
        if args.half_data:
            settings.append(("half-data", cfg, True))
        if len(settings) == 1:
            raise CLIError("no_ablation", "ablate", "choose --fusion-variant, --no-sampler, --pos-factor or --half-data")
        for label, c, half in settings:
            run = train_cv(c, records, images, half_data=half, plan=plan)
            reports.append(evaluate_run(c, run, records, images, "multimodal", label=label))
    rows = comparison_table(reports, reference)
    out = Path(cfg.run_dir) / "ablations"
    out.mkdir(exist_ok=True)
    name = "fusion_variants" if args.fusion_variant else "training"
    write_rows(out / f"{name}.csv", rows)
    with open(out / f"{name}.json", "w", encoding="utf-8") as fh:
        json.dump({"rows": rows, "reports": reports}, fh, indent=2, sort_keys=True)
    json.dump(rows, sys.stdout, indent=2)
    sys.stdout.write("\n")


def cmd_export_embeddings(cfg: RunConfig, args) -> None:
    records, images = load_data(cfg)
    run = load_run(cfg, records)
    by_id = {r.patient_id: r for r in records}
    rows = []
    for k in fold_indices(cfg, args.fold):
        test = [by_id[p] for p in run.plan.test_ids(k)]
        pids, z = run.folds[k].tap(test, images, args.tap, cfg.eval_batch)
        rows += export_rows(pids, [by_id[p].label for p in pids], z)
    rows.sort(key=lambda r: r["patient_id"])
    out = Path(cfg.run_dir) / "embeddings"
    out.mkdir(exist_ok=True)
    write_rows(out / f"{args.tap}.csv", rows)


def export_rows(pids: Sequence[str], labels: Sequence[int], z: np.ndarray) -> list[dict]:
    """One row per patient: id, label, then the D embedding coordinates."""
    return [{"patient_id": p, "label": int(y), **{f"z{j}": repr(float(v)) for j, v in enumerate(row)}}
            for p, y, row in zip(pids, labels, np.asarray(z))]


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file")
    common.add_argument("--seed", type=int, help="overrides CARDIUM_SEED and the config seed")
    common.add_argument("--run-dir", help="overrides run_dir from the config")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cardium", description="Multimodal CHD detection pipeline on synthetic or on-disk cohorts.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write the synthetic cohort under the run directory")
    pre = sub.add_parser("preprocess", parents=[common], help="fit fold preprocessors and write encoded matrices")
    pre.add_argument("--fold", default="all")
    tr = sub.add_parser("train", parents=[common], help="train one stage (or all) for one fold (or all)")
    tr.add_argument("--stage", choices=("image", "tabular", "fusion", "all"), default="all")
    tr.add_argument("--fold", default="all")
    ev = sub.add_parser("evaluate", parents=[common], help="cross-validated MetricsReport")
    ev.add_argument("--modality", choices=MODALITIES, default="multimodal")
    ab = sub.add_parser("ablate", parents=[common], help="retrain under ablated settings and tabulate")
    ab.add_argument("--fusion-variant", choices=(*VARIANTS, "all"))
    ab.add_argument("--no-sampler", action="store_true")
    ab.add_argument("--pos-factor", type=float)
    ab.add_argument("--half-data", action="store_true")
    ex = sub.add_parser("export-embeddings", parents=[common], help="per-patient embeddings at a tap point")
    ex.add_argument("--tap", choices=TAPS, default="fused")
    ex.add_argument("--fold", default="all")
    return p


COMMANDS = {
    "generate": cmd_generate,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "export-embeddings": cmd_export_embeddings,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = load_config(args)
        COMMANDS[args.command](cfg, args)
    except CLIError as exc:
        return _fail(exc)
    except MissingCheckpointError as exc:
        return _fail(CLIError("missing_checkpoint", "stage", str(exc)))
    except DatasetFormatError as exc:
        return _fail(CLIError("dataset_format", str(exc.path) if getattr(exc, "path", None) else "data_dir", str(exc)))
    except (ValidationError, ConfigError) as exc:
        return _fail(CLIError("invalid_input", getattr(exc, "field", None), str(exc)))
    except TrainingError as exc:
        return _fail(CLIError("training_failed", "train", str(exc)))
    return 0


def _fail(err: CLIError) -> int:
    sys.stderr.write(json.dumps(err.payload(), sort_keys=True) + "\n")
    return 2


if __name__ == "__main__":
    sys.exit(main())
