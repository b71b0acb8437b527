"""On-disk dataset layout.

::

    <root>/events.csv      patient_id,event_date,<feature...>   (one row per clinical event)
    <root>/labels.csv      patient_id,label,chd_type,trimesters
    <root>/images.csv      patient_id,image_id                  (optional index)
    <root>/images/<patient_id>/<image_id>.png
    <root>/manifest.json

Categorical cells hold ``|``-joined entries; trimesters are ``;``-joined.
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image

from .preprocessing import ConsolidationPolicy, consolidate
from .records import LABEL_NAMES, LABEL_VALUES, ClinicalEvent, PatientRecord
from .schema import BINARY, CATEGORICAL, NUMERICAL, ORDINAL, SchemaError, TabularSchema

CAT_SEP = "|"
TRI_SEP = ";"


class DatasetFormatError(ValueError):
    def __init__(self, path, line: int | None, message: str):
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")
        self.path, self.line = str(path), line


def _format_cell(spec, value) -> str:
    if value is None:
        return ""
    if spec.kind == CATEGORICAL:
        return CAT_SEP.join(value)
    if spec.kind == NUMERICAL:
        return repr(float(value))
    return str(value)


def _parse_cell(spec, cell: str, path, line: int):
    if cell == "":
        return None
    if spec.kind == NUMERICAL:
        try:
            return float(cell)
        except ValueError:
            raise DatasetFormatError(path, line, f"{spec.name}: non-numeric value {cell!r}") from None
    if spec.kind == BINARY:
        if cell not in ("0", "1"):
            raise DatasetFormatError(path, line, f"{spec.name}: binary value must be 0 or 1, got {cell!r}")
        return int(cell)
    if spec.kind == ORDINAL:
        if cell not in spec.ordinal_levels:
            raise DatasetFormatError(path, line, f"{spec.name}: unknown ordinal level {cell!r}")
        return cell
    return tuple(cell.split(CAT_SEP))


def save_image(path, data: np.ndarray) -> None:
    arr = np.round(np.asarray(data, dtype=np.float64) * 255.0).astype(np.uint8)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path)
    else:
        Image.fromarray(np.moveaxis(arr, 0, -1), mode="RGB").save(path)


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = np.moveaxis(arr, -1, 0)
    return (arr.astype(np.float64) / 255.0).astype(np.float32)


def write_dataset(
    records: Sequence[PatientRecord],
    images: Mapping[str, Mapping[str, np.ndarray]],
    root,
    schema: TabularSchema,
) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    with open(root / "events.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "event_date", *schema.names])
        for rec in records:
            for ev in rec.events:
                w.writerow([rec.patient_id, ev.event_date,
                            *(_format_cell(s, ev.values.get(s.name)) for s in schema)])
    with open(root / "labels.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "label", "chd_type", "trimesters"])
        for rec in records:
            w.writerow([rec.patient_id, LABEL_NAMES[rec.label], rec.chd_type or "",
                        TRI_SEP.join(str(t) for t in sorted(rec.trimesters))])
    with open(root / "images.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "image_id"])
        for rec in records:
            pdir = root / "images" / rec.patient_id
            pdir.mkdir(exist_ok=True)
            for iid in rec.image_refs:
                save_image(pdir / f"{iid}.png", images[rec.patient_id][iid])
                w.writerow([rec.patient_id, iid])
    manifest = {
        "schema_hash": schema.hash(),
        "n_patients": len(records),
        "image_counts": {r.patient_id: len(r.image_refs) for r in records},
    }
    with open(root / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return root


def _read_events(path, schema: TabularSchema) -> dict[str, list[ClinicalEvent]]:
    events: dict[str, list[ClinicalEvent]] = defaultdict(list)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["patient_id", "event_date"]:
            raise DatasetFormatError(path, 1, "header must start with patient_id,event_date")
        for name in header[2:]:
            if name not in schema:
                raise DatasetFormatError(path, 1, f"unknown feature {name!r}")
        specs = [schema[n] for n in header[2:]]
        for line, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DatasetFormatError(path, line, f"expected {len(header)} cells, got {len(row)}")
            pid = row[0]
            if not pid:
                raise DatasetFormatError(path, line, "empty patient_id")
            try:
                date = int(row[1])
            except ValueError:
                raise DatasetFormatError(path, line, f"event_date must be an integer day offset, got {row[1]!r}") from None
            values = {}
            for spec, cell in zip(specs, row[2:]):
                v = _parse_cell(spec, cell, path, line)
                if v is not None:
                    values[spec.name] = v
            events[pid].append(ClinicalEvent(pid, date, values))
    return events


def _read_labels(path) -> dict[str, tuple[int, str | None, frozenset[int]]]:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["patient_id", "label", "chd_type", "trimesters"]:
            raise DatasetFormatError(path, 1, "header must be patient_id,label,chd_type,trimesters")
        for line, row in enumerate(reader, start=2):
            pid = row["patient_id"]
            if pid in out:
                raise DatasetFormatError(path, line, f"duplicate patient {pid!r}")
            if row["label"] not in LABEL_VALUES:
                raise DatasetFormatError(path, line, f"label must be CHD or non-CHD, got {row['label']!r}")
            try:
                tri = frozenset(int(t) for t in row["trimesters"].split(TRI_SEP) if t)
            except ValueError:
                raise DatasetFormatError(path, line, f"bad trimesters {row['trimesters']!r}") from None
            out[pid] = (LABEL_VALUES[row["label"]], row["chd_type"] or None, tri)
    return out


def _read_image_index(path, image_root: Path) -> dict[str, list[str]]:
    index: dict[str, list[str]] = defaultdict(list)
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for line, row in enumerate(reader, start=2):
            key = (row["patient_id"], row["image_id"])
            if key in seen:
                raise DatasetFormatError(path, line, f"duplicate image {key}")
            seen.add(key)
            if not (image_root / key[0] / f"{key[1]}.png").is_file():
                raise DatasetFormatError(path, line, f"missing image file {key[0]}/{key[1]}.png")
            index[key[0]].append(key[1])
    return index


def _scan_images(image_root: Path, pid: str) -> list[str]:
    pdir = image_root / pid
    if not pdir.is_dir():
        return []
    return sorted(p.stem for p in pdir.iterdir() if p.suffix.lower() == ".png")


def load_dataset(
    tabular_path,
    image_root,
    schema: TabularSchema,
    labels_path=None,
    policy: ConsolidationPolicy = ConsolidationPolicy(),
) -> list[PatientRecord]:
    """Read events, labels and image references into consolidated records.

    ``labels_path`` defaults to ``labels.csv`` beside the events file; an
    ``images.csv`` index there, when present, lists the images explicitly.
    """
    tabular_path, image_root = Path(tabular_path), Path(image_root)
    labels_path = Path(labels_path) if labels_path else tabular_path.with_name("labels.csv")
    events = _read_events(tabular_path, schema)
    labels = _read_labels(labels_path)
    index_path = tabular_path.with_name("images.csv")
    index = _read_image_index(index_path, image_root) if index_path.is_file() else None

    records = []
    for pid in sorted(set(labels) | set(events)):
        if pid not in labels:
            raise DatasetFormatError(labels_path, None, f"patient {pid!r} has events but no label")
        label, chd_type, tri = labels[pid]
        refs = index.get(pid, []) if index is not None else _scan_images(image_root, pid)
        for iid in refs:
            try:
                read_image(image_root / pid / f"{iid}.png")
            except (OSError, ValueError) as exc:
                raise DatasetFormatError(image_root / pid / f"{iid}.png", None, f"undecodable image: {exc}") from None
        evs = tuple(sorted(events.get(pid, []), key=lambda e: e.event_date))
        try:
            records.append(PatientRecord(
                patient_id=pid, label=label, chd_type=chd_type, trimesters=tri,
                consolidated_row=consolidate(evs, schema, policy),
                image_refs=tuple(refs), events=evs,
            ))
        except SchemaError as exc:
            raise DatasetFormatError(labels_path, None, str(exc)) from None
    return records


def load_images(records: Sequence[PatientRecord], image_root) -> dict[str, dict[str, np.ndarray]]:
    image_root = Path(image_root)
    return {r.patient_id: {i: read_image(image_root / r.patient_id / f"{i}.png") for i in r.image_refs}
            for r in records}
