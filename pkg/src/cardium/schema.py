"""Declarative description of the maternal clinical variables."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterator, Sequence

NUMERICAL = "numerical"
BINARY = "binary"
ORDINAL = "ordinal"
CATEGORICAL = "categorical"
KINDS = (NUMERICAL, BINARY, ORDINAL, CATEGORICAL)


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str
    ordinal_levels: tuple[str, ...] = ()
    valid_range: tuple[float, float] | None = None
    unit: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"{self.name}: unknown kind {self.kind!r}")
        if self.kind == ORDINAL:
            if not self.ordinal_levels:
                raise SchemaError(f"{self.name}: ordinal feature needs levels")
            if len(set(self.ordinal_levels)) != len(self.ordinal_levels):
                raise SchemaError(f"{self.name}: duplicate ordinal levels")
        if self.kind == NUMERICAL:
            if self.valid_range is None or not self.valid_range[0] < self.valid_range[1]:
                raise SchemaError(f"{self.name}: numerical feature needs valid_range with min < max")

    def level_index(self, level: str) -> int:
        try:
            return self.ordinal_levels.index(level)
        except ValueError:
            raise SchemaError(f"{self.name}: unknown ordinal level {level!r}") from None

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind, "unit": self.unit}
        if self.ordinal_levels:
            d["ordinal_levels"] = list(self.ordinal_levels)
        if self.valid_range is not None:
            d["valid_range"] = list(self.valid_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpec":
        vr = d.get("valid_range")
        return cls(
            name=d["name"],
            kind=d["kind"],
            ordinal_levels=tuple(d.get("ordinal_levels", ())),
            valid_range=tuple(float(v) for v in vr) if vr is not None else None,
            unit=d.get("unit", ""),
        )


@dataclass(frozen=True)
class TabularSchema:
    features: tuple[FeatureSpec, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        names = [f.name for f in self.features]
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise SchemaError(f"duplicate feature names: {sorted(dupes)}")
        object.__setattr__(self, "_index", {f.name: f for f in self.features})

    @property
    def n(self) -> int:
        # every kind encodes to a single numeric column
        return len(self.features)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    def __getitem__(self, name: str) -> FeatureSpec:
        try:
            return self._index[name]
        except KeyError:
            raise SchemaError(f"unknown feature {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __iter__(self) -> Iterator[FeatureSpec]:
        return iter(self.features)

    def __len__(self) -> int:
        return len(self.features)

    def of_kind(self, kind: str) -> list[FeatureSpec]:
        return [f for f in self.features if f.kind == kind]

    def to_dict(self) -> dict:
        return {"features": [f.to_dict() for f in self.features]}

    @classmethod
    def from_dict(cls, d: dict) -> "TabularSchema":
        return cls(tuple(FeatureSpec.from_dict(f) for f in d["features"]))

    @classmethod
    def from_json(cls, path) -> "TabularSchema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


RISK_LEVELS = ("low", "intermediate", "high")


def _num(name: str, lo: float, hi: float, unit: str) -> FeatureSpec:
    return FeatureSpec(name, NUMERICAL, valid_range=(lo, hi), unit=unit)


def default_schema() -> TabularSchema:
    """The 26 maternal variables used by the synthetic cohort."""
    features: Sequence[FeatureSpec] = (
        _num("maternal_age", 18.0, 50.0, "years"),
        _num("bmi", 15.0, 50.0, "kg/m2"),
        _num("weight", 40.0, 150.0, "kg"),
        _num("height", 140.0, 190.0, "cm"),
        _num("systolic_bp", 80.0, 180.0, "mmHg"),
        _num("diastolic_bp", 40.0, 120.0, "mmHg"),
        _num("heart_rate", 50.0, 130.0, "bpm"),
        _num("glucose", 50.0, 250.0, "mg/dL"),
        _num("hemoglobin", 7.0, 17.0, "g/dL"),
        _num("gravidity", 1.0, 12.0, "count"),
        _num("parity", 0.0, 10.0, "count"),
        _num("nuchal_translucency", 0.5, 6.0, "mm"),
        FeatureSpec("chromosomal_abnormality", BINARY),
        FeatureSpec("smoking", BINARY),
        FeatureSpec("alcohol", BINARY),
        FeatureSpec("first_trimester_screening", BINARY),
        FeatureSpec("assisted_reproduction", BINARY),
        FeatureSpec("pregestational_diabetes", BINARY),
        FeatureSpec("chronic_hypertension", BINARY),
        FeatureSpec("teratogen_exposure", BINARY),
        FeatureSpec("obstetric_risk", ORDINAL, ordinal_levels=RISK_LEVELS),
        FeatureSpec("preeclampsia_risk", ORDINAL, ordinal_levels=RISK_LEVELS),
        FeatureSpec("education_level", ORDINAL, ordinal_levels=("primary", "secondary", "tertiary")),
        FeatureSpec("pathological_history", CATEGORICAL),
        FeatureSpec("hereditary_history", CATEGORICAL),
        FeatureSpec("pharmacological_history", CATEGORICAL),
    )
    return TabularSchema(tuple(features))
