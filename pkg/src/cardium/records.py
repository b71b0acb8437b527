"""Patient, event and image record types."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

CHD = 1
NON_CHD = 0
LABEL_NAMES = {CHD: "CHD", NON_CHD: "non-CHD"}
LABEL_VALUES = {v: k for k, v in LABEL_NAMES.items()}

CHD_TYPES = (
    "ventricular septal defect",
    "atrial septal defect",
    "atrioventricular septal defect",
    "tetralogy of fallot",
    "transposition of great arteries",
    "coarctation of aorta",
    "hypoplastic left heart",
    "pulmonary stenosis",
    "double outlet right ventricle",
    "truncus arteriosus",
    "ebstein anomaly",
    "Other",
)

_IMAGE_ID = re.compile(r"^t([123])_")


class ValidationError(ValueError):
    pass


@dataclass(frozen=True)
class ClinicalEvent:
    """One dated clinical note; ``values`` holds only the features it mentions.

    Raw values are typed by feature kind: float (numerical), int 0/1 (binary),
    str (ordinal level) or tuple of str (categorical entries).
    """

    patient_id: str
    event_date: int
    values: Mapping[str, Any]


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    label: int
    chd_type: str | None
    trimesters: frozenset[int]
    consolidated_row: Mapping[str, Any]
    image_refs: tuple[str, ...]
    events: tuple[ClinicalEvent, ...] = field(default=(), compare=True)

    def __post_init__(self):
        if self.label not in (CHD, NON_CHD):
            raise ValidationError(f"{self.patient_id}: label must be 0/1, got {self.label!r}")
        if self.label == NON_CHD and self.chd_type:
            raise ValidationError(f"{self.patient_id}: non-CHD patient cannot carry a chd_type")
        if not self.image_refs:
            raise ValidationError(f"{self.patient_id}: patient has no images")
        if not set(self.trimesters) <= {1, 2, 3}:
            raise ValidationError(f"{self.patient_id}: trimesters must be within {{1,2,3}}")

    def images_in_trimester(self, t: int) -> tuple[str, ...]:
        return tuple(i for i in self.image_refs if image_trimester(i) == t)


def image_trimester(image_id: str) -> int | None:
    """Trimester encoded in an image id of the form ``t<k>_<name>``."""
    m = _IMAGE_ID.match(image_id)
    return int(m.group(1)) if m else None


def image_id_for(trimester: int, index: int) -> str:
    return f"t{trimester}_{index:02d}"


def check_image(data: np.ndarray, shape: tuple[int, int, int] | None = None) -> np.ndarray:
    """Validate a C×H×W image array in [0, 1]."""
    data = np.asarray(data)
    if data.ndim != 3:
        raise ValidationError(f"image must be C×H×W, got shape {data.shape}")
    if shape is not None and tuple(data.shape) != tuple(shape):
        raise ValidationError(f"image shape {data.shape} does not match {tuple(shape)}")
    if not np.all(np.isfinite(data)) or data.min() < 0.0 or data.max() > 1.0:
        raise ValidationError("image values must be finite and within [0, 1]")
    return data
