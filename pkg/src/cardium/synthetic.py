"""Synthetic multimodal cohort with a planted, documented generative rule.

Each patient carries four binary latents besides the label ``y``:

* ``a`` image marker: an elongated (eccentric) bright blob instead of a
  round one. ``P(a=1 | y=1) = image strength``, ``P(a=1 | y=0) = false_rate``.
* ``b`` tabular marker: shifted nuchal translucency, glucose and heart rate,
  a raised obstetric risk and a family history of heart disease.
  ``P(b=1 | y=1) = tabular strength``, ``P(b=1 | y=0) = false_rate``.
* ``c`` image background brightness (dim/bright), fair coin.
* ``d`` the ``teratogen_exposure`` flag, ``d = c XOR e`` with
  ``P(e=1 | y=1) = interaction strength``, ``P(e=1 | y=0) = false_rate``.

``c`` and ``d`` are each independent of ``y``; only their combination is
informative, so the interaction signal needs both modalities.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .preprocessing import ConsolidationPolicy, consolidate
from .records import CHD_TYPES, ClinicalEvent, PatientRecord, image_id_for
from .schema import BINARY, CATEGORICAL, NUMERICAL, ORDINAL, TabularSchema, default_schema


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class SyntheticConfig:
    n_patients: int = 600
    positive_rate: float = 0.072
    images_per_patient_range: tuple[int, int] = (2, 4)
    image_size: tuple[int, int, int] = (1, 64, 64)
    # (image-only, tabular-only, cross-modal interaction) strengths
    modality_signal: tuple[float, float, float] = (0.7, 0.5, 0.8)
    seed: int = 42
    exact_count: bool = False
    trimester_mix: tuple[float, float, float] = (0.15, 0.45, 0.40)
    second_trimester_rate: float = 0.3
    false_rate: float = 0.01

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not isinstance(self.n_patients, (int, np.integer)) or self.n_patients < 1:
            raise ConfigError("n_patients", "must be a positive integer")
        if not 0.0 < self.positive_rate < 1.0:
            raise ConfigError("positive_rate", "must lie in (0, 1)")
        lo, hi = self.images_per_patient_range
        if lo < 1 or hi < lo:
            raise ConfigError("images_per_patient_range", "need 1 <= min <= max")
        if len(self.image_size) != 3 or min(self.image_size) < 1:
            raise ConfigError("image_size", "must be (C, H, W) with positive entries")
        if self.image_size[1] < 16 or self.image_size[2] < 16:
            raise ConfigError("image_size", "H and W must be at least 16 pixels")
        if len(self.modality_signal) != 3 or not all(0.0 <= s <= 1.0 for s in self.modality_signal):
            raise ConfigError("modality_signal", "three strengths in [0, 1]")
        if self.seed < 0:
            raise ConfigError("seed", "must be unsigned")
        if len(self.trimester_mix) != 3 or min(self.trimester_mix) < 0 or sum(self.trimester_mix) <= 0:
            raise ConfigError("trimester_mix", "three non-negative weights with positive sum")
        if not 0.0 <= self.second_trimester_rate <= 1.0:
            raise ConfigError("second_trimester_rate", "must lie in [0, 1]")
        if not 0.0 <= self.false_rate < 1.0:
            raise ConfigError("false_rate", "must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        kw = dict(d)
        for key in ("images_per_patient_range", "image_size", "modality_signal", "trimester_mix"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


@dataclass(frozen=True)
class Latents:
    y: int
    a: int
    b: int
    c: int
    d: int


@dataclass
class SyntheticDataset:
    records: list[PatientRecord]
    images: dict[str, dict[str, np.ndarray]]
    latents: dict[str, Latents] = field(default_factory=dict)

    def __iter__(self):
        # unpacks as (records, image store)
        return iter((self.records, self.images))


# Canonical categories and the raw spellings the generator may emit for them.
VOCAB = {
    "pathological_history": {
        "vaginal infections": ("vaginitis", "candidiasis", "acute vaginitis", "vaginal infections"),
        "urinary tract infection": ("urinary tract infection", "uti", "urinary infection"),
        "hypothyroidism": ("hypothyroidism", "hypothyroid"),
        "anemia": ("anemia", "anaemia"),
        "asthma": ("asthma",),
        "migraine": ("migraine",),
        "gestational diabetes": ("gestational diabetes", "gdm"),
        "epilepsy": ("epilepsy",),
        "lupus": ("lupus",),
    },
    "hereditary_history": {
        "hypertension": ("hypertension", "high blood pressure"),
        "diabetes": ("diabetes", "diabetes mellitus"),
        "congenital heart disease": ("congenital heart disease", "chd", "heart malformation"),
        "cancer": ("cancer",),
        "thyroid disease": ("thyroid disease",),
        "down syndrome": ("down syndrome",),
        "epilepsy": ("epilepsy",),
    },
    "pharmacological_history": {
        "progesterone": ("progesterone", "progesterone intravaginal", "Progendo"),
        "folic acid": ("folic acid", "folate"),
        "iron supplements": ("iron supplements", "ferrous sulfate"),
        "levothyroxine": ("levothyroxine",),
        "metformin": ("metformin",),
        "aspirin": ("aspirin",),
        "antibiotics": ("antibiotics", "amoxicillin", "cephalexin"),
        "insulin": ("insulin",),
        "methyldopa": ("methyldopa",),
        "valproate": ("valproate",),
    },
}

# per-patient inclusion probability of each canonical category
CATEGORY_RATES = {
    "pathological_history": {
        "vaginal infections": 0.18, "urinary tract infection": 0.15, "hypothyroidism": 0.08,
        "anemia": 0.10, "asthma": 0.05, "migraine": 0.06, "gestational diabetes": 0.05,
        "epilepsy": 0.004, "lupus": 0.003,
    },
    "hereditary_history": {
        "hypertension": 0.25, "diabetes": 0.22, "congenital heart disease": 0.03,
        "cancer": 0.12, "thyroid disease": 0.07, "down syndrome": 0.004, "epilepsy": 0.004,
    },
    "pharmacological_history": {
        "progesterone": 0.12, "folic acid": 0.55, "iron supplements": 0.35, "levothyroxine": 0.07,
        "metformin": 0.04, "aspirin": 0.08, "antibiotics": 0.12, "insulin": 0.02,
        "methyldopa": 0.005, "valproate": 0.003,
    },
}


def default_alias_map() -> dict[str, dict[str, str]]:
    """Alias table mapping each raw spelling to its canonical category."""
    return {
        feat: {raw: canon for canon, raws in cats.items() for raw in raws if raw != canon}
        for feat, cats in VOCAB.items()
    }


# (mean, sd) of each numerical feature; shift is applied in sd units when b=1
NUMERIC_PARAMS = {
    "maternal_age": (30.0, 5.5), "bmi": (25.0, 4.0), "weight": (64.0, 11.0), "height": (160.0, 7.0),
    "systolic_bp": (112.0, 11.0), "diastolic_bp": (72.0, 8.0), "heart_rate": (82.0, 9.0),
    "glucose": (90.0, 15.0), "hemoglobin": (12.3, 1.1), "gravidity": (2.2, 1.2),
    "parity": (1.0, 0.9), "nuchal_translucency": (1.8, 0.45),
}
MARKER_SHIFTS = {"nuchal_translucency": 1.8, "glucose": 1.4, "heart_rate": 1.2}

BINARY_RATES = {
    "chromosomal_abnormality": 0.03, "smoking": 0.10, "alcohol": 0.08,
    "first_trimester_screening": 0.70, "assisted_reproduction": 0.06,
    "pregestational_diabetes": 0.05, "chronic_hypertension": 0.07,
}
ORDINAL_RATES = {
    "obstetric_risk": (0.55, 0.30, 0.15),
    "preeclampsia_risk": (0.60, 0.28, 0.12),
    "education_level": (0.25, 0.45, 0.30),
}
SIGNAL_FEATURES = frozenset(MARKER_SHIFTS) | {"teratogen_exposure", "obstetric_risk"}


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _draw_labels(cfg: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.exact_count:
        n_pos = _round_half_up(cfg.n_patients * cfg.positive_rate)
        y = np.zeros(cfg.n_patients, dtype=np.int64)
        y[rng.permutation(cfg.n_patients)[:n_pos]] = 1
        return y
    return (rng.random(cfg.n_patients) < cfg.positive_rate).astype(np.int64)


def _draw_latents(y: int, cfg: SyntheticConfig, rng: np.random.Generator) -> Latents:
    s_img, s_tab, s_x = cfg.modality_signal
    q = cfg.false_rate
    u = rng.random(4)
    a = int(u[0] < (s_img if y else q))
    b = int(u[1] < (s_tab if y else q))
    e = int(u[2] < (s_x if y else q))
    c = int(u[3] < 0.5)
    return Latents(y=y, a=a, b=b, c=c, d=c ^ e)


def render_image(a: int, c: int, size: tuple[int, int, int], rng: np.random.Generator) -> np.ndarray:
    """Grayscale frame: speckled background, a ring distractor and the blob
    marker. Eccentric blob iff ``a``; bright background iff ``c``."""
    C, H, W = size
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    scale = H / 64.0
    img = np.full((H, W), 0.12 + 0.16 * c)
    # ring distractor
    cy, cx = rng.uniform(0.25 * H, 0.75 * H), rng.uniform(0.25 * W, 0.75 * W)
    r = np.hypot(yy - cy, xx - cx)
    radius = rng.uniform(12, 18) * scale
    img += 0.15 * np.exp(-((r - radius) ** 2) / (2 * (1.5 * scale) ** 2))
    # blob marker, equal area in both shapes
    by, bx = rng.uniform(0.3 * H, 0.7 * H), rng.uniform(0.3 * W, 0.7 * W)
    if a:
        s_major, s_minor = 11.0 * scale, 1.6 * scale
    else:
        s_major = s_minor = math.sqrt(11.0 * 1.6) * scale
    theta = rng.uniform(-math.pi / 8, math.pi / 8)
    dy, dx = yy - by, xx - bx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    img += 0.6 * np.exp(-(u**2 / (2 * s_major**2) + v**2 / (2 * s_minor**2)))
    img += rng.normal(0.0, 0.04, size=(H, W))
    img = np.clip(img, 0.0, 1.0)
    # quantize to what an 8-bit PNG stores
    img = np.round(img * 255.0) / 255.0
    return np.repeat(img[None].astype(np.float32), C, axis=0)


def _true_row(lat: Latents, schema: TabularSchema, rng: np.random.Generator) -> dict:
    row: dict = {}
    for name, (mu, sd) in NUMERIC_PARAMS.items():
        shift = MARKER_SHIFTS.get(name, 0.0) * lat.b
        row[name] = float(mu + sd * (rng.normal() + shift))
    row["gravidity"] = float(1 + rng.poisson(1.2))
    row["parity"] = float(min(row["gravidity"] - 1, rng.binomial(int(row["gravidity"]), 0.45)))
    row["weight"] = float(row["bmi"] * (row["height"] / 100.0) ** 2)
    for name, p in BINARY_RATES.items():
        row[name] = int(rng.random() < p)
    row["teratogen_exposure"] = lat.d
    for name, probs in ORDINAL_RATES.items():
        levels = schema[name].ordinal_levels
        row[name] = levels[rng.choice(3, p=probs)]
    if lat.b and rng.random() < 0.7:
        row["obstetric_risk"] = "high"
    for feat, rates in CATEGORY_RATES.items():
        cats = {c for c, p in rates.items() if rng.random() < p}
        if feat == "hereditary_history" and lat.b and rng.random() < 0.5:
            cats.add("congenital heart disease")
        row[feat] = cats
    return row


def _emit_events(pid: str, row: dict, schema: TabularSchema, rng: np.random.Generator) -> tuple[ClinicalEvent, ...]:
    """Scatter a true row over 1-4 dated notes with per-event noise and gaps."""
    n_ev = int(rng.integers(1, 5))
    dates = np.sort(rng.choice(280, size=n_ev, replace=False))
    vals: list[dict] = [{} for _ in range(n_ev)]
    for spec in schema:
        name, true = spec.name, row[spec.name]
        protected = name in SIGNAL_FEATURES
        if not protected and rng.random() < 0.04:
            continue  # missing for this patient
        carrier = int(rng.integers(n_ev))
        if spec.kind == NUMERICAL:
            mu, sd = NUMERIC_PARAMS[name]
            for i in range(n_ev):
                if i == carrier or rng.random() < 0.7:
                    v = true + rng.normal(0.0, 0.2 * sd)
                    if not protected and rng.random() < 0.01:
                        v = spec.valid_range[1] * 1.5  # out-of-range entry
                    vals[i][name] = round(float(v), 3)
        elif spec.kind == BINARY:
            for i in range(n_ev):
                if i == carrier:
                    vals[i][name] = true
                elif rng.random() < 0.6:
                    vals[i][name] = int(true and rng.random() < 0.5)
        elif spec.kind == ORDINAL:
            top = spec.level_index(true)
            for i in range(n_ev):
                if i == carrier:
                    vals[i][name] = true
                elif rng.random() < 0.5:
                    vals[i][name] = spec.ordinal_levels[int(rng.integers(top + 1))]
        elif spec.kind == CATEGORICAL:
            spellings = VOCAB[name]
            per_event: list[list[str]] = [[] for _ in range(n_ev)]
            for cat in sorted(true):
                raws = spellings[cat]
                per_event[int(rng.integers(n_ev))].append(raws[int(rng.integers(len(raws)))])
            for i, entries in enumerate(per_event):
                if entries:
                    vals[i][name] = tuple(sorted(set(entries)))
    return tuple(ClinicalEvent(pid, int(d), v) for d, v in zip(dates, vals))


def _trimesters(cfg: SyntheticConfig, n_images: int, rng: np.random.Generator) -> list[int]:
    mix = np.asarray(cfg.trimester_mix, dtype=float)
    first = int(rng.choice(3, p=mix / mix.sum())) + 1
    tri = [first]
    if n_images > 1 and rng.random() < cfg.second_trimester_rate:
        tri.append(int(rng.choice([t for t in (1, 2, 3) if t != first])))
    assigned = list(tri) + [tri[int(rng.integers(len(tri)))] for _ in range(n_images - len(tri))]
    return sorted(assigned)


def generate_synthetic_dataset(
    cfg: SyntheticConfig,
    schema: TabularSchema | None = None,
    policy: ConsolidationPolicy = ConsolidationPolicy(),
) -> SyntheticDataset:
    """Deterministic cohort for ``cfg.seed``; unpacks as ``(records, images)``."""
    cfg.validate()
    schema = schema or default_schema()
    rng = np.random.default_rng(cfg.seed)
    labels = _draw_labels(cfg, rng)
    width = len(str(cfg.n_patients - 1))
    records, images, latents = [], {}, {}
    lo, hi = cfg.images_per_patient_range
    for i, y in enumerate(labels):
        pid = f"P{i:0{max(width, 4)}d}"
        lat = _draw_latents(int(y), cfg, rng)
        row = _true_row(lat, schema, rng)
        events = _emit_events(pid, row, schema, rng)
        n_img = int(rng.integers(lo, hi + 1))
        tri = _trimesters(cfg, n_img, rng)
        store = {}
        for j, t in enumerate(tri):
            store[image_id_for(t, j)] = render_image(lat.a, lat.c, cfg.image_size, rng)
        chd_type = CHD_TYPES[int(rng.integers(len(CHD_TYPES)))] if y else None
        records.append(
            PatientRecord(
                patient_id=pid,
                label=int(y),
                chd_type=chd_type,
                trimesters=frozenset(tri),
                consolidated_row=consolidate(events, schema, policy),
                image_refs=tuple(store),
                events=events,
            )
        )
        images[pid] = store
        latents[pid] = lat
    return SyntheticDataset(records, images, latents)


# --------------------------------------------------------------------------
# analytic reference for the planted rule


def latent_joint(cfg: SyntheticConfig):
    """Yield ``(prob, y, a, b, c, d)`` over every latent configuration."""
    s_img, s_tab, s_x = cfg.modality_signal
    q = cfg.false_rate
    for y, a, b, c, e in itertools.product((0, 1), repeat=5):
        py = cfg.positive_rate if y else 1.0 - cfg.positive_rate
        pa = (s_img if y else q) if a else 1.0 - (s_img if y else q)
        pb = (s_tab if y else q) if b else 1.0 - (s_tab if y else q)
        pe = (s_x if y else q) if e else 1.0 - (s_x if y else q)
        yield py * pa * pb * 0.5 * pe, y, a, b, c, c ^ e


def bayes_accuracy(cfg: SyntheticConfig, image: bool = True, tabular: bool = True) -> float:
    """Accuracy of the Bayes-optimal rule that sees the image latents
    ``(a, c)`` and/or the tabular latents ``(b, d)``."""
    mass: dict = {}
    for p, y, a, b, c, d in latent_joint(cfg):
        key = ((a, c) if image else ()) + ((b, d) if tabular else ())
        mass.setdefault(key, [0.0, 0.0])[y] += p
    return math.fsum(max(v) for v in mass.values())
