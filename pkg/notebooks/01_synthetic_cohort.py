"""
Synthetic cohort walkthrough
============================

What the planted generator produces, and how much each modality can know.
Run with ``python notebooks/01_synthetic_cohort.py``; cells are delimited
by ``# %%`` so editors that understand them can step through.
"""

# %%
from collections import Counter

import numpy as np

from cardium.synthetic import SyntheticConfig, bayes_accuracy, generate_synthetic_dataset

cfg = SyntheticConfig(exact_count=True)
records, images = generate_synthetic_dataset(cfg)
print(len(records), "patients,", sum(r.label for r in records), "positive")

# %% trimester coverage and images per patient
print(Counter(tuple(sorted(r.trimesters)) for r in records).most_common())
print(Counter(len(r.image_refs) for r in records))

# %% the marker blob is elongated; negatives mostly carry a round one
def show(img, width=32):
    step = img.shape[-1] // width
    ramp = " .:-=+*#%@"
    for row in img[0, ::step * 2, ::step]:
        print("".join(ramp[min(int(v * len(ramp)), len(ramp) - 1)] for v in row))

pos = next(r for r in records if r.label)
show(images[pos.patient_id][pos.image_refs[0]])

# %% ceiling for each view: Bayes accuracy of the latent marker bits
for name, kw in [("both", {}), ("image only", {"tabular": False}), ("tabular only", {"image": False})]:
    print(f"{name:>13}: {bayes_accuracy(cfg, **kw):.4f}")

# %% the interaction term: teratogen flag vs background brightness
d = np.array([r.consolidated_row["teratogen_exposure"] for r in records])
y = np.array([r.label for r in records])
print("P(y=1 | flag=1) =", y[d == 1].mean().round(3), " P(y=1 | flag=0) =", y[d == 0].mean().round(3))
