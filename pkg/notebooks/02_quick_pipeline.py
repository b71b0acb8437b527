"""
Quick end-to-end run
====================

Small images and short schedules so the whole cross-validation finishes in
about a minute on one CPU thread. Numbers here are a smoke signal, not a
benchmark; the acceptance suite runs the full preset.
"""

# %%
import torch

from cardium.evaluation import format_mean_std
from cardium.pipeline import evaluate_run, quick_config, train_cv
from cardium.synthetic import generate_synthetic_dataset

torch.set_num_threads(1)
cfg = quick_config()
records, images = generate_synthetic_dataset(cfg.synthetic)

# %% three folds, three stages each
run = train_cv(cfg, records, images)

# %% patient-level F1 per modality
for modality in ("multimodal", "image", "tabular"):
    rep = evaluate_run(cfg, run, records, images, modality)
    print(f"{modality:>10}  F1 {format_mean_std(rep['aggregate']['f1'])}  AUC {format_mean_std(rep['aggregate']['auc'])}")

# %% how much batch composition moves a prediction (fusion attends across the batch)
print("max drift under reshuffled batches:", rep["diagnostics"]["batch_sensitivity_max_drift"])
