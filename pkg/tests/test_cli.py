import csv
import json

import numpy as np
import pytest

from cardium.cli import export_rows, main
from cardium.pipeline import RunConfig, quick_config


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "quick.json"
    quick_config(run_dir=str(root / "run")).save(cfg_path)
    base = ["--config", str(cfg_path)]
    assert main(["generate", *base]) == 0
    assert main(["train", *base, "--stage", "all"]) == 0
    return root, base


def err(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_generate_writes_dataset_and_config(run):
    root, _ = run
    assert (root / "run" / "data" / "events.csv").exists()
    saved = RunConfig.load(root / "run" / "config.json")
    assert saved.synthetic.n_patients == 150


def test_train_writes_fold_checkpoints(run):
    root, _ = run
    for k in range(3):
        d = root / "run" / f"fold_{k}"
        for stage in ("image", "tabular", "fusion"):
            assert (d / stage / "checkpoint.npz").exists() and (d / stage / "history.csv").exists()


def test_preprocess(run):
    root, base = run
    assert main(["preprocess", *base, "--fold", "1"]) == 0
    rows = list(csv.DictReader(open(root / "run" / "preprocess" / "fold_1_encoded.csv")))
    assert len(rows) == 150 and len(rows[0]) == 28  # id, fold, 26 features


@pytest.mark.parametrize("modality", ["multimodal", "image", "tabular"])
def test_evaluate_writes_report(run, modality):
    root, base = run
    assert main(["evaluate", *base, "--modality", modality]) == 0
    rep = json.loads((root / "run" / "reports" / f"{modality}.json").read_text())
    assert rep["modality"] == modality and len(rep["folds"]) == 3
    assert (root / "run" / "reports" / f"{modality}.csv").exists()


def test_evaluate_is_reproducible(run):
    root, base = run
    path = root / "run" / "reports" / "multimodal.json"
    main(["evaluate", *base])
    first = path.read_bytes()
    main(["evaluate", *base])
    assert path.read_bytes() == first


@pytest.mark.parametrize("tap,width", [("fused", 32), ("image-encoder", 32), ("tabular-encoder", 32)])
def test_export_embeddings(run, tap, width):
    root, base = run
    assert main(["export-embeddings", *base, "--tap", tap]) == 0
    rows = list(csv.reader(open(root / "run" / "embeddings" / f"{tap}.csv")))
    assert rows[0][:3] == ["patient_id", "label", "z0"]
    assert len(rows) == 151 and all(len(r) == width + 2 for r in rows)


def test_export_rows_shape():
    rows = export_rows([f"P{i}" for i in range(100)], [i % 2 for i in range(100)], np.zeros((100, 64)))
    assert len(rows) == 100 and len(rows[0]) == 66


def test_ablate_fusion_variants(run, capsys):
    root, base = run
    assert main(["ablate", *base, "--fusion-variant", "all"]) == 0
    table = json.loads(capsys.readouterr().out)
    assert [r["label"] for r in table] == ["dual-decoder", "mlp", "encoder", "decoder", "encoder-cross"]
    assert all("published_f1" in r for r in table)
    assert len(list(csv.reader(open(root / "run" / "ablations" / "fusion_variants.csv")))) == 6


def test_ablate_without_choice_fails(run, capsys):
    _, base = run
    assert main(["ablate", *base]) == 2
    assert err(capsys)["code"] == "no_ablation"


def test_fusion_stage_without_encoders(tmp_path, capsys):
    cfg_path = tmp_path / "c.json"
    quick_config(run_dir=str(tmp_path / "r")).save(cfg_path)
    assert main(["generate", "--config", str(cfg_path)]) == 0
    assert main(["train", "--config", str(cfg_path), "--stage", "fusion", "--fold", "0"]) == 2
    assert err(capsys)["code"] == "missing_checkpoint"


def test_missing_dataset(tmp_path, capsys):
    assert main(["evaluate", "--run-dir", str(tmp_path / "empty")]) == 2
    assert err(capsys)["code"] == "missing_dataset"


def test_invalid_fold(run, capsys):
    _, base = run
    assert main(["train", *base, "--fold", "7"]) == 2
    assert err(capsys) == {"code": "invalid_fold", "field": "fold",
                           "message": "fold must lie in [0, 2] or be 'all'"}


def test_config_errors_are_all_reported(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"folds": 1, "woe_eps": -1, "colour": "red"}))
    assert main(["generate", "--config", str(bad)]) == 2
    e = err(capsys)
    assert e["code"] == "config_invalid"
    assert {x["field"] for x in e["errors"]} == {"folds", "woe_eps", "colour"}


def test_config_not_found_and_unparseable(tmp_path, capsys):
    assert main(["generate", "--config", str(tmp_path / "nope.json")]) == 2
    assert err(capsys)["code"] == "config_not_found"
    (tmp_path / "x.json").write_text("{")
    assert main(["generate", "--config", str(tmp_path / "x.json")]) == 2
    assert err(capsys)["code"] == "config_parse"


def test_seed_precedence(tmp_path, monkeypatch, capsys):
    cfg_path = tmp_path / "c.json"
    quick_config(run_dir=str(tmp_path / "r"), seed=3).save(cfg_path)
    monkeypatch.setenv("CARDIUM_SEED", "11")
    main(["generate", "--config", str(cfg_path), "--seed", "5"])
    assert RunConfig.load(tmp_path / "r" / "config.json").seed == 5
    main(["generate", "--config", str(cfg_path)])
    assert RunConfig.load(tmp_path / "r" / "config.json").seed == 11
    monkeypatch.delenv("CARDIUM_SEED")
    main(["generate", "--config", str(cfg_path)])
    assert RunConfig.load(tmp_path / "r" / "config.json").seed == 3
    monkeypatch.setenv("CARDIUM_SEED", "eleven")
    assert main(["generate", "--config", str(cfg_path)]) == 2
    assert err(capsys)["code"] == "invalid_seed"


def test_staged_training_matches_one_shot(tmp_path, run):
    root, _ = run
    cfg_path = tmp_path / "c.json"
    quick_config(run_dir=str(tmp_path / "r")).save(cfg_path)
    base = ["--config", str(cfg_path)]
    main(["generate", *base])
    for stage in ("image", "tabular", "fusion"):
        assert main(["train", *base, "--stage", stage, "--fold", "0"]) == 0
    for stage in ("image", "tabular", "fusion"):
        staged = (tmp_path / "r" / "fold_0" / stage / "history.csv").read_text()
        assert staged == (root / "run" / "fold_0" / stage / "history.csv").read_text()
