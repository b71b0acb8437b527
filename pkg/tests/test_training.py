import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from cardium.encoders import TabularEncoder, TabularEncoderConfig, attach_head
from cardium.fusion import FusionConfig, FusionModel
from cardium.training import (History, StageData, TrainConfig, TrainingError, build_sampler, fit,
                              mine_hard_positives, parameter_checksum, train_fusion, train_unimodal, weighted_bce)


def test_sampler_weights_are_inverse_class_frequency():
    labels = [1] * 10 + [0] * 90
    s = build_sampler(labels)
    assert s.weights[0] == pytest.approx(0.1)
    assert s.weights[-1] == pytest.approx(1 / 90)
    draws = s.draw(np.random.default_rng(0), 100_000)
    assert abs(np.mean(np.asarray(labels)[draws]) - 0.5) < 0.01


def test_sampler_none_is_uniform_and_single_class_fails():
    assert np.all(build_sampler([0, 1, 1]).weights > 0)
    assert np.all(build_sampler([0, 1, 1], "none").weights == 1)
    with pytest.raises(TrainingError):
        build_sampler([0, 0, 0])


def test_weighted_bce_value():
    # a single positive at logit 0: 1.2 * ln 2
    loss = weighted_bce(torch.zeros(1), torch.ones(1), 1.2)
    assert loss.item() == pytest.approx(1.2 * math.log(2), abs=1e-7)
    assert loss.item() == pytest.approx(0.8318, abs=1e-4)


@given(st.lists(st.tuples(st.floats(-6, 6), st.integers(0, 1)), min_size=1, max_size=20),
       st.floats(0.5, 3.0))
def test_weighted_bce_decomposes_by_class(pairs, factor):
    logits = torch.tensor([p[0] for p in pairs], dtype=torch.float64)
    y = torch.tensor([p[1] for p in pairs], dtype=torch.float64)
    per = torch.nn.functional.binary_cross_entropy_with_logits(logits, y, reduction="none")
    expected = (factor * per[y == 1].sum() + per[y == 0].sum()) / len(pairs)
    assert weighted_bce(logits, y, factor).item() == pytest.approx(expected.item(), rel=1e-12, abs=1e-12)


def test_mining_boosts_missed_positives_only():
    s = build_sampler([1, 1, 0, 0])
    mined = mine_hard_positives(s, [0.2, 0.9, 0.1, 0.8], boost=2.0, cap=32.0)
    np.testing.assert_allclose(mined.weights, [1.0, 0.5, 0.5, 0.5])
    assert np.array_equal(s.weights, s.base)  # original untouched


@given(st.lists(st.floats(0, 1), min_size=4, max_size=4), st.integers(1, 12))
def test_mining_is_monotone_and_capped(probs, rounds):
    s = build_sampler([1, 1, 0, 1])
    for _ in range(rounds):
        nxt = mine_hard_positives(s, probs, boost=2.0, cap=8.0)
        assert np.all(nxt.weights >= s.weights)
        s = nxt
    assert np.all(s.weights <= s.base * 8.0 + 1e-15)
    assert np.array_equal(s.weights[2:3], s.base[2:3])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(stage="late")
    with pytest.raises(ValueError):
        TrainConfig(pos_loss_factor=0)
    assert TrainConfig.published_fusion().learning_rate == 5e-7


def _toy_tabular(n=120, seed=0):
    g = np.random.default_rng(seed)
    y = (np.arange(n) % 4 == 0).astype(int)
    x = g.normal(size=(n, 6)).astype(np.float32)
    x[:, 0] += 2.5 * y
    return torch.from_numpy(x), y


def test_unimodal_training_is_deterministic():
    x, y = _toy_tabular()
    data = StageData((x,), y, np.arange(len(y)))
    cfg = TrainConfig(stage="tabular", epochs=3, learning_rate=1e-3, seed=7)
    outs = []
    for _ in range(2):
        torch.manual_seed(0)
        clf = attach_head(TabularEncoder(TabularEncoderConfig(n_features=6, token_dim=4, output_dim=8, heads=2)))
        hist = train_unimodal(clf, data, cfg)
        outs.append((parameter_checksum(clf), hist.train_loss))
    assert outs[0] == outs[1]


def test_history_csv_round_trip(tmp_path):
    h = History()
    h.add(1, 0.5, None)
    h.add(2, 0.25, 0.75)
    h.to_csv(tmp_path / "h.csv")
    assert History.from_csv(tmp_path / "h.csv") == h


def test_fusion_stage_freezes_encoders_and_learns():
    x, y = _toy_tabular(200)
    img_like = x.flip(1)  # a second "modality" carrying the same signal
    torch.manual_seed(0)
    enc_a = TabularEncoder(TabularEncoderConfig(n_features=6, token_dim=4, output_dim=8, heads=2))
    enc_b = TabularEncoder(TabularEncoderConfig(n_features=6, token_dim=4, output_dim=8, heads=2))
    fusion = FusionModel(FusionConfig(layers=1, shared_dim=8, image_dim=8, tabular_dim=8, mlp_hidden=(8, 4)))
    before = (parameter_checksum(enc_a), parameter_checksum(enc_b))
    data = StageData((img_like[:150], x[:150]), y[:150], np.arange(150),
                     (img_like[150:], x[150:]), y[150:], np.arange(150, 200))
    hist = train_fusion(fusion, enc_a, enc_b, data, TrainConfig(stage="fusion", epochs=15, learning_rate=3e-3))
    assert (parameter_checksum(enc_a), parameter_checksum(enc_b)) == before
    assert not any(p.requires_grad for p in enc_a.parameters())
    # regression bound: random encoders still expose feature 0, which fusion must pick up
    assert hist.val_f1[-1] is not None and hist.val_f1[-1] > 0.5


def test_fusion_stage_detects_encoder_mutation():
    x, y = _toy_tabular(40)
    enc = TabularEncoder(TabularEncoderConfig(n_features=6, token_dim=4, output_dim=8, heads=2))
    fusion = FusionModel(FusionConfig(layers=1, shared_dim=8, image_dim=8, tabular_dim=8, mlp_hidden=(8, 4)))

    orig = fusion.forward
    # a fusion forward that tampers with the frozen encoder behind the optimiser's back
    fusion.forward = lambda a, b: (enc.proj.bias.data.add_(1.0), orig(a, b))[1]
    with pytest.raises(TrainingError, match="encoder parameters changed"):
        train_fusion(fusion, enc, enc, StageData((x, x), y, np.arange(40)), TrainConfig(stage="fusion", epochs=1))


def test_non_finite_loss_aborts():
    x, y = _toy_tabular(16)
    model = torch.nn.Linear(6, 1)
    with pytest.raises(TrainingError, match="non-finite"):
        fit(model, lambda a: model(a) * float("nan"), StageData((x,), y, np.arange(16)),
            TrainConfig(stage="tabular", epochs=1))
