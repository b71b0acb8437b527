import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cardium.fusion import (VARIANTS, DualDecoderFusion, FusionBatch, FusionConfig, FusionModel, build_core,
                            canonical_order)
from oracles import dual_decoder_logits, mlp_fusion_logits


def hand_set(model: FusionModel) -> dict[str, np.ndarray]:
    """Deterministic non-random weights: parameter i, element j = sin(0.7(i+1) + 0.31j), in sorted-name order."""
    params = dict(model.named_parameters())
    out = {}
    with torch.no_grad():
        for i, name in enumerate(sorted(params)):
            p = params[name]
            vals = torch.tensor([math.sin(0.7 * (i + 1) + 0.31 * j) for j in range(p.numel())], dtype=torch.float64)
            p.copy_(vals.view_as(p))
            out[name] = vals.view(p.shape).numpy().copy()
    return out


def tiny(variant="dual-decoder", d=2, layers=1, heads=1) -> FusionModel:
    cfg = FusionConfig(variant=variant, layers=layers, heads=heads, shared_dim=d, mlp_hidden=(4, 3),
                       image_dim=d, tabular_dim=d, dropout=0.1)
    return FusionModel(cfg).double().eval()


Z_IMG = [[0.5, -1.0], [2.0, 0.25], [-0.3, 0.9]]
Z_TAB = [[-0.75, 1.5], [0.0, -2.0], [1.1, 0.4]]


def test_dual_decoder_matches_unbatched_oracle():
    model = tiny()
    p = hand_set(model)
    zi, zt = torch.tensor(Z_IMG, dtype=torch.float64), torch.tensor(Z_TAB, dtype=torch.float64)
    got = model(zi, zt).detach().numpy()[:, 0]
    want = [float(v[0]) for v in dual_decoder_logits(p, [np.array(r) for r in Z_IMG], [np.array(r) for r in Z_TAB], 1)]
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-10)


def test_mlp_variant_golden():
    # literals from tests/oracles.py::mlp_fusion_logits with hand_set weights
    model = tiny("mlp")
    p = hand_set(model)
    zi, zt = torch.tensor(Z_IMG[:2], dtype=torch.float64), torch.tensor(Z_TAB[:2], dtype=torch.float64)
    got = model(zi, zt).detach().numpy()[:, 0]
    np.testing.assert_allclose(got, [-0.2134037221669411, -0.3399605116876196], atol=1e-12)
    ref = mlp_fusion_logits(p, [np.array(r) for r in Z_IMG[:2]], [np.array(r) for r in Z_TAB[:2]])
    np.testing.assert_allclose(got, [float(v[0]) for v in ref], atol=1e-12)


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("classes", [1, 6])
def test_output_shapes(variant, classes):
    cfg = FusionConfig(variant=variant, classes=classes, layers=1, shared_dim=16, image_dim=24, tabular_dim=12,
                       mlp_hidden=(8, 4))
    m = FusionModel(cfg).eval()
    logits = m(torch.randn(5, 24), torch.randn(5, 12))
    assert logits.shape == (5, classes)
    probs = m.probabilities(logits)
    if classes > 1:
        torch.testing.assert_close(probs.sum(-1), torch.ones(5))
    assert m.fused(torch.randn(5, 24), torch.randn(5, 12)).shape[0] == 5


def test_misaligned_embeddings_are_rejected():
    m = FusionModel(FusionConfig(shared_dim=8, image_dim=8, tabular_dim=8, layers=1))
    with pytest.raises(ValueError):
        m(torch.randn(4, 8), torch.randn(3, 8))
    with pytest.raises(ValueError):
        FusionBatch(torch.randn(4, 8), torch.randn(3, 8))
    with pytest.raises(ValueError):
        FusionConfig(variant="late")
    with pytest.raises(ValueError):
        FusionConfig(shared_dim=7, heads=2)


def test_fusion_config_published_preset():
    cfg = FusionConfig.published()
    assert (cfg.layers, cfg.heads, cfg.dropout) == (8, 2, 0.4)


def test_key_values_are_the_encoder_embeddings():
    """Hook every cross-attention: K/V inputs must be the projected embedding of the other modality."""
    torch.manual_seed(0)
    m = tiny(d=8, layers=3, heads=2)
    zi, zt = torch.randn(6, 8, dtype=torch.float64), torch.randn(6, 8, dtype=torch.float64)
    seen = []

    def grab(stack):
        def hook(_mod, args):
            _query, key, value = args
            seen.append((stack, key.squeeze(0).clone(), value.squeeze(0).clone()))
        return hook

    handles = [layer.cross_attn.register_forward_pre_hook(grab("image")) for layer in m.core.image_stack]
    handles += [layer.cross_attn.register_forward_pre_hook(grab("tabular")) for layer in m.core.tabular_stack]
    m(zi, zt)
    for h in handles:
        h.remove()

    order = canonical_order(zi, zt)  # the model runs rows in this order
    pi, pt = m.project(zi[order], zt[order])
    assert len(seen) == 6
    for stack, k, v in seen:
        expected = pt if stack == "image" else pi
        assert torch.equal(k, expected) and torch.equal(v, expected)


def test_zero_value_projection_isolates_the_stacks():
    # with the cross-attention value/output maps zeroed, the image stream ignores Z_T entirely
    torch.manual_seed(1)
    m = tiny(d=8, layers=2, heads=2)
    with torch.no_grad():
        for layer in m.core.image_stack:
            layer.cross_attn.v.weight.zero_()
            layer.cross_attn.v.bias.zero_()
            layer.cross_attn.out.bias.zero_()
    zi = torch.randn(5, 8, dtype=torch.float64)
    a, _ = m.core.refine(*m.project(zi, torch.randn(5, 8, dtype=torch.float64)))
    b, _ = m.core.refine(*m.project(zi, torch.randn(5, 8, dtype=torch.float64)))
    assert torch.equal(a, b)


def test_image_stream_depends_on_tabular_embedding():
    torch.manual_seed(2)
    m = tiny(d=8, layers=2, heads=2)
    zi = torch.randn(5, 8, dtype=torch.float64)
    zt = torch.randn(5, 8, dtype=torch.float64)
    a, _ = m.core.refine(*m.project(zi, zt))
    b, _ = m.core.refine(*m.project(zi, zt + 0.5))
    assert not torch.allclose(a, b)


@pytest.mark.parametrize("variant", [v for v in VARIANTS if v != "mlp"])
def test_attention_couples_samples_in_a_batch(variant):
    torch.manual_seed(3)
    m = tiny(variant, d=8, heads=2)
    zi, zt = torch.randn(4, 8, dtype=torch.float64), torch.randn(4, 8, dtype=torch.float64)
    base = m(zi, zt)
    zi2 = zi.clone()
    zi2[3] += 1.0
    zt2 = zt.clone()
    zt2[3] += 1.0
    moved = m(zi2, zt2)
    assert not torch.allclose(base[0], moved[0])  # row 0 sees row 3 through attention


@pytest.mark.parametrize("variant", VARIANTS)
def test_batch_of_one_is_per_sample(variant):
    torch.manual_seed(4)
    m = tiny(variant, d=8, heads=2)
    zi, zt = torch.randn(3, 8, dtype=torch.float64), torch.randn(3, 8, dtype=torch.float64)
    singles = torch.cat([m(zi[i:i + 1], zt[i:i + 1]) for i in range(3)])
    again = torch.cat([m(zi[i:i + 1], zt[i:i + 1]) for i in range(3)])
    assert torch.equal(singles, again)
    if variant == "mlp":
        torch.testing.assert_close(singles, m(zi, zt), rtol=0, atol=1e-12)


@settings(max_examples=40)
@given(b=st.integers(1, 8), seed=st.integers(0, 10_000), variant=st.sampled_from(VARIANTS),
       dtype=st.sampled_from([torch.float32, torch.float64]))
def test_row_permutation_equivariance(b, seed, variant, dtype):
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    m = tiny(variant, d=8, layers=2, heads=2).to(dtype)
    zi = torch.randn(b, 8, generator=g, dtype=dtype)
    zt = torch.randn(b, 8, generator=g, dtype=dtype)
    perm = torch.randperm(b, generator=g)
    with torch.no_grad():
        assert torch.equal(m(zi[perm], zt[perm]), m(zi, zt)[perm])
        assert torch.equal(m.fused(zi[perm], zt[perm]), m.fused(zi, zt)[perm])


def test_canonical_order_is_permutation_invariant():
    zi = torch.tensor([[1.0, 0.0], [0.0, 5.0], [1.0, -1.0]])
    zt = torch.zeros(3, 2)
    order = canonical_order(zi, zt)
    assert order.tolist() == [1, 2, 0]
    perm = torch.tensor([2, 0, 1])
    assert torch.equal(zi[perm][canonical_order(zi[perm], zt)], zi[order])


def test_build_core_has_no_projection():
    core = build_core(FusionConfig(shared_dim=8, layers=1))
    assert isinstance(core, DualDecoderFusion)
    assert not any("proj" in n for n, _ in core.named_parameters())


def test_fused_tap_is_mean_of_refined_streams():
    torch.manual_seed(5)
    m = tiny(d=8, heads=2)
    zi, zt = torch.randn(4, 8, dtype=torch.float64), torch.randn(4, 8, dtype=torch.float64)
    a, b = m.core.refine(*m.project(zi, zt))
    torch.testing.assert_close(m.fused(zi, zt), 0.5 * (a + b))
