import numpy as np
import pytest
import torch

from moc_xtalk.models import (CompoundFaultModel, CrossTalkLayer, FeatureExtractor,
                              ModelSpec, TaskHead, build_model, ctl_forward,
                              model_forward, param_count, tsl_forward)
from moc_xtalk.ndcore import NormSpec


def _x(batch, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(batch, 1, 80, 48, generator=gen)


@pytest.mark.parametrize("batch", [1, 16])
def test_feature_extractor_shape_ladder(batch):
    ex = FeatureExtractor(ModelSpec())
    ex.eval()
    y = ex.input_norm(_x(batch))
    assert y.shape == (batch, 1, 80, 48)
    y = ex.blocks[0](y)
    assert y.shape == (batch, 32, 40, 24)
    y = ex.blocks[1](y)
    assert y.shape == (batch, 64, 20, 12)
    y = ex.blocks[2](y)
    assert y.shape == (batch, 128, 1, 1)
    assert ex(_x(batch)).shape == (batch, 128)


def test_extractor_rows_independent_in_eval():
    ex = FeatureExtractor(ModelSpec())
    ex.eval()
    x = _x(4, seed=1)
    x[2] = x[0]
    feats = ex(x)
    assert torch.equal(feats[2], feats[0])


def test_extractor_zero_params_zero_features():
    ex = FeatureExtractor(ModelSpec())
    with torch.no_grad():
        for p in ex.parameters():
            p.zero_()
    ex.eval()
    assert torch.all(ex(_x(2)) == 0)


def test_tsl_zero_params_uniform_probs():
    head = TaskHead(36)
    with torch.no_grad():
        for p in head.parameters():
            p.zero_()
    z, probs = tsl_forward(head, torch.randn(5, 128))
    assert torch.allclose(probs, torch.full_like(probs, 1.0 / 36))
    assert torch.all(z >= 0)


def test_tsl_rows_are_distributions():
    head = TaskHead(3)
    _, probs = head(torch.randn(7, 128))
    assert torch.allclose(probs.sum(dim=1), torch.ones(7), atol=1e-5)
    assert torch.all(probs >= 0)


def test_ctl_shape_and_nonnegativity():
    layer = CrossTalkLayer(channels=32, kernel=1)
    others = [torch.randn(16, 32, 40, 24) for _ in range(3)]
    out = ctl_forward(layer, others)
    assert out.shape == (16, 32, 40, 24)
    assert torch.all(out >= 0)
    with pytest.raises(ValueError):
        ctl_forward(layer, [others[0], others[1], torch.randn(16, 32, 20, 12)])


def test_ctl_zeroed_reduces_to_stl():
    spec_stl = ModelSpec(variant="MOC_STL")
    spec_ct = ModelSpec(variant="CROSSTALK")
    stl = build_model(spec_stl, seed=3)
    ct = build_model(spec_ct, seed=4)
    # transplant the STL weights, zero the cross-talk convs
    for i in range(4):
        ct.extractors[i].load_state_dict(stl.extractors[i].state_dict())
        ct.heads[i].load_state_dict(stl.heads[i].state_dict())
    with torch.no_grad():
        for junction in ct.ctl:
            for layer in junction:
                layer.conv.weight.zero_()
                layer.conv.bias.zero_()
    stl.eval()
    ct.eval()
    for seed in range(5):
        x = _x(3, seed=seed)
        out_a = stl(x)
        out_b = ct(x)
        for pa, pb in zip(out_a.probs, out_b.probs):
            assert torch.equal(pa, pb)
        for za, zb in zip(out_a.penultimate, out_b.penultimate):
            assert torch.equal(za, zb)


@pytest.mark.parametrize("variant,shapes", [
    ("MCC", [(4, 36)]),
    ("MOC_STL", [(4, 2), (4, 2), (4, 3), (4, 3)]),
    ("SHARED_TRUNK", [(4, 2), (4, 2), (4, 3), (4, 3)]),
    ("CROSSTALK", [(4, 2), (4, 2), (4, 3), (4, 3)]),
])
def test_variant_output_shapes(variant, shapes):
    model = build_model(ModelSpec(variant=variant), seed=0)
    out = model_forward(model, _x(4))
    assert [tuple(p.shape) for p in out.probs] == shapes
    assert all(z.shape == (4, 64) for z in out.penultimate)


def test_shared_trunk_head_independence():
    model = build_model(ModelSpec(variant="SHARED_TRUNK"), seed=5)
    model.eval()
    x = _x(2, seed=9)
    before = model(x).probs[0].clone()
    with torch.no_grad():
        model.heads[1].fc2.weight.add_(1.0)
    after = model(x).probs[0]
    assert torch.equal(before, after)


def test_unknown_variant_rejected():
    with pytest.raises(ValueError):
        ModelSpec(variant="MEGA")
    with pytest.raises(ValueError):
        ModelSpec(ctl_kernel=2)


# Independent per-layer parameter formulas:
#   conv: out*(in*k^2 + 1); linear: out*(in + 1); norm affine: 2*len
def _extractor_params(norm_kind):
    affine = {"FLN": lambda f, t, c: 2 * f, "TLN": lambda f, t, c: 2 * t,
              "LN": lambda f, t, c: 2 * c * f * t, "IN": lambda f, t, c: 2 * c,
              "BN": lambda f, t, c: 2 * c}[norm_kind]
    total = affine(80, 48, 1)  # input norm
    chans = ((1, 32, 80, 48), (32, 64, 40, 24), (64, 128, 20, 12))
    for cin, cout, f, t in chans:
        total += cout * (cin * 9 + 1) + affine(f, t, cout)
    return total


def _head_params(k, hidden=64):
    return hidden * (128 + 1) + k * (hidden + 1)


def test_param_count_against_layer_formulas():
    e = _extractor_params("FLN")
    heads4 = sum(_head_params(k) for k in (2, 2, 3, 3))
    expected = {
        "MCC": e + _head_params(36),
        "SHARED_TRUNK": e + heads4,
        "MOC_STL": 4 * e + heads4,
        "CROSSTALK": 4 * e + heads4
        + 4 * (32 * (96 + 1)) + 4 * (64 * (192 + 1)),
    }
    for variant, want in expected.items():
        assert param_count(ModelSpec(variant=variant)) == want


def test_param_count_ordering():
    counts = {v: param_count(ModelSpec(variant=v))
              for v in ("MCC", "SHARED_TRUNK", "MOC_STL", "CROSSTALK")}
    assert counts["MCC"] < counts["SHARED_TRUNK"] < counts["MOC_STL"] < counts["CROSSTALK"]


def test_param_count_block1_conv():
    model = CompoundFaultModel(ModelSpec(variant="MCC"))
    conv = model.extractor.blocks[0].conv
    assert conv.weight.numel() + conv.bias.numel() == 320


def test_init_determinism_across_builds():
    a = build_model(ModelSpec(variant="CROSSTALK"), seed=7)
    b = build_model(ModelSpec(variant="CROSSTALK"), seed=7)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
