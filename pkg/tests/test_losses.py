import math

import pytest
import torch
import torch.nn.functional as F

from moc_xtalk.losses import (KernelBank, LossWeights, cce, entropy_mean,
                              finetune_loss, mkmmd2)
from moc_xtalk.models import TaskOutputs


def _onehot(idx, k):
    return F.one_hot(torch.tensor(idx), k).double()


def test_cce_perfect_prediction_is_zero():
    probs = _onehot([0, 1, 2], 3)
    assert float(cce(probs, probs)) == pytest.approx(0.0, abs=1e-9)


def test_cce_uniform_36_is_log36():
    probs = torch.full((4, 36), 1.0 / 36, dtype=torch.float64)
    assert float(cce(probs, _onehot([0, 5, 17, 35], 36))) == pytest.approx(
        math.log(36.0), abs=1e-6)


def test_cce_half_is_log2():
    probs = torch.tensor([[0.5, 0.5]], dtype=torch.float64)
    assert float(cce(probs, _onehot([0], 2))) == pytest.approx(math.log(2.0), abs=1e-9)


def test_cce_shape_mismatch():
    with pytest.raises(ValueError):
        cce(torch.ones(2, 3) / 3, torch.ones(2, 4))


def test_entropy_onehot_zero_uniform_log_k():
    assert float(entropy_mean(_onehot([2, 0], 5))) == pytest.approx(0.0, abs=1e-9)
    uni36 = torch.full((3, 36), 1.0 / 36, dtype=torch.float64)
    assert float(entropy_mean(uni36)) == pytest.approx(math.log(36.0), abs=1e-6)
    half = torch.tensor([[0.5, 0.5]], dtype=torch.float64)
    assert float(entropy_mean(half)) == pytest.approx(math.log(2.0), abs=1e-9)


def test_entropy_bounds():
    gen = torch.Generator().manual_seed(0)
    probs = F.softmax(torch.randn(50, 7, generator=gen, dtype=torch.float64), dim=1)
    h = float(entropy_mean(probs))
    assert 0.0 <= h <= math.log(7.0) + 1e-9


def test_mkmmd2_identical_batches_zero():
    gen = torch.Generator().manual_seed(1)
    x = torch.randn(6, 4, generator=gen, dtype=torch.float64)
    assert float(mkmmd2(x, x)) == 0.0


def test_mkmmd2_symmetry_and_nonnegativity():
    gen = torch.Generator().manual_seed(2)
    for _ in range(10):
        x = torch.randn(5, 3, generator=gen, dtype=torch.float64)
        y = torch.randn(7, 3, generator=gen, dtype=torch.float64) + 0.3
        a = float(mkmmd2(x, y))
        b = float(mkmmd2(y, x))
        assert abs(a - b) <= 1e-9
        assert a >= -1e-9


def test_mkmmd2_closed_form_two_point_sets():
    # duplicated singletons with one kernel sigma^2 = 1/2:
    # MMD^2 = 2 - 2 exp(-||x - y||^2)
    bank = KernelBank(multipliers=(1.0,), fixed_bandwidth=0.5)
    x = torch.tensor([[0.3, -1.2]], dtype=torch.float64).repeat(2, 1)
    y = torch.tensor([[1.0, 0.4]], dtype=torch.float64).repeat(2, 1)
    d2 = float(((x[0] - y[0]) ** 2).sum())
    got = float(mkmmd2(x, y, bank))
    assert got == pytest.approx(2.0 - 2.0 * math.exp(-d2), abs=1e-12)


def test_mkmmd2_grows_with_mean_shift():
    gen = torch.Generator().manual_seed(3)
    x = torch.randn(8, 5, generator=gen, dtype=torch.float64)
    vals = [float(mkmmd2(x, x + delta)) for delta in (0.5, 1.0, 2.0)]
    assert vals[0] < vals[1] < vals[2]


def test_mkmmd2_rejects_tiny_batches():
    x = torch.randn(1, 3)
    y = torch.randn(4, 3)
    with pytest.raises(ValueError):
        mkmmd2(x, y)
    with pytest.raises(ValueError):
        mkmmd2(y, x)


def test_kernel_bank_validation():
    with pytest.raises(ValueError):
        KernelBank(multipliers=())
    with pytest.raises(ValueError):
        KernelBank(multipliers=(1.0, -2.0))
    with pytest.raises(ValueError):
        KernelBank(fixed_bandwidth=0.0)


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda_mmd=-0.1)


def _outputs(probs_list, penult_list):
    return TaskOutputs(probs=probs_list, penultimate=penult_list)


def test_finetune_loss_reduces_to_cce():
    gen = torch.Generator().manual_seed(4)
    probs = [F.softmax(torch.randn(6, k, generator=gen, dtype=torch.float64), dim=1)
             for k in (2, 2, 3, 3)]
    penult = [torch.randn(6, 8, generator=gen, dtype=torch.float64) for _ in range(4)]
    out = _outputs(probs, penult)
    mask = torch.ones(6, dtype=torch.bool)
    onehots = [_onehot([0, 1, 0, 1, 0, 1], 2), _onehot([1, 0, 1, 0, 1, 0], 2),
               _onehot([0, 1, 2, 0, 1, 2], 3), _onehot([2, 1, 0, 2, 1, 0], 3)]
    total, parts = finetune_loss(out, out, mask, onehots,
                                 LossWeights(lambda_mmd=0.0, lambda_em=0.0))
    expected = sum(float(cce(p, t)) for p, t in zip(probs, onehots))
    assert float(total) == pytest.approx(expected, rel=1e-12)
    assert parts["mmd"] == 0.0 and parts["em"] == 0.0


def test_finetune_loss_identical_domains_no_mmd():
    gen = torch.Generator().manual_seed(5)
    probs = [F.softmax(torch.randn(4, k, generator=gen, dtype=torch.float64), dim=1)
             for k in (2, 2, 3, 3)]
    penult = [torch.randn(4, 8, generator=gen, dtype=torch.float64) for _ in range(4)]
    out = _outputs(probs, penult)
    total, parts = finetune_loss(out, out, torch.zeros(4, dtype=torch.bool), [],
                                 LossWeights(lambda_mmd=1.0, lambda_em=0.0))
    assert parts["mmd"] == pytest.approx(0.0, abs=1e-12)
    assert float(total) == pytest.approx(0.0, abs=1e-12)


def test_finetune_loss_confident_predictions_no_entropy():
    probs = [_onehot([0, 1], 2), _onehot([1, 0], 2), _onehot([2, 1], 3), _onehot([0, 2], 3)]
    penult = [torch.randn(2, 8, dtype=torch.float64) for _ in range(4)]
    out = _outputs(probs, penult)
    _, parts = finetune_loss(out, out, torch.zeros(2, dtype=torch.bool), [],
                             LossWeights(lambda_mmd=0.0, lambda_em=0.5))
    assert parts["em"] == pytest.approx(0.0, abs=1e-9)
