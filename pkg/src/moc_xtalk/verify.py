"""Registered gradient-verification suite.

Each check compares analytic gradients against central finite
differences in double precision (dropout disabled). Small operations
are checked exhaustively; the full cross-talk model is spot-checked on
a deterministic random subset of elements per parameter array.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .losses import KernelBank, cce, entropy_mean, mkmmd2
from .models import CrossTalkLayer, ModelSpec, TaskHead, build_model
from .ndcore import (ConvBlock, GradCheckResult, NormSpec, axis_norm_forward,
                     fln_forward, grad_check, grad_check_module)

FULL_MODEL_TOLERANCE = 1e-3
OP_TOLERANCE = 1e-4


def _gen(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


def _randn(shape, seed, scale=1.0):
    return torch.randn(shape, generator=_gen(seed), dtype=torch.float64) * scale


def _rand_probs(shape, seed):
    return F.softmax(_randn(shape, seed), dim=1)


def _proj_loss(shape, seed):
    proj = _randn(shape, seed)
    return lambda y: (y * proj).sum()


def check_linear(tolerance: float = 1e-7) -> GradCheckResult:
    """Sanity anchor: loss = sum(W x) has an exactly known gradient."""
    w = _randn((5, 7), 1)
    x = _randn((7, 3), 2)
    return grad_check(lambda w, x: (w @ x).sum(), {"w": w, "x": x},
                      tolerance=tolerance, name="linear")


def check_fln() -> GradCheckResult:
    x = _randn((2, 1, 8, 4), 3)
    gamma = 1.0 + 0.1 * _randn((8,), 4)
    beta = 0.1 * _randn((8,), 5)
    loss = _proj_loss((2, 1, 8, 4), 6)
    return grad_check(lambda x, gamma, beta: loss(fln_forward(x, gamma, beta)),
                      {"x": x, "gamma": gamma, "beta": beta},
                      tolerance=OP_TOLERANCE, name="fln_forward")


def check_axis_norm(kind: str) -> GradCheckResult:
    x = _randn((3, 2, 6, 5), 7)
    shape = {"FLN": (6,), "TLN": (5,), "LN": (2, 6, 5), "IN": (2,), "BN": (2,)}[kind]
    gamma = 1.0 + 0.1 * _randn(shape, 8)
    beta = 0.1 * _randn(shape, 9)
    loss = _proj_loss((3, 2, 6, 5), 10)
    return grad_check(
        lambda x, gamma, beta: loss(axis_norm_forward(x, kind, gamma, beta,
                                                      training=True)),
        {"x": x, "gamma": gamma, "beta": beta},
        tolerance=OP_TOLERANCE, name=f"axis_norm[{kind}]")


def check_conv_block(block_idx: int) -> GradCheckResult:
    chans = ((1, 32), (32, 64), (64, 128))[block_idx]
    block = ConvBlock(chans[0], chans[1], (6, 4), NormSpec("FLN"),
                      dropout_p=0.2, final=(block_idx == 2))
    x = _randn((2, chans[0], 6, 4), 11 + block_idx)
    samples = 12 if block_idx else None
    return grad_check_module(block, x, tolerance=OP_TOLERANCE,
                             max_samples_per_array=samples,
                             name=f"conv_block{block_idx + 1}", seed=12)


def check_ctl() -> GradCheckResult:
    layer = CrossTalkLayer(channels=6, kernel=1)
    others = [_randn((2, 6, 4, 3), 20 + i) for i in range(3)]
    loss = _proj_loss((2, 6, 4, 3), 24)
    mod = layer.double()
    params = dict(mod.named_parameters())

    def fn(a, b, c, **named):
        out = torch.func.functional_call(mod, named, ([a, b, c],))
        return loss(out)

    return grad_check(fn, {"a": others[0], "b": others[1], "c": others[2],
                           **{k: v.detach() for k, v in params.items()}},
                      tolerance=OP_TOLERANCE, name="ctl_forward")


def check_tsl() -> GradCheckResult:
    head = TaskHead(n_classes=3)
    x = _randn((3, 128), 30)
    loss_z = _proj_loss((3, 64), 31)
    loss_p = _proj_loss((3, 3), 32)
    return grad_check_module(
        head, x, output_loss=lambda out: loss_z(out[0]) + loss_p(out[1]),
        tolerance=OP_TOLERANCE, max_samples_per_array=16, name="tsl_forward",
        seed=33)


def check_cce() -> GradCheckResult:
    probs = _rand_probs((3, 4), 40)
    onehot = F.one_hot(torch.tensor([0, 2, 1]), 4).double()
    return grad_check(lambda probs: cce(probs, onehot), {"probs": probs},
                      tolerance=OP_TOLERANCE, name="cce")


def check_entropy() -> GradCheckResult:
    probs = _rand_probs((3, 5), 41)
    return grad_check(lambda probs: entropy_mean(probs), {"probs": probs},
                      tolerance=OP_TOLERANCE, name="entropy_mean")


def check_mkmmd() -> GradCheckResult:
    src = _randn((4, 3), 42)
    tgt = _randn((4, 3), 43) + 0.5
    bank = KernelBank()
    return grad_check(lambda src, tgt: mkmmd2(src, tgt, bank),
                      {"src": src, "tgt": tgt},
                      tolerance=OP_TOLERANCE, name="mkmmd2")


def check_full_model(samples_per_array: int = 4) -> GradCheckResult:
    """Finite-difference spot check of a complete cross-talk model."""
    model = build_model(ModelSpec(variant="CROSSTALK"), seed=50)
    x = _randn((1, 1, 80, 48), 51)
    gen = _gen(52)
    with torch.no_grad():
        ref = model.double()(x)
    proj_p = [torch.randn(p.shape, generator=gen, dtype=torch.float64)
              for p in ref.probs]
    proj_z = [torch.randn(z.shape, generator=gen, dtype=torch.float64)
              for z in ref.penultimate]

    def output_loss(out):
        total = sum((p * r).sum() for p, r in zip(out.probs, proj_p))
        return total + sum((z * r).sum() for z, r in zip(out.penultimate, proj_z))

    return grad_check_module(model, x, output_loss=output_loss,
                             tolerance=FULL_MODEL_TOLERANCE,
                             max_samples_per_array=samples_per_array,
                             name="crosstalk_model", seed=53)


def run_suite() -> list[GradCheckResult]:
    """All registered checks, in a stable order."""
    results = [check_linear(), check_fln()]
    results += [check_axis_norm(kind) for kind in ("FLN", "TLN", "BN", "IN", "LN")]
    results += [check_conv_block(i) for i in range(3)]
    results += [check_ctl(), check_tsl(), check_cce(), check_entropy(),
                check_mkmmd(), check_full_model()]
    return results
