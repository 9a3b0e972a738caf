"""Training losses: categorical cross-entropy, multi-kernel MMD on
penultimate features, entropy minimization, and the fine-tuning
composition of the three."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .models import TaskOutputs

LOG_EPS = 1e-12


@dataclass(frozen=True)
class KernelBank:
    """Gaussian kernel mixture around the median-heuristic bandwidth.

    sigma_j^2 = multiplier_j * median of pairwise squared distances of
    the joint batch (fallback 1 when the median is zero). Setting
    `fixed_bandwidth` replaces the median by that constant.
    """

    multipliers: tuple[float, ...] = (0.25, 0.5, 1.0, 2.0, 4.0)
    fixed_bandwidth: float | None = None

    def __post_init__(self):
        if not self.multipliers or any(m <= 0 for m in self.multipliers):
            raise ValueError("bandwidth multipliers must be positive")
        if self.fixed_bandwidth is not None and self.fixed_bandwidth <= 0:
            raise ValueError("fixed_bandwidth must be positive")


DEFAULT_KERNEL_BANK = KernelBank()


def cce(probs: Tensor, targets_onehot: Tensor) -> Tensor:
    """Mean over the batch of -log(p_true + eps) for one-hot targets."""
    if probs.shape != targets_onehot.shape:
        raise ValueError(f"probs {tuple(probs.shape)} vs targets {tuple(targets_onehot.shape)}")
    p_true = (probs * targets_onehot).sum(dim=1)
    return -torch.log(p_true + LOG_EPS).mean()


def entropy_mean(probs: Tensor) -> Tensor:
    """Mean over the batch of the Shannon entropy of each probability row."""
    return -(probs * torch.log(probs + LOG_EPS)).sum(dim=1).mean()


def mkmmd2(src: Tensor, tgt: Tensor,
           bank: KernelBank = DEFAULT_KERNEL_BANK) -> Tensor:
    """Biased multi-kernel MMD^2 between two feature batches.

    Gram means include the diagonal, so the estimate is nonnegative and
    exactly zero when the two batches coincide.
    """
    if src.shape[0] < 2 or tgt.shape[0] < 2:
        raise ValueError("mkmmd2 needs at least two points per batch")
    ns = src.shape[0]
    joint = torch.cat([src, tgt], dim=0)
    d2 = torch.cdist(joint, joint).pow(2)
    if bank.fixed_bandwidth is not None:
        med = d2.new_tensor(bank.fixed_bandwidth)
    else:
        off_diag = d2[~torch.eye(d2.shape[0], dtype=torch.bool, device=d2.device)]
        med = off_diag.median()
        if med.item() <= 0:
            med = torch.ones_like(med)
    kernel = torch.zeros_like(d2)
    for mult in bank.multipliers:
        kernel = kernel + torch.exp(-d2 / (2.0 * mult * med))
    k_ss = kernel[:ns, :ns].mean()
    k_tt = kernel[ns:, ns:].mean()
    k_st = kernel[:ns, ns:].mean()
    return k_ss + k_tt - 2.0 * k_st


@dataclass(frozen=True)
class LossWeights:
    lambda_mmd: float = 1.0
    lambda_em: float = 0.1

    def __post_init__(self):
        if self.lambda_mmd < 0 or self.lambda_em < 0:
            raise ValueError("loss weights must be nonnegative")


def finetune_loss(src_out: TaskOutputs, tgt_out: TaskOutputs,
                  labeled_mask: Tensor, labeled_onehots: list[Tensor],
                  weights: LossWeights = LossWeights(),
                  bank: KernelBank = DEFAULT_KERNEL_BANK) -> tuple[Tensor, dict]:
    """Adaptation objective for one step.

    CCE over the labeled target rows (skipped when none are present in
    the batch), plus per-task MKMMD between source and target
    penultimate features, plus per-task entropy of all target
    predictions. Task terms are summed unweighted.
    """
    if src_out.n_tasks != tgt_out.n_tasks:
        raise ValueError("source and target outputs disagree in task count")
    n_labeled = int(labeled_mask.sum())
    terms = {"cce": src_out.probs[0].new_zeros(()),
             "mmd": src_out.probs[0].new_zeros(()),
             "em": src_out.probs[0].new_zeros(())}
    for i in range(tgt_out.n_tasks):
        if n_labeled > 0:
            terms["cce"] = terms["cce"] + cce(tgt_out.probs[i][labeled_mask],
                                              labeled_onehots[i])
        if weights.lambda_mmd > 0:
            terms["mmd"] = terms["mmd"] + mkmmd2(src_out.penultimate[i],
                                                 tgt_out.penultimate[i], bank)
        if weights.lambda_em > 0:
            terms["em"] = terms["em"] + entropy_mean(tgt_out.probs[i])
    total = (terms["cce"] + weights.lambda_mmd * terms["mmd"]
             + weights.lambda_em * terms["em"])
    parts = {k: float(v.detach()) for k, v in terms.items()}
    return total, parts
