"""Dataset splitting, partial-label masking, and the two-stage
pretrain / fine-tune protocol with best-validation checkpoint selection.

Stage 1 minimizes (summed per-task) cross-entropy on the labeled source
training split. Stage 2 draws one source batch and one target batch per
step and minimizes CCE on the labeled target rows plus MKMMD between
per-task penultimate features plus entropy of the target predictions.
Both stages keep the parameters of the epoch with the lowest validation
CCE. Everything is deterministic in (seed, config, dataset).
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from . import preprocess
from .labels import FAULT_LEVELS, N_CLASSES
from .losses import KernelBank, LossWeights, cce, finetune_loss
from .metrics import decode_joint_array, joint_class_array
from .models import CompoundFaultModel, ModelSpec, TaskOutputs, build_model
from .siggen import DomainDataset


@dataclass(frozen=True)
class TrainConfig:
    epochs_pretrain: int = 100
    epochs_finetune: int = 100
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    labeled_fraction: float = 0.10
    weights: LossWeights = field(default_factory=LossWeights)
    kernel_bank: KernelBank = field(default_factory=KernelBank)
    # Labeled slots per target batch during fine-tuning (rest unlabeled).
    target_labeled_per_batch: int = 8
    source_cce_during_finetune: bool = False

    def __post_init__(self):
        if not 0 < self.labeled_fraction <= 1:
            raise ValueError("labeled_fraction must lie in (0, 1]")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (MMD needs two points)")
        if self.epochs_pretrain < 0 or self.epochs_finetune < 0:
            raise ValueError("epoch counts must be nonnegative")


@dataclass
class DomainTensors:
    """Spectrograms and labels of one domain, ready for training."""

    specs: np.ndarray    # (N, 1, 80, 48) float32
    digits: np.ndarray   # (N, 4) int64
    joint: np.ndarray    # (N,) int64
    classes: list[int]
    subset: str = ""

    def __len__(self) -> int:
        return len(self.joint)

    @classmethod
    def from_domain(cls, dataset: DomainDataset) -> "DomainTensors":
        return cls(specs=preprocess.domain_spectrograms(dataset),
                   digits=dataset.labels.copy(), joint=dataset.joint.copy(),
                   classes=dataset.classes, subset=dataset.subset)


@dataclass
class SourceSplits:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


@dataclass
class TargetSplits:
    """Index sets of a partially labeled target domain.

    Test labels are reached only through `test_indices()`, which counts
    accesses so test-set hygiene can be audited.
    """

    labeled_train: np.ndarray
    labeled_val: np.ndarray
    unlabeled: np.ndarray
    _test: np.ndarray
    test_access_count: int = 0

    def test_indices(self) -> np.ndarray:
        self.test_access_count += 1
        return self._test

    @property
    def labeled(self) -> np.ndarray:
        return np.concatenate([self.labeled_train, self.labeled_val])

    @property
    def train_pool(self) -> np.ndarray:
        return np.concatenate([self.labeled_train, self.unlabeled])


def _per_class_indices(joint: np.ndarray, rng: np.random.Generator):
    for c in np.unique(joint):
        idx = np.flatnonzero(joint == c)
        rng.shuffle(idx)
        yield c, idx


def split_source(data: DomainTensors, seed: int) -> SourceSplits:
    """Stratified per-class 8:1:1 train/val/test split."""
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for c, idx in _per_class_indices(data.joint, rng):
        n = len(idx)
        if n < 10:
            raise ValueError(f"class {c} has {n} samples; need >= 10 for 8:1:1")
        n_val = round(n / 10)
        n_test = round(n / 10)
        val.append(idx[:n_val])
        test.append(idx[n_val:n_val + n_test])
        train.append(idx[n_val + n_test:])
    return SourceSplits(train=np.sort(np.concatenate(train)),
                        val=np.sort(np.concatenate(val)),
                        test=np.sort(np.concatenate(test)))


def label_mask_target(data: DomainTensors, fraction: float, seed: int) -> TargetSplits:
    """Stratified partial labeling of the target domain.

    Per class: one tenth is held out as the fully labeled test subset
    (labels used only for metrics); `fraction` of the class size is
    marked labeled, a third of which becomes the labeled validation
    subset; the rest stays unlabeled.
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    lab_train, lab_val, unlab, test = [], [], [], []
    for c, idx in _per_class_indices(data.joint, rng):
        n = len(idx)
        n_test = max(1, round(n / 10))
        n_labeled = min(round(fraction * n), n - n_test)
        if n_labeled < 1:
            raise ValueError(f"class {c}: fraction {fraction} labels no sample of {n}")
        n_val = max(1, round(n_labeled / 3)) if n_labeled >= 2 else 0
        test.append(idx[:n_test])
        lab_val.append(idx[n_test:n_test + n_val])
        lab_train.append(idx[n_test + n_val:n_test + n_labeled])
        unlab.append(idx[n_test + n_labeled:])
    return TargetSplits(labeled_train=np.sort(np.concatenate(lab_train)),
                        labeled_val=np.sort(np.concatenate(lab_val)),
                        unlabeled=np.sort(np.concatenate(unlab)),
                        _test=np.sort(np.concatenate(test)))


def _task_targets(model: CompoundFaultModel, digits: np.ndarray,
                  joint: np.ndarray) -> list[torch.Tensor]:
    """Per-task one-hot targets (single 36-way task for MCC)."""
    if model.spec.variant == "MCC":
        idx = torch.from_numpy(joint)
        return [F.one_hot(idx, N_CLASSES).float()]
    out = []
    for i, k in enumerate(FAULT_LEVELS):
        out.append(F.one_hot(torch.from_numpy(digits[:, i]), k).float())
    return out


def _summed_cce(outputs: TaskOutputs, targets: list[torch.Tensor]) -> torch.Tensor:
    return sum(cce(p, t) for p, t in zip(outputs.probs, targets))


def _eval_task_cce(model: CompoundFaultModel, data: DomainTensors,
                   idx: np.ndarray, batch_size: int) -> list[float]:
    """Per-task mean CCE over an index set (eval mode)."""
    model.eval()
    n_tasks = len(model.spec.head_sizes)
    if len(idx) == 0:
        return [0.0] * n_tasks
    sums = np.zeros(n_tasks)
    with torch.no_grad():
        for lo in range(0, len(idx), batch_size):
            sel = idx[lo:lo + batch_size]
            x = torch.from_numpy(data.specs[sel])
            out = model(x)
            targets = _task_targets(model, data.digits[sel], data.joint[sel])
            for i in range(n_tasks):
                sums[i] += float(cce(out.probs[i], targets[i])) * len(sel)
    return list(sums / len(idx))


def _log_epoch(log: list[dict], phase: str, epoch: int, split: str,
               losses: list[float]) -> None:
    for task, loss in enumerate(losses):
        log.append({"phase": phase, "epoch": epoch, "split": split,
                    "task": task, "loss": float(loss)})


def _make_optimizer(model: CompoundFaultModel, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=cfg.lr,
                            betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)


def _clone_state(model: CompoundFaultModel) -> dict:
    return copy.deepcopy(model.state_dict())


def pretrain(spec: ModelSpec, source: DomainTensors, splits: SourceSplits,
             cfg: TrainConfig, seed: int) -> tuple[CompoundFaultModel, list[dict]]:
    """Stage 1: supervised training on the source domain.

    Returns the model restored to the epoch with the lowest summed
    validation CCE, plus the per-epoch per-task loss log.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = build_model(spec, seed=seed)
    opt = _make_optimizer(model, cfg)
    log: list[dict] = []
    best = (math.inf, -1, _clone_state(model))
    for epoch in range(cfg.epochs_pretrain):
        model.train()
        perm = rng.permutation(splits.train)
        train_losses = np.zeros(len(spec.head_sizes))
        n_steps = 0
        for lo in range(0, len(perm), cfg.batch_size):
            sel = perm[lo:lo + cfg.batch_size]
            if len(sel) < 2:
                continue  # batch norm and MMD contracts need >= 2 rows
            x = torch.from_numpy(source.specs[sel])
            targets = _task_targets(model, source.digits[sel], source.joint[sel])
            out = model(x)
            per_task = [cce(p, t) for p, t in zip(out.probs, targets)]
            loss = sum(per_task)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite pretrain loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            train_losses += [float(v.detach()) for v in per_task]
            n_steps += 1
        _log_epoch(log, "pretrain", epoch, "train", list(train_losses / max(n_steps, 1)))
        val_losses = _eval_task_cce(model, source, splits.val, cfg.batch_size)
        _log_epoch(log, "pretrain", epoch, "val", val_losses)
        total_val = float(sum(val_losses))
        if total_val < best[0]:
            best = (total_val, epoch, _clone_state(model))
    model.load_state_dict(best[2])
    return model, log


def _draw(rng: np.random.Generator, pool: np.ndarray, k: int) -> np.ndarray:
    if k <= 0 or len(pool) == 0:
        return np.empty(0, dtype=np.int64)
    return rng.choice(pool, size=k, replace=len(pool) < k)


def finetune(model: CompoundFaultModel, source: DomainTensors,
             source_splits: SourceSplits, target: DomainTensors,
             target_splits: TargetSplits, cfg: TrainConfig,
             seed: int) -> tuple[CompoundFaultModel, list[dict]]:
    """Stage 2: domain adaptation on the partially labeled target.

    Each step pairs a fresh source batch with a target batch holding
    labeled and unlabeled rows; the model with the lowest summed
    validation CCE on the labeled target validation subset wins.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    opt = _make_optimizer(model, cfg)
    log: list[dict] = []
    best = (math.inf, -1, _clone_state(model))
    pool = target_splits.train_pool
    steps_per_epoch = math.ceil(len(pool) / cfg.batch_size)
    n_lab_slots = min(cfg.target_labeled_per_batch, cfg.batch_size)
    for epoch in range(cfg.epochs_finetune):
        model.train()
        for _ in range(steps_per_epoch):
            src_sel = _draw(rng, source_splits.train, cfg.batch_size)
            lab_sel = _draw(rng, target_splits.labeled_train, n_lab_slots)
            unlab_sel = _draw(rng, target_splits.unlabeled,
                              cfg.batch_size - len(lab_sel))
            if len(unlab_sel) == 0 and len(lab_sel) < cfg.batch_size:
                lab_sel = _draw(rng, target_splits.labeled_train, cfg.batch_size)
            tgt_sel = np.concatenate([lab_sel, unlab_sel]).astype(np.int64)
            labeled_mask = torch.zeros(len(tgt_sel), dtype=torch.bool)
            labeled_mask[:len(lab_sel)] = True

            src_x = torch.from_numpy(source.specs[src_sel])
            tgt_x = torch.from_numpy(target.specs[tgt_sel])
            src_out = model(src_x)
            tgt_out = model(tgt_x)
            onehots = _task_targets(model, target.digits[lab_sel], target.joint[lab_sel])
            loss, _ = finetune_loss(src_out, tgt_out, labeled_mask, onehots,
                                    cfg.weights, cfg.kernel_bank)
            if cfg.source_cce_during_finetune:
                src_targets = _task_targets(model, source.digits[src_sel],
                                            source.joint[src_sel])
                loss = loss + _summed_cce(src_out, src_targets)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite finetune loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
        val_losses = _eval_task_cce(model, target, target_splits.labeled_val,
                                    cfg.batch_size)
        _log_epoch(log, "finetune", epoch, "val", val_losses)
        total_val = float(sum(val_losses))
        if total_val < best[0]:
            best = (total_val, epoch, _clone_state(model))
    model.load_state_dict(best[2])
    return model, log


def predict_digits(model: CompoundFaultModel, data: DomainTensors,
                   idx: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Per-task severity predictions, shape (len(idx), 4)."""
    model.eval()
    rows = []
    with torch.no_grad():
        for lo in range(0, len(idx), batch_size):
            sel = idx[lo:lo + batch_size]
            out = model(torch.from_numpy(data.specs[sel]))
            if model.spec.variant == "MCC":
                joint = out.probs[0].argmax(dim=1).numpy()
                rows.append(decode_joint_array(joint))
            else:
                rows.append(np.stack([p.argmax(dim=1).numpy() for p in out.probs],
                                     axis=1))
    return np.concatenate(rows, axis=0)


def predict_joint(model: CompoundFaultModel, data: DomainTensors,
                  idx: np.ndarray, batch_size: int = 64) -> np.ndarray:
    return joint_class_array(predict_digits(model, data, idx, batch_size))
