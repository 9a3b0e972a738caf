"""Classifier architectures for compound-fault diagnosis.

Four variants over the same three-block conv feature extractor:

  MCC           one extractor, one 36-way softmax head
  MOC_STL       four independent extractors, one head per fault task
  SHARED_TRUNK  one shared extractor feeding four task heads
  CROSSTALK     four extractors exchanging features through cross-talk
                layers at both inter-block junctions

A cross-talk layer concatenates the other three tasks' block outputs
along the channel axis, applies a learnable conv + ReLU that restores
the original channel count, and the result is added to the task's own
feature stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .labels import FAULT_LEVELS, N_CLASSES
from .ndcore import AxisNorm, ConvBlock, NormSpec, DEFAULT_DROPOUT, init_parameters

VARIANTS = ("MCC", "MOC_STL", "SHARED_TRUNK", "CROSSTALK")
N_TASKS = len(FAULT_LEVELS)

INPUT_SHAPE = (1, 80, 48)
BLOCK_CHANNELS = (32, 64, 128)
BLOCK_PRE_POOL = ((80, 48), (40, 24), (20, 12))
FEATURE_DIM = BLOCK_CHANNELS[-1]
DEFAULT_TSL_HIDDEN = 64


@dataclass(frozen=True)
class ModelSpec:
    variant: str = "CROSSTALK"
    norm: NormSpec = field(default_factory=NormSpec)
    tsl_hidden: int = DEFAULT_TSL_HIDDEN
    ctl_kernel: int = 1
    dropout_p: float = DEFAULT_DROPOUT

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.ctl_kernel % 2 != 1:
            raise ValueError("ctl_kernel must be odd to preserve spatial size")

    @property
    def head_sizes(self) -> tuple[int, ...]:
        return (N_CLASSES,) if self.variant == "MCC" else FAULT_LEVELS


@dataclass
class TaskOutputs:
    """Per-task softmax probabilities and penultimate features."""

    probs: list[Tensor]
    penultimate: list[Tensor]

    @property
    def n_tasks(self) -> int:
        return len(self.probs)


class FeatureExtractor(nn.Module):
    """Input norm -> three conv blocks -> (B, 128) feature vector."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.input_norm = AxisNorm(spec.norm.kind, INPUT_SHAPE, spec.norm.eps)
        chans = (INPUT_SHAPE[0],) + BLOCK_CHANNELS
        self.blocks = nn.ModuleList([
            ConvBlock(chans[i], chans[i + 1], BLOCK_PRE_POOL[i], spec.norm,
                      spec.dropout_p, final=(i == len(BLOCK_CHANNELS) - 1))
            for i in range(len(BLOCK_CHANNELS))
        ])

    def forward(self, x: Tensor) -> Tensor:
        y = self.input_norm(x)
        for block in self.blocks:
            y = block(y)
        return y.flatten(1)


class CrossTalkLayer(nn.Module):
    """Fuse the other tasks' block outputs into an additive correction."""

    def __init__(self, channels: int, n_others: int = N_TASKS - 1, kernel: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(n_others * channels, channels, kernel,
                              padding=kernel // 2, bias=True)

    def forward(self, others: list[Tensor]) -> Tensor:
        shapes = {tuple(t.shape) for t in others}
        if len(shapes) != 1:
            raise ValueError(f"cross-talk inputs disagree in shape: {sorted(shapes)}")
        return F.relu(self.conv(torch.cat(others, dim=1)))


def ctl_forward(layer: CrossTalkLayer, other_features: list[Tensor]) -> Tensor:
    return layer(other_features)


class TaskHead(nn.Module):
    """Task-specific layers: FC 128->hidden, ReLU, FC hidden->K, softmax."""

    def __init__(self, n_classes: int, hidden: int = DEFAULT_TSL_HIDDEN):
        super().__init__()
        self.fc1 = nn.Linear(FEATURE_DIM, hidden)
        self.fc2 = nn.Linear(hidden, n_classes)

    def forward(self, feature: Tensor) -> tuple[Tensor, Tensor]:
        penultimate = F.relu(self.fc1(feature))
        probs = F.softmax(self.fc2(penultimate), dim=1)
        return penultimate, probs


def tsl_forward(head: TaskHead, feature: Tensor) -> tuple[Tensor, Tensor]:
    return head(feature)


class CompoundFaultModel(nn.Module):
    """One of the four architecture variants; forward yields TaskOutputs."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        heads = [TaskHead(k, spec.tsl_hidden) for k in spec.head_sizes]
        self.heads = nn.ModuleList(heads)
        if spec.variant in ("MCC", "SHARED_TRUNK"):
            self.extractor = FeatureExtractor(spec)
        else:
            self.extractors = nn.ModuleList(
                [FeatureExtractor(spec) for _ in range(N_TASKS)])
        if spec.variant == "CROSSTALK":
            # One cross-talk layer per task at each inter-block junction.
            self.ctl = nn.ModuleList([
                nn.ModuleList([CrossTalkLayer(BLOCK_CHANNELS[j], kernel=spec.ctl_kernel)
                               for _ in range(N_TASKS)])
                for j in range(len(BLOCK_CHANNELS) - 1)
            ])

    def forward(self, x: Tensor) -> TaskOutputs:
        variant = self.spec.variant
        if variant in ("MCC", "SHARED_TRUNK"):
            feat = self.extractor(x)
            features = [feat] * len(self.heads)
        elif variant == "MOC_STL":
            features = [ex(x) for ex in self.extractors]
        else:
            features = self._crosstalk_features(x)
        penult, probs = [], []
        for head, feat in zip(self.heads, features):
            z, p = head(feat)
            penult.append(z)
            probs.append(p)
        return TaskOutputs(probs=probs, penultimate=penult)

    def _crosstalk_features(self, x: Tensor) -> list[Tensor]:
        h = [ex.input_norm(x) for ex in self.extractors]
        h = [ex.blocks[0](h[i]) for i, ex in enumerate(self.extractors)]
        for junction in range(len(BLOCK_CHANNELS) - 1):
            corrections = [
                self.ctl[junction][i]([h[j] for j in range(N_TASKS) if j != i])
                for i in range(N_TASKS)
            ]
            h = [ex.blocks[junction + 1](h[i] + corrections[i])
                 for i, ex in enumerate(self.extractors)]
        return [t.flatten(1) for t in h]


def build_model(spec: ModelSpec, seed: int | None = None) -> CompoundFaultModel:
    model = CompoundFaultModel(spec)
    if seed is not None:
        init_parameters(model, seed)
    return model


def model_forward(model: CompoundFaultModel, x: Tensor,
                  training: bool = False) -> TaskOutputs:
    model.train(training)
    if training:
        return model(x)
    with torch.no_grad():
        return model(x)


def param_count(spec: ModelSpec) -> int:
    """Number of learnable scalars (weights, biases, norm affine params)."""
    return sum(p.numel() for p in CompoundFaultModel(spec).parameters())
