"""Differentiable building blocks and verification harness.

Torch supplies the reverse-mode engine and the conv/pool/linear kernels;
this module defines the normalization family, the conv block used by
every feature extractor, a dropout with cheap mask generation, a
central-finite-difference gradient checker, and the on-disk parameter
checkpoint format (JSON header + raw float32 little-endian payload).

Normalization kinds over a (B, C, F, T) tensor:
  FLN  mean/var over F per (b, c, t), affine gamma/beta in R^F
  TLN  mean/var over T per (b, c, f), affine in R^T
  LN   mean/var over (C, F, T) per sample, affine of shape (C, F, T)
  IN   mean/var over (F, T) per (b, c), affine in R^C
  BN   mean/var over (B, F, T) per channel, affine in R^C, running stats
"""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

NORM_KINDS = ("FLN", "TLN", "BN", "IN", "LN")
DEFAULT_EPS = 1e-5
DEFAULT_DROPOUT = 0.2
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class NormSpec:
    kind: str = "FLN"
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if self.kind not in NORM_KINDS:
            raise ValueError(f"unknown normalization kind {self.kind!r}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


def fln_forward(x: Tensor, gamma: Tensor | None, beta: Tensor | None,
                eps: float = DEFAULT_EPS) -> Tensor:
    """Frequency-axis normalization of a (B, C, F, T) tensor.

    Pass gamma=beta=None for the pre-affine (normalize-only) output.
    """
    if x.ndim != 4:
        raise ValueError(f"expected rank-4 input, got shape {tuple(x.shape)}")
    f_len = x.shape[2]
    for name, p in (("gamma", gamma), ("beta", beta)):
        if p is not None and p.shape != (f_len,):
            raise ValueError(f"{name} must have shape ({f_len},), got {tuple(p.shape)}")
    y = F.layer_norm(x.transpose(2, 3), (f_len,), None, None, eps).transpose(2, 3)
    if gamma is not None:
        y = y * gamma.view(1, 1, -1, 1)
    if beta is not None:
        y = y + beta.view(1, 1, -1, 1)
    return y


def axis_norm_forward(x: Tensor, kind: str, gamma: Tensor | None = None,
                      beta: Tensor | None = None, eps: float = DEFAULT_EPS,
                      running_mean: Tensor | None = None,
                      running_var: Tensor | None = None,
                      training: bool = True,
                      momentum: float = BN_MOMENTUM) -> Tensor:
    """Apply one of the five normalization kinds to a (B, C, F, T) tensor."""
    if x.ndim != 4:
        raise ValueError(f"expected rank-4 input, got shape {tuple(x.shape)}")
    if kind == "FLN":
        return fln_forward(x, gamma, beta, eps)
    if kind == "TLN":
        return F.layer_norm(x, (x.shape[3],), gamma, beta, eps)
    if kind == "LN":
        return F.layer_norm(x, tuple(x.shape[1:]), gamma, beta, eps)
    if kind == "IN":
        return F.instance_norm(x, None, None, gamma, beta, True, 0.0, eps)
    if kind == "BN":
        return F.batch_norm(x, running_mean, running_var, gamma, beta,
                            training, momentum, eps)
    raise ValueError(f"unknown normalization kind {kind!r}")


class AxisNorm(nn.Module):
    """Module wrapper holding the affine parameters for one norm site.

    `feature_shape` is the (C, F, T) shape of the tensor this site
    normalizes; the affine parameter shape per kind follows from it.
    """

    def __init__(self, kind: str, feature_shape: tuple[int, int, int],
                 eps: float = DEFAULT_EPS):
        super().__init__()
        if kind not in NORM_KINDS:
            raise ValueError(f"unknown normalization kind {kind!r}")
        self.kind = kind
        self.eps = eps
        self.feature_shape = tuple(feature_shape)
        c, f_len, t_len = self.feature_shape
        shape = {"FLN": (f_len,), "TLN": (t_len,), "LN": self.feature_shape,
                 "IN": (c,), "BN": (c,)}[kind]
        self.gamma = nn.Parameter(torch.ones(shape))
        self.beta = nn.Parameter(torch.zeros(shape))
        if kind == "BN":
            self.register_buffer("running_mean", torch.zeros(c))
            self.register_buffer("running_var", torch.ones(c))
        else:
            self.running_mean = None
            self.running_var = None

    def forward(self, x: Tensor) -> Tensor:
        if tuple(x.shape[1:]) != self.feature_shape:
            raise ValueError(f"expected {self.feature_shape} features, got {tuple(x.shape[1:])}")
        return axis_norm_forward(x, self.kind, self.gamma, self.beta, self.eps,
                                 self.running_mean, self.running_var,
                                 self.training, BN_MOMENTUM)

    def extra_repr(self) -> str:
        return f"kind={self.kind}, feature_shape={self.feature_shape}, eps={self.eps}"


class Dropout(nn.Module):
    """Inverted dropout with a rand-compare mask (faster than the native op here)."""

    def __init__(self, p: float = DEFAULT_DROPOUT):
        super().__init__()
        if not 0 <= p < 1:
            raise ValueError("dropout probability must lie in [0, 1)")
        self.p = p

    def forward(self, x: Tensor) -> Tensor:
        if not self.training or self.p == 0:
            return x
        keep = 1.0 - self.p
        mask = (torch.rand_like(x) < keep).to(x.dtype)
        return x * mask * (1.0 / keep)

    def extra_repr(self) -> str:
        return f"p={self.p}"


class ConvBlock(nn.Module):
    """conv 3x3 (stride 1, pad 1, bias) -> norm -> dropout -> ReLU -> pool.

    Blocks 1-2 use 2x2 average pooling (stride 2); the final block pools
    adaptively to 1x1. The norm site sees the pre-pool spatial size.
    """

    def __init__(self, in_ch: int, out_ch: int, pre_pool_hw: tuple[int, int],
                 norm: NormSpec, dropout_p: float = DEFAULT_DROPOUT,
                 final: bool = False):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=1, padding=1, bias=True)
        self.norm = AxisNorm(norm.kind, (out_ch, *pre_pool_hw), norm.eps)
        self.drop = Dropout(dropout_p)
        self.final = final

    def forward(self, x: Tensor) -> Tensor:
        y = F.relu(self.drop(self.norm(self.conv(x))))
        if self.final:
            return F.adaptive_avg_pool2d(y, 1)
        return F.avg_pool2d(y, 2)


def init_parameters(module: nn.Module, seed: int) -> None:
    """Deterministic init: fan-in-scaled uniform weights, zero biases,
    identity affine for norms, reset BN running statistics."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                bound = 1.0 / float(np.sqrt(fan_in))
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.Linear):
                bound = 1.0 / float(np.sqrt(m.in_features))
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, AxisNorm):
                m.gamma.fill_(1.0)
                m.beta.zero_()
                if m.kind == "BN":
                    m.running_mean.zero_()
                    m.running_var.fill_(1.0)


class ParamStore:
    """Name-addressable view of a module's learnable arrays and gradients."""

    def __init__(self, module: nn.Module):
        self.module = module

    def names(self) -> list[str]:
        return [name for name, _ in self.module.named_parameters()]

    def get(self, name: str) -> np.ndarray:
        return dict(self.module.named_parameters())[name].detach().cpu().numpy()

    def grad(self, name: str) -> np.ndarray | None:
        p = dict(self.module.named_parameters())[name]
        return None if p.grad is None else p.grad.detach().cpu().numpy()

    def set(self, name: str, value: np.ndarray) -> None:
        p = dict(self.module.named_parameters())[name]
        if tuple(value.shape) != tuple(p.shape):
            raise ValueError(f"shape mismatch for {name}: {value.shape} vs {tuple(p.shape)}")
        with torch.no_grad():
            p.copy_(torch.as_tensor(value, dtype=p.dtype))

    def n_scalars(self) -> int:
        return sum(p.numel() for p in self.module.parameters())


_MAGIC = b"MOCX0001"


def _state_arrays(module: nn.Module) -> list[tuple[str, Tensor]]:
    arrays = list(module.named_parameters())
    arrays += [(name, buf) for name, buf in module.named_buffers()]
    return arrays


def save_checkpoint(module: nn.Module, path: Path, meta: dict | None = None) -> None:
    """Write parameters and buffers: JSON header, then raw <f4 payload."""
    arrays = _state_arrays(module)
    header = {
        "arrays": [{"name": name, "shape": list(t.shape), "dtype": "<f4"}
                   for name, t in arrays],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, t in arrays:
            f.write(t.detach().cpu().numpy().astype("<f4").tobytes())


def load_checkpoint(module: nn.Module, path: Path) -> dict:
    """Load a checkpoint written by save_checkpoint; returns its meta dict."""
    with open(path, "rb") as f:
        if f.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a parameter checkpoint")
        (header_len,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(header_len))
        state = dict(_state_arrays(module))
        with torch.no_grad():
            for entry in header["arrays"]:
                shape = tuple(entry["shape"])
                n = int(np.prod(shape)) if shape else 1
                raw = np.frombuffer(f.read(n * 4), dtype="<f4").reshape(shape)
                if entry["name"] not in state:
                    raise ValueError(f"{path}: unexpected array {entry['name']!r}")
                target = state[entry["name"]]
                if tuple(target.shape) != shape:
                    raise ValueError(f"{path}: shape mismatch for {entry['name']!r}")
                target.copy_(torch.from_numpy(raw.copy()).to(target.dtype))
    return header["meta"]


@dataclass
class GradCheckResult:
    name: str
    tolerance: float
    max_rel_err: float
    per_input: dict[str, float]
    n_checked: int

    @property
    def passed(self) -> bool:
        return np.isfinite(self.max_rel_err) and self.max_rel_err <= self.tolerance


def grad_check(fn: Callable[..., Tensor], inputs: Mapping[str, Tensor],
               tolerance: float = 1e-4, step: float = 1e-5,
               max_samples_per_array: int | None = None,
               name: str = "op", seed: int = 0) -> GradCheckResult:
    """Compare analytic gradients of a scalar-valued fn against central
    finite differences in double precision.

    Every entry of `inputs` is treated as differentiable. Arrays larger
    than `max_samples_per_array` are spot-checked on a deterministic
    random subset of elements; smaller arrays are checked exhaustively.

    Elements whose difference quotient misses the tolerance are retried
    at smaller steps: near a ReLU kink the quotient at the base step can
    straddle the kink even though the point itself is differentiable.
    A genuinely wrong analytic gradient keeps failing as the step
    shrinks, so refinement never masks real defects.
    """
    leaves = {k: v.detach().double().requires_grad_(True) for k, v in inputs.items()}
    loss = fn(**leaves)
    if loss.numel() != 1:
        raise ValueError("fn under grad_check must return a scalar")
    grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
    analytic = {k: g for k, g in zip(leaves, grads)}

    rng = np.random.default_rng(seed)
    per_input: dict[str, float] = {}
    n_checked = 0
    worst = 0.0
    for key, leaf in leaves.items():
        a = analytic[key]
        if a is None:
            a = torch.zeros_like(leaf)
        if not torch.all(torch.isfinite(a)):
            per_input[key] = float("inf")
            worst = float("inf")
            continue
        numel = leaf.numel()
        if max_samples_per_array is not None and numel > max_samples_per_array:
            idx = rng.choice(numel, size=max_samples_per_array, replace=False)
        else:
            idx = np.arange(numel)
        flat = leaf.detach().view(-1)
        worst_here = 0.0
        with torch.no_grad():
            for i in idx:
                orig = flat[i].item()
                ana = a.reshape(-1)[i].item()
                err = math.inf
                for h in (step, step / 16.0, step / 256.0):
                    flat[i] = orig + h
                    up = fn(**leaves).item()
                    flat[i] = orig - h
                    down = fn(**leaves).item()
                    flat[i] = orig
                    numeric = (up - down) / (2.0 * h)
                    err = abs(ana - numeric) / (max(abs(ana), abs(numeric)) + 1e-6)
                    if err <= tolerance:
                        break
                worst_here = max(worst_here, err)
                n_checked += 1
        per_input[key] = worst_here
        worst = max(worst, worst_here)
    return GradCheckResult(name=name, tolerance=tolerance, max_rel_err=worst,
                           per_input=per_input, n_checked=n_checked)


def grad_check_module(module: nn.Module, x: Tensor,
                      output_loss: Callable[..., Tensor] | None = None,
                      tolerance: float = 1e-4, step: float = 1e-5,
                      max_samples_per_array: int | None = None,
                      name: str = "module", seed: int = 0) -> GradCheckResult:
    """grad_check over a module's input and every named parameter.

    Works on a double-precision copy in eval mode (dropout disabled).
    `output_loss` maps the module output to a scalar; the default is a
    frozen random projection, which exercises every output element's
    gradient path.
    """
    mod = copy.deepcopy(module).double()
    mod.eval()
    params = {k: v.detach().clone() for k, v in mod.named_parameters()}
    buffers = {k: v.detach().clone() for k, v in mod.named_buffers()}

    if output_loss is None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            ref = mod(x.double())
        proj = torch.randn(ref.shape, generator=gen, dtype=torch.float64)

        def output_loss(out):
            return (out * proj).sum()

    def fn(x, **named):
        out = torch.func.functional_call(mod, {**named, **buffers}, (x,))
        return output_loss(out)

    return grad_check(fn, {"x": x, **params}, tolerance, step,
                      max_samples_per_array, name, seed)
