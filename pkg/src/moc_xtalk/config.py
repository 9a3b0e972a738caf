"""Experiment configuration: a single JSON document with full defaults.

User files are deep-merged over the defaults and validated; validation
errors carry the dotted path of the offending field.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .labels import N_CLASSES
from .losses import KernelBank, LossWeights
from .models import VARIANTS, ModelSpec
from .ndcore import NORM_KINDS, NormSpec
from .siggen import DEFAULT_PROFILES, SubsetProfile
from .trainer import TrainConfig

DEFAULT_CONFIG = {
    "out_dir": "runs",
    "dataset": {
        "segments_per_class": 30,
        "class_filter": "all36",
        "seed": 1234,
        "gear_ratio": 1.0,
        "domains": {
            "A": {"pattern": "sinusoidal", "base_rpm": 3000.0,
                  "modulation_period_s": 10.0, "modulation_depth": 0.10,
                  "constant_levels": [], "domain_gain": 1.0,
                  "noise_sigma": 0.3, "gain_jitter": 0.2},
            "B": {"pattern": "triangular", "base_rpm": 4000.0,
                  "modulation_period_s": 5.0, "modulation_depth": 0.10,
                  "constant_levels": [], "domain_gain": 1.5,
                  "noise_sigma": 0.3, "gain_jitter": 0.0},
            "C": {"pattern": "constant", "base_rpm": 3000.0,
                  "modulation_period_s": 0.0, "modulation_depth": 0.10,
                  "constant_levels": [1800.0, 2100.0, 2400.0, 2700.0, 3000.0],
                  "domain_gain": 0.7, "noise_sigma": 0.3, "gain_jitter": 0.0},
        },
    },
    "model": {
        "variant": "CROSSTALK",
        "norm_kind": "FLN",
        "norm_eps": 1e-5,
        "tsl_hidden": 64,
        "ctl_kernel": 1,
        "dropout_p": 0.2,
    },
    "train": {
        "epochs_pretrain": 100,
        "epochs_finetune": 100,
        "batch_size": 16,
        "lr": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "adam_eps": 1e-8,
        "labeled_fraction": 0.10,
        "lambda_mmd": 1.0,
        "lambda_em": 0.1,
        "mmd_multipliers": [0.25, 0.5, 1.0, 2.0, 4.0],
        "target_labeled_per_batch": 8,
        "source_cce_during_finetune": False,
        "seeds": [0, 1, 2],
    },
    "scenarios": [["A", "B"], ["A", "C"], ["B", "A"],
                  ["B", "C"], ["C", "A"], ["C", "B"]],
    "bench": {
        "cells": [
            {"variant": "MCC", "norm": "FLN"},
            {"variant": "MOC_STL", "norm": "FLN"},
            {"variant": "SHARED_TRUNK", "norm": "FLN"},
            {"variant": "CROSSTALK", "norm": "FLN"},
            {"variant": "CROSSTALK", "norm": "LN"},
            {"variant": "CROSSTALK", "norm": "BN"},
            {"variant": "CROSSTALK", "norm": "IN"},
            {"variant": "CROSSTALK", "norm": "TLN"},
        ],
        "jobs": 1,
    },
}


class ConfigError(ValueError):
    """Invalid configuration; `field` holds the dotted path."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(here, "unknown field")
        if isinstance(base[key], dict) and key != "domains":
            if not isinstance(value, dict):
                raise ConfigError(here, f"expected object, got {type(value).__name__}")
            out[key] = _merge(base[key], value, here)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _require(cond: bool, field: str, message: str) -> None:
    if not cond:
        raise ConfigError(field, message)


def _num(cfg, field, lo=None, hi=None, integer=False):
    node = cfg
    for part in field.split("."):
        node = node[part]
    kind = (int,) if integer else (int, float)
    _require(isinstance(node, kind) and not isinstance(node, bool), field,
             f"expected {'integer' if integer else 'number'}, got {node!r}")
    if lo is not None:
        _require(node >= lo, field, f"must be >= {lo}, got {node}")
    if hi is not None:
        _require(node <= hi, field, f"must be <= {hi}, got {node}")
    return node


def validate_config(cfg: dict) -> None:
    _require(isinstance(cfg.get("out_dir"), str) and cfg["out_dir"], "out_dir",
             "expected nonempty string")
    ds = cfg["dataset"]
    _num(cfg, "dataset.segments_per_class", lo=1, integer=True)
    _require(ds["class_filter"] in ("all36", "normal_plus_single7"),
             "dataset.class_filter", f"unknown filter {ds['class_filter']!r}")
    _num(cfg, "dataset.seed", lo=0, integer=True)
    _num(cfg, "dataset.gear_ratio", lo=1e-6)
    _require(isinstance(ds["domains"], dict) and ds["domains"],
             "dataset.domains", "expected nonempty object")
    for tag, prof in ds["domains"].items():
        field = f"dataset.domains.{tag}"
        try:
            profile_from_config(prof)
        except (ValueError, TypeError) as exc:
            raise ConfigError(field, str(exc)) from exc

    model = cfg["model"]
    _require(model["variant"] in VARIANTS, "model.variant",
             f"expected one of {VARIANTS}, got {model['variant']!r}")
    _require(model["norm_kind"] in NORM_KINDS, "model.norm_kind",
             f"expected one of {NORM_KINDS}, got {model['norm_kind']!r}")
    _num(cfg, "model.norm_eps", lo=1e-12)
    _num(cfg, "model.tsl_hidden", lo=1, integer=True)
    _num(cfg, "model.ctl_kernel", lo=1, integer=True)
    _num(cfg, "model.dropout_p", lo=0.0, hi=0.99)

    _num(cfg, "train.epochs_pretrain", lo=0, integer=True)
    _num(cfg, "train.epochs_finetune", lo=0, integer=True)
    _num(cfg, "train.batch_size", lo=2, integer=True)
    _num(cfg, "train.lr", lo=1e-12)
    _num(cfg, "train.labeled_fraction", lo=1e-9, hi=1.0)
    _num(cfg, "train.lambda_mmd", lo=0.0)
    _num(cfg, "train.lambda_em", lo=0.0)
    _num(cfg, "train.target_labeled_per_batch", lo=1, integer=True)
    seeds = cfg["train"]["seeds"]
    _require(isinstance(seeds, list) and seeds
             and all(isinstance(s, int) for s in seeds),
             "train.seeds", "expected nonempty list of integers")

    scenarios = cfg["scenarios"]
    _require(isinstance(scenarios, list) and scenarios, "scenarios",
             "expected nonempty list")
    for i, pair in enumerate(scenarios):
        field = f"scenarios[{i}]"
        _require(isinstance(pair, list) and len(pair) == 2, field,
                 "expected [source, target] pair")
        for tag in pair:
            _require(tag in ds["domains"], field, f"domain {tag!r} not defined")
        _require(pair[0] != pair[1], field, "source and target must differ")

    cells = cfg["bench"]["cells"]
    _require(isinstance(cells, list) and cells, "bench.cells",
             "expected nonempty list")
    for i, cell in enumerate(cells):
        field = f"bench.cells[{i}]"
        _require(isinstance(cell, dict) and set(cell) == {"variant", "norm"},
                 field, "expected object with variant and norm")
        _require(cell["variant"] in VARIANTS, field,
                 f"unknown variant {cell['variant']!r}")
        _require(cell["norm"] in NORM_KINDS, field,
                 f"unknown norm {cell['norm']!r}")
    _num(cfg, "bench.jobs", lo=1, integer=True)


def load_config(path: str | Path | None = None) -> dict:
    """Defaults deep-merged with an optional user JSON file, validated."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path) as f:
                user = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("<file>", "top level must be an object")
        cfg = _merge(cfg, user)
    validate_config(cfg)
    return cfg


def profile_from_config(prof: dict) -> SubsetProfile:
    known = {"pattern", "base_rpm", "modulation_period_s", "modulation_depth",
             "constant_levels", "domain_gain", "noise_sigma", "gain_jitter"}
    unknown = set(prof) - known
    if unknown:
        raise ValueError(f"unknown profile field {sorted(unknown)[0]!r}")
    kwargs = dict(prof)
    kwargs["constant_levels"] = tuple(kwargs.get("constant_levels") or ())
    return SubsetProfile(**kwargs)


def model_spec_from_config(cfg: dict, variant: str | None = None,
                           norm: str | None = None) -> ModelSpec:
    model = cfg["model"]
    return ModelSpec(variant=variant or model["variant"],
                     norm=NormSpec(kind=norm or model["norm_kind"],
                                   eps=model["norm_eps"]),
                     tsl_hidden=model["tsl_hidden"],
                     ctl_kernel=model["ctl_kernel"],
                     dropout_p=model["dropout_p"])


def train_config_from_config(cfg: dict) -> TrainConfig:
    tr = cfg["train"]
    return TrainConfig(
        epochs_pretrain=tr["epochs_pretrain"],
        epochs_finetune=tr["epochs_finetune"],
        batch_size=tr["batch_size"],
        lr=tr["lr"], beta1=tr["beta1"], beta2=tr["beta2"],
        adam_eps=tr["adam_eps"],
        labeled_fraction=tr["labeled_fraction"],
        weights=LossWeights(lambda_mmd=tr["lambda_mmd"],
                            lambda_em=tr["lambda_em"]),
        kernel_bank=KernelBank(multipliers=tuple(tr["mmd_multipliers"])),
        target_labeled_per_batch=tr["target_labeled_per_batch"],
        source_cce_during_finetune=tr["source_cce_during_finetune"],
    )


def config_digest(obj) -> str:
    """Short stable hash of any JSON-serializable fragment."""
    canon = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]
