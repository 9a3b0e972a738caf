"""Benchmark runner: dataset/spectrogram caching, pretrain reuse, and the
scenario x cell x seed matrix with resumable run directories.

A cell is one (scenario, variant, norm, seed) training run. Completed
cells are identified by their report.json carrying a matching config
digest and are skipped on re-runs. Pretrained checkpoints depend only on
(source domain, variant, norm, seed, pretrain hyperparameters) and are
shared across scenarios with the same source.
"""

from __future__ import annotations

import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import preprocess, siggen
from .config import (config_digest, model_spec_from_config, profile_from_config,
                     train_config_from_config)
from .metrics import RunReport, emit_report, joint_class_array, macro_f1, per_fault_f1
from .models import build_model, param_count
from .ndcore import load_checkpoint, save_checkpoint
from .trainer import (DomainTensors, finetune, label_mask_target, predict_digits,
                      pretrain, split_source)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _dataset_fragment(cfg: dict, tag: str) -> dict:
    ds = cfg["dataset"]
    return {"tag": tag, "profile": ds["domains"][tag],
            "segments_per_class": ds["segments_per_class"],
            "class_filter": ds["class_filter"], "seed": ds["seed"],
            "gear_ratio": ds["gear_ratio"]}


def _domain_seed(cfg: dict, tag: str) -> int:
    # distinct per-domain seed streams from one dataset seed
    tags = sorted(cfg["dataset"]["domains"])
    return cfg["dataset"]["seed"] + 7919 * tags.index(tag)


def dataset_dir(cfg: dict, tag: str, out_dir: Path) -> Path:
    return Path(out_dir) / "datasets" / f"{tag}_{config_digest(_dataset_fragment(cfg, tag))}"


def ensure_dataset(cfg: dict, tag: str, out_dir: Path) -> Path:
    """Generate the domain on disk unless it is already present."""
    ddir = dataset_dir(cfg, tag, out_dir)
    if (ddir / siggen.MANIFEST_NAME).exists() and (ddir / siggen.SEGMENTS_NAME).exists():
        return ddir
    ds = cfg["dataset"]
    _log(f"[gen] domain {tag} -> {ddir}")
    siggen.write_domain(ddir, profile_from_config(ds["domains"][tag]),
                        ds["segments_per_class"], ds["class_filter"],
                        seed=_domain_seed(cfg, tag), subset=tag,
                        gear_ratio=ds["gear_ratio"])
    return ddir


def load_domain_tensors(cfg: dict, tag: str, out_dir: Path) -> DomainTensors:
    """Domain spectrograms, computed once and cached next to the dataset."""
    ddir = ensure_dataset(cfg, tag, out_dir)
    cache = ddir / "spectrograms"
    domain = siggen.load_domain(ddir)
    if (cache / preprocess.SPEC_MANIFEST_NAME).exists():
        specs = preprocess.read_spectrogram_cache(cache)
        if specs.shape[0] != len(domain):
            specs = None
    else:
        specs = None
    if specs is None:
        _log(f"[spec] computing spectrograms for domain {tag}")
        specs = preprocess.domain_spectrograms(domain)
        preprocess.write_spectrogram_cache(cache, specs)
    return DomainTensors(specs=specs, digits=domain.labels.copy(),
                         joint=domain.joint.copy(), classes=domain.classes,
                         subset=tag)


@dataclass(frozen=True)
class Cell:
    source: str
    target: str
    variant: str
    norm: str
    seed: int

    @property
    def scenario(self) -> str:
        return f"{self.source}->{self.target}"

    @property
    def slug(self) -> str:
        return f"{self.source}2{self.target}_{self.variant}_{self.norm}_s{self.seed}"


def _pretrain_digest(cfg: dict, cell: Cell) -> str:
    tr = cfg["train"]
    frag = {"dataset": _dataset_fragment(cfg, cell.source),
            "domain_seed": _domain_seed(cfg, cell.source),
            "model": cfg["model"], "variant": cell.variant, "norm": cell.norm,
            "seed": cell.seed,
            "pretrain": {k: tr[k] for k in ("epochs_pretrain", "batch_size", "lr",
                                            "beta1", "beta2", "adam_eps")}}
    return config_digest(frag)


def _cell_digest(cfg: dict, cell: Cell) -> str:
    frag = {"source": _dataset_fragment(cfg, cell.source),
            "target": _dataset_fragment(cfg, cell.target),
            "domain_seeds": [_domain_seed(cfg, cell.source),
                             _domain_seed(cfg, cell.target)],
            "model": cfg["model"], "train": cfg["train"],
            "variant": cell.variant, "norm": cell.norm, "seed": cell.seed}
    return config_digest(frag)


def pretrain_with_cache(cfg: dict, cell: Cell, source: DomainTensors,
                        out_dir: Path):
    spec = model_spec_from_config(cfg, variant=cell.variant, norm=cell.norm)
    tcfg = train_config_from_config(cfg)
    splits = split_source(source, seed=cell.seed)
    digest = _pretrain_digest(cfg, cell)
    ckpt = Path(out_dir) / "pretrained" / f"{cell.source}_{cell.variant}_{cell.norm}_s{cell.seed}_{digest}.ckpt"
    log_path = ckpt.with_suffix(".log.json")
    if ckpt.exists() and log_path.exists():
        model = build_model(spec)
        load_checkpoint(model, ckpt)
        with open(log_path) as f:
            log = json.load(f)
        return model, log, splits
    _log(f"[pretrain] {cell.source} {cell.variant}/{cell.norm} seed={cell.seed}")
    model, log = pretrain(spec, source, splits, tcfg, seed=cell.seed)
    save_checkpoint(model, ckpt, meta={"digest": digest})
    with open(log_path, "w") as f:
        json.dump(log, f)
    return model, log, splits


def run_cell(cfg: dict, cell: Cell, out_dir: Path,
             resume: bool = True) -> RunReport:
    """Train and evaluate one cell, reusing a completed run directory."""
    out_dir = Path(out_dir)
    cell_dir = out_dir / "cells" / cell.slug
    report_path = cell_dir / "report.json"
    digest = _cell_digest(cfg, cell)
    if resume and report_path.exists():
        with open(report_path) as f:
            payload = json.load(f)
        if payload.get("complete") and payload.get("digest") == digest:
            _log(f"[skip] {cell.slug} (complete)")
            return RunReport.from_dict(payload["report"])

    t0 = time.perf_counter()
    source = load_domain_tensors(cfg, cell.source, out_dir)
    target = load_domain_tensors(cfg, cell.target, out_dir)
    tcfg = train_config_from_config(cfg)
    spec = model_spec_from_config(cfg, variant=cell.variant, norm=cell.norm)

    model, pre_log, src_splits = pretrain_with_cache(cfg, cell, source, out_dir)
    tgt_splits = label_mask_target(target, tcfg.labeled_fraction, seed=cell.seed)
    _log(f"[finetune] {cell.slug}")
    model, ft_log = finetune(model, source, src_splits, target, tgt_splits,
                             tcfg, seed=cell.seed)
    assert tgt_splits.test_access_count == 0, "test labels touched during training"

    test_idx = tgt_splits.test_indices()
    pred_digits = predict_digits(model, target, test_idx)
    true_digits = target.digits[test_idx]
    report = RunReport(
        scenario=cell.scenario, variant=cell.variant, norm=cell.norm,
        seed=cell.seed,
        joint_macro_f1=macro_f1(joint_class_array(pred_digits),
                                target.joint[test_idx], target.classes),
        fault_f1=per_fault_f1(pred_digits, true_digits),
        param_count=param_count(spec),
        epoch_log=pre_log + ft_log,
        wall_clock_s=time.perf_counter() - t0,
        extra={"digest": digest, "n_test": int(len(test_idx))},
    )
    cell_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, cell_dir / "checkpoint.bin",
                    meta={"cell": cell.slug, "digest": digest})
    with open(report_path, "w") as f:
        json.dump({"complete": True, "digest": digest,
                   "report": report.to_dict()}, f, indent=1, sort_keys=True)
        f.write("\n")
    _log(f"[done] {cell.slug} joint_f1={report.joint_macro_f1:.4f} "
         f"({report.wall_clock_s:.0f}s)")
    return report


def bench_cells(cfg: dict) -> list[Cell]:
    return [Cell(source=src, target=tgt, variant=c["variant"], norm=c["norm"],
                 seed=seed)
            for src, tgt in cfg["scenarios"]
            for c in cfg["bench"]["cells"]
            for seed in cfg["train"]["seeds"]]


def _run_cell_job(args) -> dict:
    cfg, cell, out_dir = args
    return run_cell(cfg, cell, Path(out_dir)).to_dict()


def run_bench(cfg: dict, out_dir: Path, jobs: int | None = None,
              cells: list[Cell] | None = None) -> list[RunReport]:
    """Run the full matrix (resumable) and emit the report tables."""
    out_dir = Path(out_dir)
    cells = cells if cells is not None else bench_cells(cfg)
    jobs = jobs or cfg["bench"]["jobs"]
    for src, tgt in {(c.source, c.target) for c in cells}:
        ensure_dataset(cfg, src, out_dir)
        ensure_dataset(cfg, tgt, out_dir)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = [RunReport.from_dict(d) for d in pool.map(
                _run_cell_job, [(cfg, cell, str(out_dir)) for cell in cells])]
    else:
        reports = [run_cell(cfg, cell, out_dir) for cell in cells]
    emit_report(reports, out_dir / "report")
    return reports
