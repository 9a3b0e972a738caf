"""Evaluation metrics and report assembly.

Joint 36-class predictions are composed from per-task argmaxes via the
mixed-radix label codec; macro F1 averages per-class F1 over an explicit
class list with the 0/0 -> 0 convention. Reports are flattened into CSV
tables (architecture comparison, normalization ablation, per-fault
scores, loss trajectories, parameter counts) plus a raw JSON bundle.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .labels import CompoundLabel, FAULT_LEVELS, FAULT_NAMES, N_CLASSES

_RADIX = np.array([18, 9, 3, 1], dtype=np.int64)


def joint_class(digits: Sequence[int]) -> int:
    """Mixed-radix joint class of four per-task severity indices."""
    irf, orf, mis, unb = (int(d) for d in digits)
    return CompoundLabel(irf, orf, mis, unb).joint


def decode_joint(joint: int) -> tuple[int, int, int, int]:
    return CompoundLabel.from_joint(joint).digits()


def joint_class_array(digits: np.ndarray) -> np.ndarray:
    """Vectorized joint_class for an (N, 4) digit array."""
    digits = np.asarray(digits, dtype=np.int64)
    if digits.ndim != 2 or digits.shape[1] != 4:
        raise ValueError(f"expected (N, 4) digits, got {digits.shape}")
    for i, n in enumerate(FAULT_LEVELS):
        if np.any((digits[:, i] < 0) | (digits[:, i] >= n)):
            raise ValueError(f"{FAULT_NAMES[i]} severity outside [0, {n})")
    return digits @ _RADIX


def decode_joint_array(joint: np.ndarray) -> np.ndarray:
    joint = np.asarray(joint, dtype=np.int64)
    if np.any((joint < 0) | (joint >= N_CLASSES)):
        raise ValueError(f"joint class outside [0, {N_CLASSES})")
    rem, unb = np.divmod(joint, 3)
    rem, mis = np.divmod(rem, 3)
    irf, orf = np.divmod(rem, 2)
    return np.stack([irf, orf, mis, unb], axis=1)


def macro_f1(preds: np.ndarray, labels: np.ndarray,
             classes: int | Sequence[int]) -> float:
    """Unweighted mean of per-class F1 over `classes`.

    A class with no true positives, false positives and false negatives
    contributes 0. Predictions outside the class list only produce
    false negatives for the true class.
    """
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ValueError("preds and labels must be equal-length 1-d arrays")
    if preds.size == 0:
        raise ValueError("macro_f1 of an empty sample set is undefined")
    class_list = list(range(classes)) if isinstance(classes, int) else list(classes)
    if isinstance(classes, int):
        if np.any((preds < 0) | (preds >= classes)) or np.any((labels < 0) | (labels >= classes)):
            raise ValueError(f"indices outside [0, {classes})")
    f1_sum = 0.0
    for c in class_list:
        tp = int(np.sum((preds == c) & (labels == c)))
        fp = int(np.sum((preds == c) & (labels != c)))
        fn = int(np.sum((preds != c) & (labels == c)))
        denom = 2 * tp + fp + fn
        f1_sum += (2.0 * tp / denom) if denom else 0.0
    return f1_sum / len(class_list)


def per_fault_f1(task_preds: np.ndarray, task_labels: np.ndarray) -> dict[str, float]:
    """Macro F1 per fault type from (N, 4) severity predictions/labels."""
    task_preds = np.asarray(task_preds, dtype=np.int64)
    task_labels = np.asarray(task_labels, dtype=np.int64)
    if task_preds.shape != task_labels.shape or task_preds.shape[1] != 4:
        raise ValueError("expected matching (N, 4) arrays")
    return {name: macro_f1(task_preds[:, i], task_labels[:, i], FAULT_LEVELS[i])
            for i, name in enumerate(FAULT_NAMES)}


@dataclass
class RunReport:
    """Metrics and logs of one (scenario, variant, norm, seed) run."""

    scenario: str
    variant: str
    norm: str
    seed: int
    joint_macro_f1: float
    fault_f1: dict[str, float]
    param_count: int
    epoch_log: list[dict] = field(default_factory=list)
    wall_clock_s: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(**d)


VARIANT_ORDER = ("MCC", "MOC_STL", "SHARED_TRUNK", "CROSSTALK")
NORM_ORDER = ("LN", "BN", "IN", "TLN", "FLN")
ARCH_TABLE_NORM = "FLN"


def _ordered(values: set[str], order: Sequence[str]) -> list[str]:
    known = [v for v in order if v in values]
    return known + sorted(values.difference(order))


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _mean(vals: list[float]) -> float:
    return float(np.mean(vals)) if vals else float("nan")


def _write_scenario_table(path: Path, runs: list[RunReport], column_of) -> None:
    """Scenario-by-column mean-F1 grid with an Average row."""
    columns = _ordered({column_of(r) for r in runs},
                       VARIANT_ORDER + NORM_ORDER)
    scenarios = sorted({r.scenario for r in runs})
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["scenario"] + columns)
        cells = {}
        for scen in scenarios:
            row = [scen]
            for col in columns:
                vals = [r.joint_macro_f1 for r in runs
                        if r.scenario == scen and column_of(r) == col]
                cells[(scen, col)] = _mean(vals)
                row.append(_fmt(cells[(scen, col)]) if vals else "")
            writer.writerow(row)
        avg_row = ["Average"]
        for col in columns:
            vals = [cells[(s, col)] for s in scenarios
                    if not np.isnan(cells[(s, col)])]
            avg_row.append(_fmt(_mean(vals)) if vals else "")
        writer.writerow(avg_row)


def emit_report(runs: list[RunReport], out_dir: Path) -> list[Path]:
    """Write the CSV tables and the raw JSON bundle; returns file paths."""
    if not runs:
        raise ValueError("no runs to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []

    arch_runs = [r for r in runs if r.norm == ARCH_TABLE_NORM] or runs
    path = out_dir / "table_architecture.csv"
    _write_scenario_table(path, arch_runs, lambda r: r.variant)
    paths.append(path)

    norm_runs = [r for r in runs if r.variant == "CROSSTALK"] or runs
    path = out_dir / "table_normalization.csv"
    _write_scenario_table(path, norm_runs, lambda r: r.norm)
    paths.append(path)

    path = out_dir / "per_fault.csv"
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["variant", "norm"] + list(FAULT_NAMES) + ["joint"])
        combos = sorted({(r.variant, r.norm) for r in runs},
                        key=lambda vn: (_safe_index(VARIANT_ORDER, vn[0]),
                                        _safe_index(NORM_ORDER, vn[1])))
        for variant, norm in combos:
            sel = [r for r in runs if r.variant == variant and r.norm == norm]
            row = [variant, norm]
            row += [_fmt(_mean([r.fault_f1[name] for r in sel])) for name in FAULT_NAMES]
            row.append(_fmt(_mean([r.joint_macro_f1 for r in sel])))
            writer.writerow(row)
    paths.append(path)

    path = out_dir / "trajectories.csv"
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["scenario", "variant", "norm", "seed",
                         "phase", "epoch", "split", "task", "loss"])
        for r in sorted(runs, key=lambda r: (r.scenario, r.variant, r.norm, r.seed)):
            for entry in r.epoch_log:
                writer.writerow([r.scenario, r.variant, r.norm, r.seed,
                                 entry["phase"], entry["epoch"], entry["split"],
                                 entry["task"], _fmt(entry["loss"])])
    paths.append(path)

    path = out_dir / "params.csv"
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["variant", "norm", "param_count", "mean_joint_macro_f1"])
        for variant, norm in combos:
            sel = [r for r in runs if r.variant == variant and r.norm == norm]
            writer.writerow([variant, norm, sel[0].param_count,
                             _fmt(_mean([r.joint_macro_f1 for r in sel]))])
    paths.append(path)

    path = out_dir / "runs.json"
    with open(path, "w") as f:
        json.dump([r.to_dict() for r in sorted(
            runs, key=lambda r: (r.scenario, r.variant, r.norm, r.seed))],
            f, indent=1, sort_keys=True)
        f.write("\n")
    paths.append(path)
    return paths


def _safe_index(order: Sequence[str], value: str) -> int:
    return order.index(value) if value in order else len(order)
