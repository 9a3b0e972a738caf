"""Compound-fault label model.

A system state is a combination of four independent fault severities:
inner race fault (2 levels), outer race fault (2 levels), misalignment
(3 levels) and unbalance (3 levels). The joint class index is the
mixed-radix composition of the four digits, giving 2*2*3*3 = 36 classes.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

FAULT_NAMES = ("irf", "orf", "mis", "unb")
FAULT_LEVELS = (2, 2, 3, 3)
N_CLASSES = 36


@dataclass(frozen=True)
class CompoundLabel:
    """Severity indices for the four fault types."""

    irf: int
    orf: int
    mis: int
    unb: int

    def __post_init__(self):
        for name, n in zip(FAULT_NAMES, FAULT_LEVELS):
            v = getattr(self, name)
            if not 0 <= v < n:
                raise ValueError(f"{name} severity {v} outside [0, {n})")

    @property
    def joint(self) -> int:
        return ((self.irf * 2 + self.orf) * 3 + self.mis) * 3 + self.unb

    @classmethod
    def from_joint(cls, joint: int) -> "CompoundLabel":
        if not 0 <= joint < N_CLASSES:
            raise ValueError(f"joint class {joint} outside [0, {N_CLASSES})")
        joint, unb = divmod(joint, 3)
        joint, mis = divmod(joint, 3)
        irf, orf = divmod(joint, 2)
        return cls(irf, orf, mis, unb)

    def digits(self) -> tuple[int, int, int, int]:
        return (self.irf, self.orf, self.mis, self.unb)


def all_compound_labels() -> list[CompoundLabel]:
    """All 36 combinations in joint-index order."""
    return [CompoundLabel(i, o, m, u)
            for i, o, m, u in product(range(2), range(2), range(3), range(3))]


def single_fault_labels() -> list[CompoundLabel]:
    """The all-normal state plus the six single-fault severities."""
    labels = [CompoundLabel(0, 0, 0, 0), CompoundLabel(1, 0, 0, 0),
              CompoundLabel(0, 1, 0, 0)]
    labels += [CompoundLabel(0, 0, m, 0) for m in (1, 2)]
    labels += [CompoundLabel(0, 0, 0, u) for u in (1, 2)]
    return labels
