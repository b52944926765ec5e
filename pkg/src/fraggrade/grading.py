"""Fragmentation grades, their ratio intervals, and mask-derived ratios."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class Grade(str, enum.Enum):
    """Clinical fragmentation grade. Letter order is severity order."""

    A = "A"
    B = "B"
    C = "C"
    D = "D"


_ORDER = (Grade.A, Grade.B, Grade.C, Grade.D)


@dataclass(frozen=True)
class GradeInterval:
    y_min: float
    y_max: float

    def __post_init__(self):
        if not (0.0 <= self.y_min < self.y_max <= 1.0):
            raise ValueError(f"invalid interval [{self.y_min}, {self.y_max}]")

    def __contains__(self, r: float) -> bool:
        return self.y_min <= r <= self.y_max


# Shared endpoints; membership for ratio_to_grade is lower-inclusive.
BOUNDARIES = (0.0, 0.10, 0.25, 0.50, 1.0)

_INTERVALS = {
    g: GradeInterval(BOUNDARIES[i], BOUNDARIES[i + 1]) for i, g in enumerate(_ORDER)
}


def grade_to_interval(g: Grade | str) -> GradeInterval:
    return _INTERVALS[Grade(g)]


def ratio_to_grade(r: float) -> Grade:
    """Map a fragmentation ratio to its grade (intervals are [lo, hi), D closed at 1)."""
    r = float(r)
    if not (0.0 <= r <= 1.0) or np.isnan(r):
        raise ValueError(f"ratio must lie in [0, 1], got {r}")
    for g in reversed(_ORDER):
        if r >= _INTERVALS[g].y_min:
            return g
    return Grade.A  # unreachable


def mask_to_ratio(fragment_mask, embryo_mask) -> float:
    """|fragment AND embryo| / |embryo| by pixel counting."""
    frag = np.asarray(fragment_mask).astype(bool)
    emb = np.asarray(embryo_mask).astype(bool)
    if frag.shape != emb.shape:
        raise ValueError(f"mask shapes differ: {frag.shape} vs {emb.shape}")
    area = int(emb.sum())
    if area == 0:
        raise ValueError("embryo mask is empty; ratio undefined")
    return int(np.logical_and(frag, emb).sum()) / area
