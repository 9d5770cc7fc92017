"""Segmentation metrics: IoU and BoundaryIoU over binary masks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_erosion

from .errors import InvalidInput


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union. Two empty masks count as a perfect match."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise InvalidInput("mask shapes differ")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def boundary_band(mask: np.ndarray, d: int) -> np.ndarray:
    """Pixels of the mask within Chebyshev distance d of the background
    (the image border counts as background)."""
    mask = np.asarray(mask, dtype=bool)
    eroded = binary_erosion(mask, structure=np.ones((3, 3), dtype=bool),
                            iterations=d, border_value=0)
    return mask & ~eroded


def default_band_width(shape) -> int:
    """2% of the image diagonal, at least one pixel."""
    h, w = shape
    return max(int(round(0.02 * np.hypot(h, w))), 1)


def boundary_iou(a: np.ndarray, b: np.ndarray, d: int | None = None) -> float:
    """IoU restricted to each mask's boundary band of width d."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise InvalidInput("mask shapes differ")
    if d is None:
        d = default_band_width(a.shape)
    if not a.any() and not b.any():
        return 1.0
    return iou(boundary_band(a, d), boundary_band(b, d))


@dataclass
class EvalReport:
    """Per-query metrics plus their means and wall-clock timing."""

    queries: list = field(default_factory=list)  # dicts with kind/instance/view/iou/biou
    timing: dict = field(default_factory=dict)

    def add(self, kind: str, instance: int, view: int, iou_val: float,
            biou_val: float, **extra) -> None:
        entry = {"kind": kind, "instance": instance, "view": view,
                 "iou": float(iou_val), "biou": float(biou_val)}
        entry.update(extra)
        self.queries.append(entry)

    def mean(self, metric: str, kind: str | None = None) -> float:
        vals = [q[metric] for q in self.queries if kind is None or q["kind"] == kind]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def miou(self) -> float:
        return self.mean("iou")

    @property
    def mbiou(self) -> float:
        return self.mean("biou")

    def to_dict(self) -> dict:
        return {"queries": self.queries,
                "miou": self.miou, "mbiou": self.mbiou,
                "timing": self.timing}

    def to_csv(self) -> str:
        lines = ["kind,instance,view,iou,biou"]
        for q in self.queries:
            lines.append(f"{q['kind']},{q['instance']},{q['view']},"
                         f"{q['iou']:.6f},{q['biou']:.6f}")
        return "\n".join(lines) + "\n"
