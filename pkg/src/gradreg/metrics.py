"""Evaluation metrics over hard label maps and deformation fields."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_erosion, generate_binary_structure
from scipy.spatial import cKDTree

from .deformation import jacobian_det, warp
from .volume_io import LabelMap

JACOBIAN_EPS = 1e-9
_SIX_CONNECTED = generate_binary_structure(3, 1)


def _mask(x, k):
    return (x.labels if isinstance(x, LabelMap) else np.asarray(x)) == k


def dice(a, b, k: int) -> float:
    """Dice overlap of label ``k``; two empty masks score 1."""
    A, B = _mask(a, k), _mask(b, k)
    sa, sb = int(A.sum()), int(B.sum())
    if sa + sb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(A, B).sum()) / (sa + sb)


def dice30(scores) -> float:
    """Mean of the lowest ``ceil(0.3 n)`` scores."""
    s = np.sort(np.asarray(scores, dtype=np.float64))
    if s.size == 0:
        raise ValueError("dice30 of an empty score list")
    return float(s[:math.ceil(0.3 * s.size)].mean())


def surface(mask: np.ndarray) -> np.ndarray:
    """Voxels of ``mask`` removed by one 6-connected erosion."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~binary_erosion(mask, structure=_SIX_CONNECTED, border_value=0)


def surface_distances(a: np.ndarray, b: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Pooled symmetric nearest-surface distances in mm."""
    sp = np.asarray(spacing, dtype=np.float64)
    pa = np.argwhere(surface(a)) * sp
    pb = np.argwhere(surface(b)) * sp
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    return np.concatenate([d_ab, d_ba])


def hd95(a, b, k: int, spacing=None) -> float:
    """95th percentile symmetric surface distance for label ``k``; NaN if either mask is empty."""
    if spacing is None:
        spacing = a.spacing if isinstance(a, LabelMap) else (1.0, 1.0, 1.0)
    A, B = _mask(a, k), _mask(b, k)
    if not A.any() or not B.any():
        return math.nan
    return float(np.percentile(surface_distances(A, B, spacing), 95))


def hausdorff(a, b, k: int, spacing=None) -> float:
    if spacing is None:
        spacing = a.spacing if isinstance(a, LabelMap) else (1.0, 1.0, 1.0)
    A, B = _mask(a, k), _mask(b, k)
    if not A.any() or not B.any():
        return math.nan
    return float(surface_distances(A, B, spacing).max())


def std_log_jacobian(phi) -> float:
    """Std of ``log(max(det J, eps))`` over interior voxels."""
    det = jacobian_det(phi)[1:-1, 1:-1, 1:-1]
    return float(np.log(np.maximum(det, JACOBIAN_EPS)).std())


@dataclass
class CaseResult:
    case: str
    labels: list
    dice: list
    hd95: list
    dice_unreg: list
    hd95_unreg: list
    stdj: float


def evaluate_case(moving_seg: LabelMap, fixed_seg: LabelMap, phi, case: str = "") -> CaseResult:
    """Warp the moving labels with nearest sampling and score them against the fixed labels."""
    warped = warp(moving_seg, phi, mode="nearest")
    sp = fixed_seg.spacing
    ks = list(range(1, fixed_seg.num_classes))
    return CaseResult(
        case=case,
        labels=ks,
        dice=[dice(warped, fixed_seg, k) for k in ks],
        hd95=[hd95(warped, fixed_seg, k, sp) for k in ks],
        dice_unreg=[dice(moving_seg, fixed_seg, k) for k in ks],
        hd95_unreg=[hd95(moving_seg, fixed_seg, k, sp) for k in ks],
        stdj=std_log_jacobian(phi),
    )


@dataclass
class EvalReport:
    cases: list = field(default_factory=list)

    def summary(self, registered: bool = True) -> dict:
        d = [x for c in self.cases for x in (c.dice if registered else c.dice_unreg)]
        h = [x for c in self.cases for x in (c.hd95 if registered else c.hd95_unreg)]
        h = [x for x in h if not math.isnan(x)]
        out = {"Dice": float(np.mean(d)), "Dice30": dice30(d),
               "Hd95": float(np.mean(h)) if h else math.nan}
        out["StdJ"] = float(np.mean([c.stdj for c in self.cases])) if registered else math.nan
        return out

    def rows(self):
        for c in self.cases:
            for k, d, h in zip(c.labels, c.dice, c.hd95):
                yield c.case, k, d, h

    def to_table(self, sep: str = "\t") -> str:
        lines = [sep.join(("case", "label", "dice", "hd95"))]
        lines += [sep.join((c, str(k), f"{d:.6f}", "missing" if math.isnan(h) else f"{h:.6f}"))
                  for c, k, d, h in self.rows()]
        return "\n".join(lines) + "\n"

    def summary_block(self, sep: str = "\t") -> str:
        def fmt(x):
            return "" if math.isnan(x) else f"{x:.4f}"

        lines = [sep.join(("row", "Dice", "Dice30", "Hd95", "StdJ"))]
        for name, reg in (("Unregistered", False), ("Registered", True)):
            s = self.summary(reg)
            lines.append(sep.join((name, fmt(s["Dice"]), fmt(s["Dice30"]), fmt(s["Hd95"]), fmt(s["StdJ"]))))
        return "\n".join(lines) + "\n"
