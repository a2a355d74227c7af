"""Similarity, Dice and smoothness terms plus the symmetric deep-supervised objective."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .deformation import activate_increments, downscale_field_targets, integrate
from .volume_io import LabelMap, Volume

DICE_EPS = 1e-5
SIMILARITIES = ("mse", "ncc")


class NoAvailableLabelsWarning(UserWarning):
    pass


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.01
    ds_weights: tuple = (1.0, 0.5, 0.25)

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.alpha <= 0 and self.beta <= 0:
            raise ValueError("at least one of alpha / beta must be positive")
        self.ds_weights = tuple(float(w) for w in self.ds_weights)


def mse(a, b) -> T.Tensor:
    a, b = T.as_tensor(a), T.as_tensor(b)
    return T.mean(T.square(T.sub(a, b)))


def ncc(a, b) -> T.Tensor:
    """``1 - global normalized cross correlation``; a constant input counts as zero correlation."""
    a, b = T.as_tensor(a), T.as_tensor(b)
    ac = T.sub(a, T.mean(a))
    bc = T.sub(b, T.mean(b))
    # test the raw range: the mean of a constant is not always exactly representable
    if np.ptp(a.data) == 0 or np.ptp(b.data) == 0:
        return T.Tensor(np.asarray(1.0, dtype=a.dtype))
    saa = T.tsum(T.square(ac))
    sbb = T.tsum(T.square(bc))
    corr = T.div(T.tsum(T.mul(ac, bc)), T.sqrt(T.mul(saa, sbb)))
    return T.sub(1.0, corr)


def similarity(kind: str):
    if kind not in SIMILARITIES:
        raise ValueError(f"unknown similarity {kind!r}; choose from {SIMILARITIES}")
    return mse if kind == "mse" else ncc


def _class_dice(pred: T.Tensor, target: np.ndarray) -> T.Tensor:
    axes = tuple(range(1, pred.ndim))
    tt = T.Tensor(target.astype(pred.dtype))
    inter = T.tsum(T.mul(pred, tt), axis=axes)
    denom = T.add(T.tsum(pred, axis=axes), T.Tensor(target.sum(axis=axes).astype(pred.dtype) + DICE_EPS))
    return T.div(T.add(T.scalar_mul(inter, 2.0), DICE_EPS), denom)


def soft_dice(pred_onehot, target_onehot) -> T.Tensor:
    """``1 - mean`` foreground soft Dice over channels ``1..K-1``."""
    pred = T.as_tensor(pred_onehot)
    k = pred.shape[0]
    return partial_dice(pred, target_onehot, np.ones(k, dtype=bool))


def partial_dice(pred_onehot, target_onehot, available) -> T.Tensor:
    """Soft Dice loss restricted to foreground classes flagged as available."""
    pred = T.as_tensor(pred_onehot)
    target = np.asarray(target_onehot.data if isinstance(target_onehot, T.Tensor) else target_onehot)
    available = np.asarray(available, dtype=bool)
    idx = np.flatnonzero(available[1:]) + 1
    if idx.size == 0:
        warnings.warn("no available foreground class; Dice term is zero", NoAvailableLabelsWarning)
        return T.Tensor(np.asarray(0.0, dtype=pred.dtype))
    dice = _class_dice(T.getitem(pred, idx), target[idx])
    return T.sub(1.0, T.mean(dice))


def smoothness(g: T.Tensor) -> T.Tensor:
    """Mean squared deviation of the increments from the identity increment 1."""
    return T.mean(T.square(T.sub(g, 1.0)))


@dataclass
class PairTargets:
    """Deep-supervision pyramids for one (moving, fixed) pair."""

    images: tuple  # (moving levels, fixed levels) of [C, D, H, W] arrays
    onehots: tuple  # (moving levels, fixed levels) of [K, D, H, W] arrays or None
    available: np.ndarray | None = None

    @classmethod
    def build(cls, moving, fixed, moving_seg: LabelMap | None, fixed_seg: LabelMap | None, levels: int):
        def imgs(v):
            return [x.data if isinstance(x, Volume) else np.asarray(x)
                    for x in downscale_field_targets(v, levels - 1)]

        def hots(s):
            return None if s is None else [x.onehot() for x in downscale_field_targets(s, levels - 1)]

        avail = None
        if moving_seg is not None and fixed_seg is not None:
            avail = moving_seg.available & fixed_seg.available
        return cls((imgs(moving), imgs(fixed)), (hots(moving_seg), hots(fixed_seg)), avail)

    def swapped(self) -> "PairTargets":
        return PairTargets(self.images[::-1], self.onehots[::-1], self.available)


@dataclass
class LossReport:
    terms: dict = field(default_factory=dict)

    def add(self, key, value):
        self.terms[key] = self.terms.get(key, 0.0) + float(value)

    def to_json(self, **extra) -> str:
        return json.dumps({**extra, **self.terms}, sort_keys=True)


def direction_loss(raw_levels, src_levels, dst_levels, src_hot, dst_hot, available, w: LossWeights,
                   sim_kind: str, report: LossReport, tag: str) -> T.Tensor:
    sim = similarity(sim_kind)
    total = None
    for s, raw in enumerate(raw_levels):
        g = activate_increments(raw)
        phi = integrate(g)
        warped = T.trilinear_sample(T.Tensor(src_levels[s]), phi)
        l_sim = sim(warped, dst_levels[s])
        term = T.scalar_mul(l_sim, w.alpha)
        report.add(f"{tag}/sim", w.ds_weights[s] * float(l_sim.data))
        if w.beta > 0 and src_hot is not None:
            warped_seg = T.trilinear_sample(T.Tensor(src_hot[s]), phi)
            l_sup = partial_dice(warped_seg, dst_hot[s], available)
            term = T.add(term, T.scalar_mul(l_sup, w.beta))
            report.add(f"{tag}/sup", w.ds_weights[s] * float(l_sup.data))
        l_smo = smoothness(g)
        term = T.add(term, T.scalar_mul(l_smo, w.gamma))
        report.add(f"{tag}/smo", w.ds_weights[s] * float(l_smo.data))
        term = T.scalar_mul(term, w.ds_weights[s])
        total = term if total is None else T.add(total, term)
    return total


def total_loss(moving, fixed, segs, raw_mf, raw_fm, w: LossWeights, sim_kind: str = "mse",
               targets: PairTargets | None = None):
    """Symmetric objective summed over both directions and all supervision levels.

    ``segs`` is ``(moving_seg, fixed_seg)`` or ``None`` for unsupervised pairs.
    Returns ``(loss, LossReport)``.
    """
    if len(raw_mf) != len(w.ds_weights) or len(raw_fm) != len(w.ds_weights):
        raise ValueError(f"{len(w.ds_weights)} deep-supervision weights for {len(raw_mf)} heads")
    if targets is None:
        m_seg, f_seg = segs if segs is not None else (None, None)
        targets = PairTargets.build(moving, fixed, m_seg, f_seg, len(raw_mf))
    report = LossReport()
    (m_img, f_img), (m_hot, f_hot) = targets.images, targets.onehots
    l_mf = direction_loss(raw_mf, m_img, f_img, m_hot, f_hot, targets.available, w, sim_kind, report, "mf")
    l_fm = direction_loss(raw_fm, f_img, m_img, f_hot, m_hot, targets.available, w, sim_kind, report, "fm")
    loss = T.add(l_mf, l_fm)
    report.terms["total"] = float(loss.data)
    return loss, report
