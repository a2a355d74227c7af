"""Grid increments, cumulative-sum integration, warping and Jacobian analysis.

The network predicts per-axis increments ``g`` of the sampling grid. Keeping
every increment positive makes each field component strictly increasing
along its own axis, so the grid cannot fold back on itself along x, y or z.
The field itself is the exclusive prefix sum of the increments, anchored at
coordinate 0 at the volume origin.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .volume_io import LabelMap, Volume

A_MAX = 2.0


def activate_increments(raw: T.Tensor, a_max: float = A_MAX) -> T.Tensor:
    """Map raw network output to increments in ``(0, a_max)``; ``raw = 0`` gives 1."""
    return T.scalar_mul(T.sigmoid(raw), a_max)


def integrate(g: T.Tensor) -> T.Tensor:
    """Sampling coordinates ``phi[a] = cumsum_exclusive(g[a], axis=a)``."""
    if g.ndim != 4 or g.shape[0] != 3:
        raise ValueError(f"increments must be [3,D,H,W], got {g.shape}")
    return T.stack([T.cumsum_exclusive(g[a], axis=a) for a in range(3)])


def identity_grid(shape, dtype=np.float32) -> np.ndarray:
    return np.indices(tuple(shape), dtype=dtype)


def field_from_raw(raw: T.Tensor, a_max: float = A_MAX) -> T.Tensor:
    return integrate(activate_increments(raw, a_max))


def warp(v, phi, mode: str = "linear"):
    """Resample ``v`` at the coordinates ``phi`` (voxel units, ``[3, D, H, W]``).

    ``v`` may be a Tensor / array ``[C, D, H, W]``, a :class:`Volume` or a
    :class:`LabelMap`. Linear mode is differentiable; nearest mode rounds the
    coordinates and is meant for hard label maps at evaluation time.
    """
    phi_data = phi.data if isinstance(phi, T.Tensor) else np.asarray(phi)
    if isinstance(v, LabelMap):
        if v.shape != phi_data.shape[1:]:
            raise ValueError(f"warp shape mismatch: labels {v.shape} vs field {phi_data.shape[1:]}")
        if mode != "nearest":
            raise ValueError("hard label maps are warped with mode='nearest'; warp the one-hot channels instead")
        return LabelMap(_nearest(v.labels[None], phi_data)[0], v.num_classes, v.available.copy(), v.spacing)
    if isinstance(v, Volume):
        if v.shape != phi_data.shape[1:]:
            raise ValueError(f"warp shape mismatch: volume {v.shape} vs field {phi_data.shape[1:]}")
        if mode == "nearest":
            return Volume(_nearest(v.data, phi_data), v.spacing, v.modality)
        out = T.trilinear_sample(T.Tensor(v.data), T.Tensor(phi_data))
        return Volume(out.data, v.spacing, v.modality)
    vt = T.as_tensor(v)
    if vt.shape[1:] != phi_data.shape[1:]:
        raise ValueError(f"warp shape mismatch: volume {vt.shape[1:]} vs field {phi_data.shape[1:]}")
    if mode == "nearest":
        return T.Tensor(_nearest(vt.data, phi_data))
    if mode != "linear":
        raise ValueError(f"unknown warp mode {mode!r}")
    return T.trilinear_sample(vt, T.as_tensor(phi))


def _nearest(arr: np.ndarray, phi: np.ndarray) -> np.ndarray:
    idx = tuple(np.clip(np.rint(phi[a]), 0, arr.shape[a + 1] - 1).astype(np.int64) for a in range(3))
    return arr[(slice(None),) + idx]


def jacobian_det(phi) -> np.ndarray:
    """Per-voxel determinant of d(phi)/dx from central differences."""
    phi = np.asarray(phi.data if isinstance(phi, T.Tensor) else phi, dtype=np.float64)
    if min(phi.shape[1:]) < 3:
        raise ValueError(f"jacobian_det needs extents >= 3, got {phi.shape[1:]}")
    # J[a, b] = d phi_a / d x_b
    J = np.stack([np.stack(np.gradient(phi[a], axis=(0, 1, 2)), axis=0) for a in range(3)], axis=0)
    J = np.moveaxis(J, (0, 1), (-2, -1))
    return np.linalg.det(J)


def axis_monotone_fraction(phi) -> float:
    """Fraction of voxel steps where ``phi[a]`` is non-decreasing along axis ``a``."""
    phi = np.asarray(phi.data if isinstance(phi, T.Tensor) else phi)
    ok = total = 0
    for a in range(3):
        d = np.diff(phi[a], axis=a)
        ok += int((d >= 0).sum())
        total += d.size
    return ok / total if total else 1.0


def _pad_even(arr: np.ndarray) -> np.ndarray:
    pads = [(0, 0)] + [(0, n % 2) for n in arr.shape[1:]]
    return np.pad(arr, pads, mode="edge") if any(p[1] for p in pads) else arr


def avg_pool2(arr: np.ndarray) -> np.ndarray:
    arr = _pad_even(arr)
    c, d, h, w = arr.shape
    return arr.reshape(c, d // 2, 2, h // 2, 2, w // 2, 2).mean(axis=(2, 4, 6)).astype(arr.dtype)


def majority_pool2(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Most frequent label per 2x2x2 block; ties go to the lower label."""
    lab = _pad_even(labels[None])[0]
    d, h, w = lab.shape
    blocks = lab.reshape(d // 2, 2, h // 2, 2, w // 2, 2)
    counts = np.stack([(blocks == k).sum(axis=(1, 3, 5)) for k in range(num_classes)])
    return counts.argmax(axis=0).astype(np.uint8)


def downscale_field_targets(v, levels: int) -> list:
    """Pyramid ``[v, v/2, ..., v/2**levels]`` used as deep-supervision targets."""
    out = [v]
    for _ in range(levels):
        cur = out[-1]
        if isinstance(cur, LabelMap):
            out.append(LabelMap(majority_pool2(cur.labels, cur.num_classes), cur.num_classes,
                                cur.available.copy(), tuple(2 * s for s in cur.spacing)))
        elif isinstance(cur, Volume):
            out.append(Volume(avg_pool2(cur.data), tuple(2 * s for s in cur.spacing), cur.modality))
        else:
            out.append(avg_pool2(np.asarray(cur)))
    return out
