"""Define-by-run reverse-mode autodiff over dense numpy arrays.

Every differentiable primitive used by the registration network and its
losses lives here. Ops executed while a :class:`Tape` is active are recorded
in call order; :meth:`Tape.backward` replays them in exact reverse order.
Ops executed with no active tape are plain numpy computations (inference).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32

_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of executed ops.

    Use as a context manager around a forward pass::

        with Tape() as tape:
            loss = model(x)
        tape.backward(loss)
    """

    def __init__(self):
        self.records: list[tuple["Tensor", tuple, Callable, str]] = []

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def record(self, out, inputs, backward_fn, name):
        out._tape = self
        out._node = len(self.records)
        self.records.append((out, inputs, backward_fn, name))

    def reset(self):
        self.records.clear()

    def backward(self, root: "Tensor") -> dict:
        """Populate ``.grad`` on every leaf reachable from ``root``.

        The records are left untouched, so the same tape can be replayed and
        yields identical gradients. Returns a ``{leaf: grad}`` mapping.
        """
        if root.data.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
        if root._tape is not self:
            raise ValueError("root tensor was not recorded on this tape")
        grads = {id(root): np.ones_like(root.data)}
        produced = set()
        leaves = {}
        for out, inputs, _, _ in self.records:
            produced.add(id(out))
            for t in inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves[id(t)] = t
        for out, inputs, fn, _ in self.records[root._node::-1]:
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
        result = {}
        for key, leaf in leaves.items():
            g = grads.get(key)
            leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=leaf.data.dtype)
            result[leaf] = leaf.grad
        return result


def active_tape() -> Tape | None:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


class Tensor:
    """Dense array with an optional handle into the active tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._tape = None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def node_id(self):
        return self._node

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, name: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{name}: non-finite values in output")
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, tuple(inputs), backward_fn, name)
    return out


def _binary_operands(a, b, name):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError(f"{name}: at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ValueError(f"{name}: shapes {a.shape} and {b.shape} are neither equal nor scalar")
    return a, b


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    return np.asarray(g.sum()).reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    out = a.data / b.data

    def backward(g):
        ga = _reduce_to(g / b.data, a.shape) if a.requires_grad else None
        gb = _reduce_to(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "div")


def scalar_mul(x: Tensor, c: float) -> Tensor:
    return _make(x.data * x.dtype.type(c), (x,), lambda g: (g * x.dtype.type(c),), "scalar_mul")


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2 * g * x.data,), "square")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g / (2 * out),), "sqrt")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sigmoid(x: Tensor) -> Tensor:
    # tanh form is overflow-free and gives exactly 0.5 at 0
    out = x.dtype.type(0.5) * (np.tanh(x.dtype.type(0.5) * x.data) + 1)
    return _make(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0 < slope < 1:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    pos = x.data >= 0
    s = x.dtype.type(slope)
    out = np.where(pos, x.data, s * x.data)
    return _make(out, (x,), lambda g: (np.where(pos, g, s * g),), "leaky_relu")


# ---------------------------------------------------------------- reductions & shape


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = np.asarray(x.data.sum(axis=axes))

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape),)

    return _make(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    out = np.asarray(x.data.mean(axis=axes))

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g / n, axes), x.shape),)

    return _make(out, (x,), backward, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def _has_array_index(idx) -> bool:
    idx = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in idx)


def getitem(x: Tensor, idx) -> Tensor:
    out = np.array(x.data[idx])

    def backward(g):
        gx = np.zeros_like(x.data)
        if _has_array_index(idx):
            np.add.at(gx, idx, g)
        else:
            gx[idx] = g
        return (gx,)

    return _make(out, (x,), backward, "getitem")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tensors, backward, "stack")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


# ---------------------------------------------------------------- volumetric ops


def _im2col(xp: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, tuple]:
    win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))[:, ::stride, ::stride, ::stride]
    out_sp = win.shape[1:4]
    cols = np.ascontiguousarray(win.transpose(0, 4, 5, 6, 1, 2, 3))
    return cols.reshape(xp.shape[0] * k ** 3, -1), out_sp


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """3D cross-correlation of a ``[Cin, D, H, W]`` volume.

    Output extent per axis is ``floor((n + 2*padding - k) / stride) + 1``.
    """
    if x.ndim != 4 or kernel.ndim != 5:
        raise ValueError(f"conv3d expects input [Cin,D,H,W] and kernel [Cout,Cin,k,k,k], "
                         f"got {x.shape} and {kernel.shape}")
    cout, cin, k = kernel.shape[0], kernel.shape[1], kernel.shape[2]
    if kernel.shape[2:] != (k, k, k):
        raise ValueError(f"conv3d needs a cubic kernel, got {kernel.shape[2:]}")
    if x.shape[0] != cin:
        raise ValueError(f"conv3d channel mismatch: input {x.shape} has Cin={x.shape[0]}, "
                         f"kernel {kernel.shape} expects Cin={cin}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv3d bias shape {bias.shape} does not match Cout={cout}")
    p = padding
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (p, p))) if p else x.data
    if any(n < k for n in xp.shape[1:]):
        raise ValueError(f"conv3d kernel {k} larger than padded input {xp.shape[1:]}")
    cols, out_sp = _im2col(xp, k, stride)
    w2 = kernel.data.reshape(cout, -1)
    out = (w2 @ cols).reshape((cout,) + out_sp)
    if bias is not None:
        out += bias.data[:, None, None, None]
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        g2 = g.reshape(cout, -1)
        gx = gw = gb = None
        if kernel.requires_grad:
            gw = (g2 @ cols.T).reshape(kernel.shape)
        if x.requires_grad and stride == 1 and p <= k - 1:
            # full correlation of the output gradient with the flipped, channel-swapped kernel
            q = k - 1 - p
            gp = np.pad(g, ((0, 0), (q, q), (q, q), (q, q))) if q else g
            gc, _ = _im2col(gp, k, 1)
            wf = np.flip(kernel.data, axis=(2, 3, 4)).transpose(1, 0, 2, 3, 4).reshape(cin, -1)
            gx = (wf @ gc).reshape(x.shape)
        elif x.requires_grad:
            gcols = (w2.T @ g2).reshape((cin, k, k, k) + out_sp)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            d, h, w = out_sp
            s = stride
            for a in range(k):
                for b in range(k):
                    for c in range(k):
                        gxp[:, a:a + s * d:s, b:b + s * h:s, c:c + s * w:s] += gcols[:, a, b, c]
            gx = gxp[:, p:xp.shape[1] - p, p:xp.shape[2] - p, p:xp.shape[3] - p] if p else gxp
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(1, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _make(out, inputs, backward, "conv3d")


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel standardization over all spatial axes of ``[C, ...]``."""
    axes = tuple(range(1, x.ndim))
    n = int(np.prod(x.shape[1:]))
    if n < 2:
        raise ValueError(f"instance_norm needs at least 2 voxels per channel, got {x.shape}")
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return _make(xhat, (x,), backward, "instance_norm")


def cumsum_exclusive(x: Tensor, axis: int) -> Tensor:
    """``y[i] = sum(x[:i])`` along ``axis`` with ``y[0] = 0``."""
    axis = axis % x.ndim
    n = x.shape[axis]
    out = np.zeros_like(x.data)
    head = [slice(None)] * x.ndim
    tail = [slice(None)] * x.ndim
    head[axis] = slice(1, None)
    tail[axis] = slice(0, n - 1)
    out[tuple(head)] = np.cumsum(x.data[tuple(tail)], axis=axis)

    def backward(g):
        # gx[i] = sum(g[i+1:])
        gx = np.zeros_like(g)
        rev = np.flip(np.cumsum(np.flip(g[tuple(head)], axis=axis), axis=axis), axis=axis)
        gx[tuple(tail)] = rev
        return (gx,)

    return _make(out, (x,), backward, "cumsum_exclusive")


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Repeat each voxel twice along each of the last three axes."""
    c, d, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, None, :, None, :, None], (c, d, 2, h, 2, w, 2)).reshape(c, 2 * d, 2 * h, 2 * w)

    def backward(g):
        return (g.reshape(c, d, 2, h, 2, w, 2).sum(axis=(2, 4, 6)),)

    return _make(out, (x,), backward, "upsample_nearest2x")


def trilinear_sample(vol: Tensor, coords: Tensor) -> Tensor:
    """Sample ``vol[C, D, H, W]`` at voxel coordinates ``coords[3, ...]``.

    Coordinates outside ``[0, n-1]`` are clamped to the border; the clamped
    component receives no gradient.
    """
    if vol.ndim != 4 or coords.shape[0] != 3:
        raise ValueError(f"trilinear_sample expects vol [C,D,H,W] and coords [3,...], "
                         f"got {vol.shape} and {coords.shape}")
    v = vol.data
    c = coords.data.astype(v.dtype, copy=False)
    nc = v.shape[0]
    ext = v.shape[1:]
    out_sp = coords.shape[1:]
    lo, t, step, inside = [], [], [], []
    for a in range(3):
        n = ext[a]
        ca = c[a]
        cl = np.clip(ca, 0, n - 1)
        i0 = np.minimum(np.floor(cl).astype(np.int64), max(n - 2, 0))
        lo.append(i0)
        t.append(cl - i0.astype(v.dtype))
        step.append(1 if n > 1 else 0)
        inside.append((ca >= 0) & (ca <= n - 1))
    strides = (ext[1] * ext[2], ext[2], 1)
    base = lo[0] * strides[0] + lo[1] * strides[1] + lo[2] * strides[2]
    vf = v.reshape(nc, -1)
    one = v.dtype.type(1)
    wts = [(one - t[a], t[a]) for a in range(3)]
    corners = []
    out = np.zeros((nc,) + out_sp, dtype=v.dtype)
    for bz in (0, 1):
        for by in (0, 1):
            for bx in (0, 1):
                idx = base + bz * step[0] * strides[0] + by * step[1] * strides[1] + bx * step[2] * strides[2]
                val = vf[:, idx]
                corners.append((bz, by, bx, idx, val))
                out += (wts[0][bz] * wts[1][by] * wts[2][bx]) * val

    def backward(g):
        gv = gc = None
        if vol.requires_grad:
            nvox = vf.shape[1]
            offs = (np.arange(nc) * nvox).reshape((nc,) + (1,) * len(out_sp))
            acc = np.zeros(nc * nvox, dtype=np.float64)
            for bz, by, bx, idx, _ in corners:
                w = wts[0][bz] * wts[1][by] * wts[2][bx]
                acc += np.bincount((idx + offs).ravel(), weights=(g * w).ravel(), minlength=nc * nvox)
            gv = acc.astype(v.dtype).reshape(v.shape)
        if coords.requires_grad:
            dt = [np.zeros((nc,) + out_sp, dtype=v.dtype) for _ in range(3)]
            for bz, by, bx, _, val in corners:
                bits = (bz, by, bx)
                for a in range(3):
                    sign = one if bits[a] else -one
                    others = [wts[o][bits[o]] for o in range(3) if o != a]
                    dt[a] += sign * others[0] * others[1] * val
            gc = np.stack([(g * dt[a]).sum(axis=0) * inside[a] for a in range(3)]).astype(coords.dtype)
        return gv, gc

    return _make(out, (vol, coords), backward, "trilinear_sample")


def backward(root: Tensor) -> dict:
    """Backpropagate from scalar ``root`` through the tape that recorded it."""
    if root._tape is None:
        raise ValueError("root tensor was not produced by a recorded op; run the forward pass inside a Tape")
    return root._tape.backward(root)
