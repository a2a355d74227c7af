"""Central finite-difference verification of every differentiable op."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from . import losses as L

# float32 uses ~eps**(1/3), the step that balances truncation and roundoff for central differences
STEP = {np.float64: 1e-5, np.float32: 5e-3}
RTOL = {np.float64: 1e-6, np.float32: 1e-3}
# absolute floor as a fraction of max|numeric|; float32 differences carry roundoff ~eps*|f|/h
FLOOR = {np.float64: 0.1, np.float32: 1.0}


@dataclass
class CheckResult:
    op: str
    seed: int
    max_err: float
    scale: float
    passed: bool


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (perturbed in place)."""
    if not x.flags.c_contiguous:
        raise ValueError("numerical_grad perturbs in place and needs a C-contiguous array")
    g = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        g.reshape(-1)[i] = (fp - fm) / (2 * h)
    return g


def grad_close(analytic: np.ndarray, numeric: np.ndarray, rtol: float,
               floor: float = 0.1) -> tuple[bool, float, float]:
    """Elementwise ``|a - n| <= rtol * (|n| + floor * max|n|)``.

    The absolute floor keeps entries whose true gradient is zero from
    demanding an impossible relative accuracy.
    """
    scale = float(np.abs(numeric).max()) if numeric.size else 0.0
    err = np.abs(analytic.astype(np.float64) - numeric)
    ok = bool(np.all(err <= rtol * (np.abs(numeric) + floor * scale + 1e-12)))
    return ok, float(err.max()) if err.size else 0.0, scale


def check(fn: Callable, inputs: list, wrt: list, seed: int, dtype=np.float64, corrupt: float = 1.0,
          op: str = "") -> CheckResult:
    """Compare tape gradients of ``sum(fn(*inputs) * R)`` with central differences.

    ``R`` is a fixed random projection so every output entry contributes with
    a distinct weight. ``wrt`` lists indices of inputs to differentiate.
    """
    rng = np.random.default_rng(seed + 7919)
    tensors = [T.Tensor(np.ascontiguousarray(x, dtype=dtype), requires_grad=(i in wrt)) for i, x in enumerate(inputs)]
    out_shape = fn(*tensors).shape
    proj = T.Tensor(rng.standard_normal(out_shape).astype(dtype))

    def scalar():
        return float(np.sum(fn(*tensors).data.astype(np.float64) * proj.data))

    with T.Tape() as tape:
        out = fn(*tensors)
        loss = T.tsum(T.mul(out, proj)) if out.shape else T.mul(out, proj)
    tape.backward(loss)
    h = STEP[dtype]
    rtol = RTOL[dtype]
    ok_all, worst, scale = True, 0.0, 0.0
    for i in wrt:
        analytic = tensors[i].grad * corrupt
        numeric = numerical_grad(scalar, tensors[i].data, h)
        ok, err, sc = grad_close(analytic, numeric, rtol, FLOOR[dtype])
        ok_all &= ok
        worst, scale = max(worst, err), max(scale, sc)
    return CheckResult(op, seed, worst, scale, ok_all)


# ---------------------------------------------------------------- op cases


def _off_lattice_coords(rng, shape, n_out, margin=0.05):
    c = rng.uniform(0.5, np.array(shape) - 1.5, size=(n_out, 3)).T
    frac = c - np.floor(c)
    c = np.floor(c) + np.clip(frac, margin, 1 - margin)
    return c.reshape(3, 2, 2, 2)


def _away_from_zero(rng, shape, gap=0.02):
    # keep every entry farther from the kink than the largest finite-difference step
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * (gap + np.abs(x)), x)


def op_cases(rng: np.random.Generator) -> dict:
    """``name -> (fn, inputs, wrt)`` for one random draw."""
    k = 3
    onehot_t = np.eye(3)[rng.integers(0, 3, size=(3, 3, 3))].transpose(3, 0, 1, 2)
    soft_p = rng.uniform(0.05, 0.95, size=(3, 3, 3, 3))
    return {
        "conv3d": (lambda x, w, b: T.conv3d(x, w, b, stride=1, padding=1),
                   [rng.standard_normal((2, 4, 4, 4)), rng.standard_normal((2, 2, k, k, k)),
                    rng.standard_normal(2)], [0, 1, 2]),
        "conv3d_stride2": (lambda x, w, b: T.conv3d(x, w, b, stride=2, padding=0),
                           [rng.standard_normal((2, 4, 4, 4)), rng.standard_normal((3, 2, 2, 2, 2)),
                            rng.standard_normal(3)], [0, 1, 2]),
        "leaky_relu": (lambda x: T.leaky_relu(x, 0.2), [_away_from_zero(rng, (2, 3, 3, 3))], [0]),
        "instance_norm": (lambda x: T.instance_norm(x, 1e-5), [rng.standard_normal((2, 3, 3, 3))], [0]),
        "cumsum_exclusive": (lambda x, axis=int(rng.integers(0, 3)): T.cumsum_exclusive(x, axis=axis),
                             [rng.standard_normal((3, 4, 5))], [0]),
        "trilinear_sample": (T.trilinear_sample,
                             [rng.standard_normal((1, 4, 4, 4)), _off_lattice_coords(rng, (4, 4, 4), 8)], [0, 1]),
        "upsample_nearest2x": (T.upsample_nearest2x, [rng.standard_normal((2, 2, 2, 2))], [0]),
        "sigmoid_mul": (lambda x: T.sigmoid(T.mul(x, x)), [rng.standard_normal((3, 4))], [0]),
        "elementwise_chain": (lambda a, b: T.mean(T.square(T.sub(T.mul(a, b), T.div(a, T.add(T.square(b), 1.0))))),
                              [rng.standard_normal((4, 3)), rng.standard_normal((4, 3))], [0, 1]),
        "mse": (L.mse, [rng.standard_normal((1, 3, 3, 3)), rng.standard_normal((1, 3, 3, 3))], [0, 1]),
        "ncc": (L.ncc, [rng.standard_normal((1, 3, 3, 3)), rng.standard_normal((1, 3, 3, 3))], [0, 1]),
        "soft_dice": (lambda p: L.soft_dice(p, onehot_t), [soft_p], [0]),
        "partial_dice": (lambda p: L.partial_dice(p, onehot_t, np.array([True, False, True])), [soft_p], [0]),
        "smoothness": (L.smoothness, [rng.uniform(0.2, 1.8, size=(3, 3, 3, 3))], [0]),
    }


OPS = tuple(op_cases(np.random.default_rng(0)))


def run_suite(seeds=range(20), dtype=np.float64, corrupt: str | None = None, ops=None) -> list:
    """Check every op on every seed. ``corrupt`` names an op whose analytic gradient is scaled by 1.01."""
    results = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, (fn, inputs, wrt) in op_cases(rng).items():
            if ops is not None and name not in ops:
                continue
            results.append(check(fn, inputs, wrt, seed, dtype, 1.01 if name == corrupt else 1.0, name))
    return results


def summarize(results: list) -> dict:
    out = {}
    for r in results:
        s = out.setdefault(r.op, {"checks": 0, "failed": 0, "max_err": 0.0})
        s["checks"] += 1
        s["failed"] += int(not r.passed)
        s["max_err"] = max(s["max_err"], r.max_err)
    return out


if __name__ == "__main__":
    t0 = time.perf_counter()
    res = run_suite()
    for name, s in summarize(res).items():
        print(f"{name:20s} {s['checks']:3d} checks  failed {s['failed']}  max_err {s['max_err']:.2e}")
    print(f"{time.perf_counter() - t0:.1f}s")
