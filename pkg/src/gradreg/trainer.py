"""Adam optimization loop, checkpoints, fine-tuning and patch-based inference."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .deformation import activate_increments, integrate, warp
from .losses import LossWeights, PairTargets, similarity, total_loss
from .network import NetConfig, RegistrationNet, init_parameters, parameter_shapes
from .synth import read_manifest
from .volume_io import LabelMap, Volume, augment_pair, extract_patch, load_volume

logger = logging.getLogger(__name__)

CKPT_MAGIC = "gradreg-checkpoint/1"


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 1
    epochs: int = 1
    steps: int = 0  # overrides epochs when > 0
    patch_size: tuple | None = None
    similarity: str = "mse"
    weights: LossWeights = field(default_factory=LossWeights)
    net: NetConfig = field(default_factory=NetConfig)
    augment: bool = False
    seed: int = 0
    checkpoint_every: int = 0
    eval_every: int = 0
    pretrain: str | None = None
    unavailable_labels: tuple = ()
    merge_splits: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        similarity(self.similarity)
        if len(self.weights.ds_weights) != self.net.ds_levels:
            raise ValueError(f"{len(self.weights.ds_weights)} deep-supervision weights for "
                             f"{self.net.ds_levels} supervision levels")
        if self.patch_size is not None:
            self.patch_size = tuple(int(p) for p in self.patch_size)
            f = 2 ** self.net.depth
            if any(p % f for p in self.patch_size):
                raise ValueError(f"patch size {self.patch_size} must be divisible by {f}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["net"] = self.net.to_dict()
        d["weights"]["ds_weights"] = list(self.weights.ds_weights)
        return d


# ---------------------------------------------------------------- Adam


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float) -> None:
    """Bias-corrected Adam update applied in place to ``params``.

    ``params`` maps names to Tensors, ``grads`` names to arrays. A non-finite
    gradient aborts the whole step before anything is modified.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {params[name].shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, params: dict, config: dict, step: int) -> None:
    """Header lines (format, step, config echo, name/shape table), blank line, f32 buffers."""
    lines = [f"format: {CKPT_MAGIC}", f"step: {step}", f"config: {json.dumps(config, sort_keys=True)}"]
    chunks = []
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data, dtype="<f4")
        lines.append(f"param: {name} {','.join(str(s) for s in arr.shape)}")
        chunks.append(arr.tobytes())
    Path(path).write_bytes(("\n".join(lines) + "\n\n").encode("utf-8") + b"".join(chunks))


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(arrays by name, header)`` where header has ``step`` and ``config``."""
    raw = Path(path).read_bytes()
    end = raw.find(b"\n\n")
    if end < 0:
        raise ValueError(f"{path}: checkpoint header is not terminated")
    header = {"params": []}
    for line in raw[:end].decode("utf-8").splitlines():
        key, _, value = line.partition(": ")
        if key == "format" and value != CKPT_MAGIC:
            raise ValueError(f"{path}: unknown checkpoint format {value!r}")
        if key == "step":
            header["step"] = int(value)
        elif key == "config":
            header["config"] = json.loads(value)
        elif key == "param":
            name, shape = value.rsplit(" ", 1)
            header["params"].append((name, tuple(int(s) for s in shape.split(",") if s)))
    arrays = {}
    offset = end + 2
    for name, shape in header["params"]:
        n = int(np.prod(shape)) * 4
        if offset + n > len(raw):
            raise ValueError(f"{path}: truncated buffer for {name}")
        arrays[name] = np.frombuffer(raw[offset:offset + n], dtype="<f4").reshape(shape).astype(np.float32)
        offset += n
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes after parameter buffers")
    return arrays, header


@dataclass
class RestoreReport:
    matched: list = field(default_factory=list)
    missing: list = field(default_factory=list)  # in the model, absent from the checkpoint
    unexpected: list = field(default_factory=list)  # in the checkpoint, absent from the model
    shape_mismatch: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def load_pretrained(params: dict, path) -> tuple[dict, RestoreReport]:
    """Copy name- and shape-matched tensors from a checkpoint into ``params``."""
    arrays, _ = load_checkpoint(path)
    report = RestoreReport()
    for name, p in params.items():
        if name not in arrays:
            report.missing.append(name)
        elif arrays[name].shape != p.shape:
            report.shape_mismatch.append(name)
        else:
            p.data = arrays[name].astype(p.dtype)
            report.matched.append(name)
    report.unexpected = sorted(set(arrays) - set(params))
    return params, report


def net_from_checkpoint(path) -> tuple[RegistrationNet, dict]:
    arrays, header = load_checkpoint(path)
    cfg_dict = header.get("config", {})
    net_cfg = NetConfig(**cfg_dict.get("net", {}))
    params = {k: T.Tensor(v, requires_grad=True) for k, v in arrays.items()}
    return RegistrationNet(net_cfg, params), header


# ---------------------------------------------------------------- inference


@dataclass
class RegistrationResult:
    phi_mf: np.ndarray
    phi_fm: np.ndarray
    moving_warped: np.ndarray
    fixed_warped: np.ndarray
    raw_mf: np.ndarray
    raw_fm: np.ndarray


def _window_starts(n: int, p: int, stride: int) -> list:
    if n <= p:
        return [0]
    starts = list(range(0, n - p + 1, stride))
    if starts[-1] != n - p:
        starts.append(n - p)
    return starts


def _predict_raw(net: RegistrationNet, mv: np.ndarray, fx: np.ndarray):
    raw_mf, raw_fm = net.symmetric_forward(T.Tensor(mv), T.Tensor(fx))
    return raw_mf[0].data, raw_fm[0].data


def predict_raw(net: RegistrationNet, mv: np.ndarray, fx: np.ndarray, patching: str = "auto",
                patch_size=None, stride=None):
    """Full-resolution raw maps for both directions.

    Sliding-window mode averages raw maps over overlapping windows; the
    activation and integration then run once on the stitched maps, so the
    field stays monotone along each axis.
    """
    shape = mv.shape[1:]
    f = 2 ** net.cfg.depth
    divisible = all(n % f == 0 for n in shape)
    if patching == "auto":
        patching = "whole" if divisible or patch_size is None else "sliding"
    if patching == "whole":
        pads = [(0, 0)] + [(0, (-n) % f) for n in shape]
        mvp, fxp = np.pad(mv, pads, mode="edge"), np.pad(fx, pads, mode="edge")
        r_mf, r_fm = _predict_raw(net, mvp, fxp)
        crop = (slice(None),) + tuple(slice(0, n) for n in shape)
        return r_mf[crop], r_fm[crop]
    if patching != "sliding":
        raise ValueError(f"unknown patching mode {patching!r}")
    patch = tuple(int(p) for p in (patch_size or shape))
    stride = tuple(int(s) for s in (stride or patch))
    net.check_shape(patch)
    pads = [(0, 0)] + [(0, max(0, p - n)) for p, n in zip(patch, shape)]
    mvp, fxp = np.pad(mv, pads, mode="edge"), np.pad(fx, pads, mode="edge")
    full = mvp.shape[1:]
    acc_mf = np.zeros((3,) + full, dtype=np.float32)
    acc_fm = np.zeros_like(acc_mf)
    count = np.zeros(full, dtype=np.float32)
    for z in _window_starts(full[0], patch[0], stride[0]):
        for y in _window_starts(full[1], patch[1], stride[1]):
            for x in _window_starts(full[2], patch[2], stride[2]):
                sl = (slice(z, z + patch[0]), slice(y, y + patch[1]), slice(x, x + patch[2]))
                r_mf, r_fm = _predict_raw(net, mvp[(slice(None),) + sl], fxp[(slice(None),) + sl])
                acc_mf[(slice(None),) + sl] += r_mf
                acc_fm[(slice(None),) + sl] += r_fm
                count[sl] += 1
    crop = (slice(None),) + tuple(slice(0, n) for n in shape)
    return (acc_mf / count)[crop], (acc_fm / count)[crop]


def register(net: RegistrationNet, moving, fixed, patching: str = "auto", patch_size=None,
             stride=None) -> RegistrationResult:
    mv = moving.data if isinstance(moving, Volume) else np.asarray(moving)
    fx = fixed.data if isinstance(fixed, Volume) else np.asarray(fixed)
    if mv.shape != fx.shape:
        raise ValueError(f"moving {mv.shape} and fixed {fx.shape} shapes differ")
    mv, fx = mv.astype(np.float32), fx.astype(np.float32)
    r_mf, r_fm = predict_raw(net, mv, fx, patching, patch_size, stride)
    phi_mf = integrate(activate_increments(T.Tensor(r_mf))).data
    phi_fm = integrate(activate_increments(T.Tensor(r_fm))).data
    return RegistrationResult(phi_mf, phi_fm,
                              warp(T.Tensor(mv), phi_mf).data, warp(T.Tensor(fx), phi_fm).data, r_mf, r_fm)


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    params: dict
    history: list
    evals: list
    restore: RestoreReport | None = None
    checkpoint: Path | None = None


def _load_cases(records: list, unavailable=()) -> list:
    cases = []
    for rec in records:
        case = {"case": rec["case"], "moving": load_volume(rec["moving"]), "fixed": load_volume(rec["fixed"])}
        for key in ("moving_seg", "fixed_seg"):
            seg = load_volume(rec[key]) if rec.get(key) else None
            if seg is not None and unavailable:
                seg.available[list(unavailable)] = False
                seg.available[0] = True
            case[key] = seg
        cases.append(case)
    return cases


def mean_dice(net: RegistrationNet, cases: list, labels=None) -> float:
    """Mean foreground Dice of nearest-warped moving labels over ``cases``."""
    from .metrics import dice

    scores = []
    for case in cases:
        res = register(net, case["moving"], case["fixed"])
        warped = warp(case["moving_seg"], res.phi_mf, mode="nearest")
        ks = labels if labels is not None else range(1, case["fixed_seg"].num_classes)
        scores.extend(dice(warped, case["fixed_seg"], k) for k in ks)
    return float(np.mean(scores))


def _grad_step(net, cfg: TrainConfig, case: dict, targets: PairTargets | None):
    with T.Tape() as tape:
        raw_mf, raw_fm = net.symmetric_forward(case["moving"], case["fixed"])
        segs = (case["moving_seg"], case["fixed_seg"]) if case["moving_seg"] is not None else None
        loss, report = total_loss(case["moving"], case["fixed"], segs, raw_mf, raw_fm, cfg.weights,
                                  cfg.similarity, targets)
    tape.backward(loss)
    return {name: p.grad for name, p in net.params.items()}, report


def train(cfg: TrainConfig, manifest, val_manifest=None, out_dir=None, params: dict | None = None,
          log_fh=None) -> TrainResult:
    """Symmetric training loop.

    Each step draws a pair, optionally augments and crops it, predicts both
    directions, and takes one Adam step on the summed objective. Records
    go to ``log_fh`` (one JSON object per line) and ``out_dir/train_log.jsonl``.
    """
    records = read_manifest(manifest) if not isinstance(manifest, list) else manifest
    if not records:
        raise ValueError("training manifest is empty")
    val_records = []
    if val_manifest is not None:
        val_records = read_manifest(val_manifest) if not isinstance(val_manifest, list) else val_manifest
    if cfg.merge_splits:
        records = records + val_records
    cases = _load_cases(records, cfg.unavailable_labels)
    val_cases = _load_cases(val_records)
    shape = cases[0]["moving"].shape
    if cfg.patch_size is not None and any(p > n for p, n in zip(cfg.patch_size, shape)):
        raise ValueError(f"patch size {cfg.patch_size} larger than volumes {shape}")
    if cfg.patch_size is None:
        RegistrationNet(cfg.net, params or init_parameters(cfg.net, cfg.seed)).check_shape(shape)

    net = RegistrationNet(cfg.net, params if params is not None else init_parameters(cfg.net, cfg.seed))
    restore = None
    if cfg.pretrain:
        _, restore = load_pretrained(net.params, cfg.pretrain)
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "train_log.jsonl", "w")

    def emit(rec):
        line = json.dumps(rec, sort_keys=True)
        if log_file:
            log_file.write(line + "\n")
        if log_fh:
            log_fh.write(line + "\n")

    emit({"event": "config", **cfg.to_dict()})
    if restore is not None:
        emit({"event": "restore", **restore.to_dict()})

    rng = np.random.default_rng(cfg.seed)
    state = OptimizerState()
    total_steps = cfg.steps if cfg.steps > 0 else cfg.epochs * int(np.ceil(len(cases) / cfg.batch_size))
    cache = {}
    static = not cfg.augment and cfg.patch_size is None
    history, evals = [], []
    order: list = []
    t0 = time.perf_counter()

    def run_eval(step):
        if val_cases:
            d = mean_dice(net, val_cases)
            evals.append({"step": step, "val_dice": d})
            emit({"event": "eval", "step": step, "val_dice": d})

    if cfg.eval_every:
        run_eval(0)
    for step in range(1, total_steps + 1):
        grads_acc = None
        reports = []
        for _ in range(cfg.batch_size):
            if not order:
                order = list(rng.permutation(len(cases)))
            idx = int(order.pop())
            case = cases[idx]
            if cfg.augment:
                grids = augment_pair([case["moving"], case["fixed"]] +
                                     [s for s in (case["moving_seg"], case["fixed_seg"]) if s is not None],
                                     int(rng.integers(2 ** 31)))
                case = dict(case, moving=grids[0], fixed=grids[1],
                            moving_seg=grids[2] if len(grids) > 2 else None,
                            fixed_seg=grids[3] if len(grids) > 3 else None)
            if cfg.patch_size is not None:
                grids = [case["moving"], case["fixed"]] + [s for s in (case["moving_seg"], case["fixed_seg"]) if s is not None]
                grids = extract_patch(grids, cfg.patch_size, rng=rng)
                case = dict(case, moving=grids[0], fixed=grids[1],
                            moving_seg=grids[2] if len(grids) > 2 else None,
                            fixed_seg=grids[3] if len(grids) > 3 else None)
            targets = cache.get(idx) if static else None
            if targets is None:
                targets = PairTargets.build(case["moving"], case["fixed"], case["moving_seg"], case["fixed_seg"],
                                            cfg.net.ds_levels)
                if static:
                    cache[idx] = targets
            grads, report = _grad_step(net, cfg, case, targets)
            reports.append(report.terms)
            if grads_acc is None:
                grads_acc = grads
            else:
                grads_acc = {k: grads_acc[k] + grads[k] for k in grads_acc}
        if cfg.batch_size > 1:
            grads_acc = {k: g / cfg.batch_size for k, g in grads_acc.items()}
        adam_step(net.params, grads_acc, state, cfg.lr)
        rec = {"step": step, "lr": cfg.lr, "wall": round(time.perf_counter() - t0, 4)}
        for key in reports[0]:
            rec[key] = float(np.mean([r[key] for r in reports]))
        history.append(rec)
        emit({"event": "step", **rec})
        if cfg.eval_every and step % cfg.eval_every == 0:
            run_eval(step)
        if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_checkpoint(out / f"checkpoint_{step:06d}.ckpt", net.params, cfg.to_dict(), step)
    ckpt = None
    if out is not None:
        ckpt = out / "checkpoint.ckpt"
        save_checkpoint(ckpt, net.params, cfg.to_dict(), total_steps)
        log_file.close()
    return TrainResult(net.params, history, evals, restore, ckpt)
