"""``gradreg`` command line: gen, train, register, evaluate, gradcheck.

Machine-readable records (JSON lines, TSV tables) go to stdout and a short
human summary goes to stderr. Exit codes: 0 success, 1 verification
failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, dump_config, read_config
from .volume_io import GvolError, LabelMap, Volume, load_volume, save_volume

EXIT_OK, EXIT_VERIFY, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


def _emit(rec: dict) -> None:
    print(json.dumps(rec, sort_keys=True), flush=True)


class Workdir:
    def __init__(self, root):
        self.root = Path(root or ".").resolve()

    def __call__(self, p) -> Path | None:
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else self.root / p


def _load_config(args, wd: Workdir) -> RunConfig:
    path = wd(args.config)
    if path is not None and not path.exists():
        raise UsageError(f"config file not found: {path}")
    return read_config(path, args.set or ())


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


# ---------------------------------------------------------------- gen


def cmd_gen(args, wd: Workdir) -> int:
    from .synth import gen_dataset

    cfg = _load_config(args, wd)
    spec = cfg.synth
    if args.seed is not None:
        spec.seed = args.seed
    if args.n < 0:
        raise UsageError("--n must be >= 0")
    _emit({"event": "config", **cfg.to_dict()})
    out = wd(args.out)
    try:
        manifest = gen_dataset(spec, args.n, out, prefix=args.prefix)
    except OSError as exc:
        raise UsageError(f"cannot write dataset to {out}: {exc.strerror or exc}") from None
    _emit({"event": "gen", "manifest": str(manifest), "n": args.n})
    _say(f"wrote {args.n} pairs of shape {spec.shape} to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- train


def cmd_train(args, wd: Workdir) -> int:
    from .plotting import loss_curve
    from .trainer import train

    cfg = _load_config(args, wd)
    tc = cfg.train
    for name in ("steps", "lr", "seed"):
        if getattr(args, name) is not None:
            setattr(tc, name, getattr(args, name))
    if args.pretrain:
        tc.pretrain = str(_need(wd(args.pretrain), "pretrain checkpoint"))
    tc.__post_init__()
    manifest = _need(wd(args.manifest), "manifest")
    val = _need(wd(args.val_manifest), "validation manifest") if args.val_manifest else None
    out = wd(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_config(cfg))
    t0 = time.perf_counter()
    res = train(tc, manifest, val, out_dir=out, log_fh=sys.stdout)
    loss_curve(out / "loss_curve.png", res.history, res.evals)
    last = res.history[-1]
    _say(f"trained {len(res.history)} steps in {time.perf_counter() - t0:.1f}s; "
         f"final loss {last['total']:.6g}; checkpoint {res.checkpoint}")
    if res.restore is not None:
        _say(f"restored {len(res.restore.matched)} tensors, {len(res.restore.missing)} missing, "
             f"{len(res.restore.shape_mismatch)} shape mismatches")
    return EXIT_OK


# ---------------------------------------------------------------- register


def _register_one(net, opts, mv: Volume, fx: Volume, out: Path, mseg=None, fseg=None):
    from .deformation import warp
    from .plotting import registration_panel, write_slice_pgms
    from .trainer import register

    if mv.shape != fx.shape or mv.channels != fx.channels:
        raise UsageError(f"moving {mv.data.shape} and fixed {fx.data.shape} shapes differ")
    res = register(net, mv, fx, opts.patching, opts.patch_size, opts.stride)
    out.mkdir(parents=True, exist_ok=True)
    save_volume(Volume(res.phi_mf, fx.spacing, "SYNTH"), out / "phi_MF.gvol", field_tag="phi_MF")
    save_volume(Volume(res.phi_fm, mv.spacing, "SYNTH"), out / "phi_FM.gvol", field_tag="phi_FM")
    save_volume(Volume(res.moving_warped, fx.spacing, mv.modality), out / "moving_warped.gvol")
    save_volume(Volume(res.fixed_warped, mv.spacing, fx.modality), out / "fixed_warped.gvol")
    if mseg is not None:
        save_volume(warp(mseg, res.phi_mf, mode="nearest"), out / "moving_seg_warped.gvol")
    if fseg is not None:
        save_volume(warp(fseg, res.phi_fm, mode="nearest"), out / "fixed_seg_warped.gvol")
    if opts.slices:
        write_slice_pgms(out, mv.data, fx.data, res.moving_warped, res.phi_mf, opts.slice_axis)
        registration_panel(out / "panel.png", mv.data, fx.data, res.moving_warped, res.phi_mf, opts.slice_axis)
    return res


def cmd_register(args, wd: Workdir) -> int:
    from .deformation import axis_monotone_fraction
    from .synth import read_manifest
    from .trainer import net_from_checkpoint

    cfg = _load_config(args, wd)
    opts = cfg.register
    if args.patching:
        opts.patching = args.patching
    if args.no_slices:
        opts.slices = False
    _emit({"event": "config", **cfg.to_dict()})
    net, _ = net_from_checkpoint(_need(wd(args.ckpt), "checkpoint"))
    out = wd(args.out)
    if args.manifest:
        records = read_manifest(_need(wd(args.manifest), "manifest"))
        jobs = [(r["case"], r["moving"], r["fixed"], r.get("moving_seg"), r.get("fixed_seg")) for r in records]
        dest = [out / r["case"] for r in records]
    else:
        if not (args.moving and args.fixed):
            raise UsageError("register needs --moving and --fixed, or --manifest")
        jobs = [("pair", str(wd(args.moving)), str(wd(args.fixed)), args.moving_seg and str(wd(args.moving_seg)),
                 args.fixed_seg and str(wd(args.fixed_seg)))]
        dest = [out]
    for (case, m, f, ms, fs), d in zip(jobs, dest):
        mv = load_volume(_need(Path(m), "moving volume"))
        fx = load_volume(_need(Path(f), "fixed volume"))
        mseg = load_volume(ms) if ms else None
        fseg = load_volume(fs) if fs else None
        res = _register_one(net, opts, mv, fx, d, mseg, fseg)
        _emit({"event": "register", "case": case, "out": str(d),
               "monotone_fraction": axis_monotone_fraction(res.phi_mf)})
    _say(f"registered {len(jobs)} pair(s) into {out}")
    return EXIT_OK


# ---------------------------------------------------------------- evaluate


def cmd_evaluate(args, wd: Workdir) -> int:
    from .metrics import EvalReport, evaluate_case
    from .plotting import evaluation_figure
    from .synth import read_manifest

    records = read_manifest(_need(wd(args.manifest), "manifest"))
    pred = wd(args.pred_dir)
    missing = [r["case"] for r in records if not (pred / r["case"] / "phi_MF.gvol").exists()]
    if missing:
        raise UsageError(f"no prediction for {len(missing)} case(s): {', '.join(missing)}")
    for r in records:
        if not r.get("moving_seg") or not r.get("fixed_seg"):
            raise UsageError(f"case {r['case']} has no label maps to evaluate")

    def one(r):
        phi = load_volume(pred / r["case"] / "phi_MF.gvol").data
        mseg, fseg = load_volume(r["moving_seg"]), load_volume(r["fixed_seg"])
        if not isinstance(mseg, LabelMap) or not isinstance(fseg, LabelMap):
            raise UsageError(f"case {r['case']}: segmentation files must hold label maps")
        if phi.shape != (3,) + fseg.shape:
            raise UsageError(f"case {r['case']}: field {phi.shape} does not match labels {fseg.shape}")
        return evaluate_case(mseg, fseg, phi, r["case"])

    with ThreadPoolExecutor(max_workers=max(1, args.threads)) as pool:
        report = EvalReport(list(pool.map(one, records)))
    out = wd(args.out) if args.out else pred
    out.mkdir(parents=True, exist_ok=True)
    table, block = report.to_table(), report.summary_block()
    (out / "eval.tsv").write_text(table)
    (out / "summary.tsv").write_text(block)
    evaluation_figure(out / "eval.png", report)
    sys.stdout.write(table + "\n" + block)
    reg, unreg = report.summary(True), report.summary(False)
    _say(f"{len(records)} cases: Dice {unreg['Dice']:.3f} -> {reg['Dice']:.3f}, "
         f"Dice30 {reg['Dice30']:.3f}, Hd95 {reg['Hd95']:.2f} mm, StdJ {reg['StdJ']:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------- gradcheck


def cmd_gradcheck(args, wd: Workdir) -> int:
    from .gradcheck import run_suite, summarize

    dtype = np.float64 if args.dtype == "double" else np.float32
    t0 = time.perf_counter()
    res = run_suite(range(args.seed, args.seed + args.n_seeds), dtype, corrupt=args.corrupt)
    summary = summarize(res)
    failed = []
    for op, s in summary.items():
        _emit({"event": "gradcheck", "op": op, **s})
        if s["failed"]:
            failed.append(op)
    if failed:
        _say(f"gradient check FAILED for: {', '.join(failed)}")
        return EXIT_VERIFY
    _say(f"all {len(summary)} ops passed {len(res)} checks in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK


# ---------------------------------------------------------------- entry


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gradreg", description=__doc__.splitlines()[0])
    p.add_argument("--workdir", default=".", help="base directory for relative paths")
    p.add_argument("--threads", type=int, default=1, help="worker threads for per-case evaluation")
    sub = p.add_subparsers(dest="cmd", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="INI run configuration")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    with_config(g)
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=16)
    g.add_argument("--seed", type=int)
    g.add_argument("--prefix", default="case")

    t = sub.add_parser("train", help="train a registration network")
    with_config(t)
    t.add_argument("--manifest", required=True)
    t.add_argument("--val-manifest")
    t.add_argument("--pretrain", help="checkpoint to initialize from")
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)

    r = sub.add_parser("register", help="register pairs with a trained checkpoint")
    with_config(r)
    r.add_argument("--ckpt", required=True)
    r.add_argument("--moving")
    r.add_argument("--fixed")
    r.add_argument("--moving-seg")
    r.add_argument("--fixed-seg")
    r.add_argument("--manifest", help="register every case; outputs go to OUT/<case>/")
    r.add_argument("--out", required=True)
    r.add_argument("--patching", choices=("auto", "whole", "sliding"))
    r.add_argument("--no-slices", action="store_true", help="skip PGM slices and the panel figure")

    e = sub.add_parser("evaluate", help="score predicted fields against label maps")
    e.add_argument("--pred-dir", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", help="directory for eval.tsv, summary.tsv and eval.png (default: pred dir)")

    c = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    c.add_argument("--seed", type=int, default=0, help="first seed")
    c.add_argument("--n-seeds", type=int, default=20)
    c.add_argument("--dtype", choices=("double", "single"), default="double")
    c.add_argument("--corrupt", help=argparse.SUPPRESS)
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "register": cmd_register, "evaluate": cmd_evaluate,
            "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    wd = Workdir(args.workdir)
    try:
        return COMMANDS[args.cmd](args, wd)
    except (UsageError, ConfigError, GvolError, FileNotFoundError) as exc:
        _say(f"gradreg {args.cmd}: error: {exc}")
        return EXIT_USAGE
    except ValueError as exc:
        _say(f"gradreg {args.cmd}: invalid input: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
