"""Command-line interface: train, fuse, eval, selftest.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 self-test
failure.  Every option can also come from a flat key=value config file
(--config); explicit flags beat the config file, which beats defaults.
For fusion, the step count and schedule default to what the checkpoint
was trained with.
"""

from __future__ import annotations

import argparse
import multiprocessing
import os
import sys

import numpy as np

from . import report
from .checkpoint import CheckpointError, load_checkpoint, parse_kv, save_checkpoint
from .denoiser import PatchConfig
from .em import EMConfig, ResidueError
from .imageio import (
    ImageFormatError,
    denormalize,
    from_luma_chroma,
    load_image,
    normalize,
    save_image,
    to_luma_chroma,
)
from .metrics import evaluate, format_table, reports_to_csv
from .sampler import fuse_fields, write_trace
from .schedule import make_schedule
from .selftest import run_selftest
from .training import (
    TrainConfig,
    load_corpus,
    synthetic_corpus,
    train,
    write_loss_csv,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); we map usage to 1
        raise UsageError(message)


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


DEFAULTS = {
    "train": {
        "synthetic": 240,
        "size": 16,
        "iters": 2000,
        "batch": 8,
        "lr": 1e-3,
        "clip": 1.0,
        "steps": 100,
        "schedule": "linear",
        "patch": 4,
        "dim": 64,
        "depth": 4,
        "e_width": 0,  # 0 means 2 * dim
        "state_dim": 16,
        "seed": 0,
    },
    "fuse": {
        "seed": 0,
        "steps": 100,
        "schedule": "linear",
        "eta": 0.1,
        "psi": 0.5,
        "gamma0": 1.0,
        "rho0": 1.0,
        "inner_sweeps": 1,
        "expectation_form": "algorithm1",
        "jobs": 1,
    },
    "eval": {},
    "selftest": {"suite": None, "seed": 0},
}

_CONVERT = {
    "synthetic": int,
    "size": int,
    "iters": int,
    "batch": int,
    "lr": float,
    "clip": float,
    "steps": int,
    "schedule": str,
    "patch": int,
    "dim": int,
    "depth": int,
    "e_width": int,
    "state_dim": int,
    "seed": int,
    "eta": float,
    "psi": float,
    "gamma0": float,
    "rho0": float,
    "inner_sweeps": int,
    "expectation_form": str,
    "jobs": int,
    "trace": str,
    "data": str,
    "suite": str,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flexifuse", description="Flexible-arity image fusion.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def opt(p, key, cmd, flag=None, **kw):
        default = DEFAULTS[cmd].get(key)
        helptext = kw.pop("help", "")
        if default is not None and "default:" not in helptext:
            helptext = f"{helptext} (default: {default})".strip()
        p.add_argument(flag or f"--{key.replace('_', '-')}", dest=key, default=None,
                       help=helptext, **kw)

    tr = sub.add_parser("train", help="train a denoiser checkpoint")
    tr.add_argument("-o", "--out", required=True, help="output checkpoint path (.ffz)")
    opt(tr, "data", "train", help="directory of single-channel PGM/PNG training images")
    opt(tr, "synthetic", "train", type=int, help="synthetic corpus size when --data is absent")
    opt(tr, "size", "train", type=int, help="synthetic image extent")
    opt(tr, "iters", "train", type=int, help="optimization steps")
    opt(tr, "batch", "train", type=int, help="batch size")
    opt(tr, "lr", "train", type=float, help="Adam learning rate")
    opt(tr, "clip", "train", type=float, help="global gradient-norm clip")
    opt(tr, "steps", "train", type=int, help="diffusion chain length T")
    opt(tr, "schedule", "train", help="noise schedule kind")
    opt(tr, "patch", "train", type=int, help="patch size")
    opt(tr, "dim", "train", type=int, help="token width")
    opt(tr, "depth", "train", type=int, help="number of state-space blocks")
    opt(tr, "e_width", "train", type=int, help="block inner width; 0 means 2*dim")
    opt(tr, "state_dim", "train", type=int, help="state size per channel")
    opt(tr, "seed", "train", type=int, help="training seed")
    tr.add_argument("--config", default=None, help="key=value config file")

    fu = sub.add_parser("fuse", help="fuse 2 or 3 source images")
    fu.add_argument("inputs", nargs="+", help="2 or 3 image paths (or directories)")
    fu.add_argument("--ckpt", required=True, help="denoiser checkpoint (.ffz)")
    fu.add_argument("-o", "--out", required=True, help="output PNG path (or directory)")
    opt(fu, "seed", "fuse", type=int, help="sampling seed")
    opt(fu, "steps", "fuse", type=int, help="diffusion steps; checkpoint value if omitted")
    opt(fu, "schedule", "fuse", help="schedule kind; checkpoint value if omitted")
    opt(fu, "eta", "fuse", type=float, help="splitting weight eta")
    opt(fu, "psi", "fuse", type=float, help="smoothness weight psi")
    opt(fu, "gamma0", "fuse", type=float, help="initial data scale gamma")
    opt(fu, "rho0", "fuse", type=float, help="initial prior scale rho")
    opt(fu, "inner_sweeps", "fuse", type=int, help="correction sweeps per step")
    opt(fu, "expectation_form", "fuse", choices=["algorithm1", "equation20"],
        help="weight-update form")
    opt(fu, "jobs", "fuse", type=int, help="parallel fusion workers in directory mode")
    fu.add_argument("--trace", nargs="?", const="auto", default=None,
                    help="write a per-step CSV (optional path; default <out>.trace.csv)")
    fu.add_argument("--config", default=None, help="key=value config file")

    ev = sub.add_parser("eval", help="score fused images against their sources")
    ev.add_argument("--fused", nargs="+", required=True, help="fused image paths")
    ev.add_argument("--sources", nargs="+", required=True, help="2 or 3 source image paths")
    ev.add_argument("-o", "--out", default=None, help="metrics CSV path (figure written alongside)")
    ev.add_argument("--json", default=None, help="also write a JSON report here")
    ev.add_argument("--config", default=None, help="key=value config file")

    st = sub.add_parser("selftest", help="run the built-in oracle suites")
    opt(st, "suite", "selftest", help="only run suites whose name starts with this prefix")
    opt(st, "seed", "selftest", type=int, help="suite seed")
    st.add_argument("--config", default=None, help="key=value config file")
    return parser


def _effective(args, command: str, extra_defaults: dict | None = None) -> dict:
    """Merge defaults < checkpoint-derived < config file < explicit flags."""
    eff = dict(DEFAULTS[command])
    if extra_defaults:
        eff.update(extra_defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            with open(config_path) as fh:
                pairs = parse_kv(fh.read())
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from exc
        for key, value in pairs.items():
            if key not in eff:
                raise UsageError(f"config file key {key!r} unknown for {command}")
            try:
                eff[key] = _CONVERT.get(key, str)(value)
            except ValueError as exc:
                raise UsageError(f"config file key {key!r}: {exc}") from exc
    for key in eff:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            eff[key] = flag_value
    return eff


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _cmd_train(args) -> int:
    eff = _effective(args, "train")
    e_width = eff["e_width"] or 2 * eff["dim"]
    arch = PatchConfig(
        patch=eff["patch"], dim=eff["dim"], e_width=e_width,
        state_dim=eff["state_dim"], depth=eff["depth"], channels=1,
    )
    sched = make_schedule(eff["schedule"], eff["steps"])
    if eff.get("data"):
        data = load_corpus(eff["data"])
    else:
        data = synthetic_corpus(eff["synthetic"], size=eff["size"], seed=eff["seed"])
    cfg = TrainConfig(
        lr=eff["lr"], batch=eff["batch"], steps=eff["iters"],
        clip=eff["clip"], seed=eff["seed"],
    )
    params, losses = train(cfg, data, arch, sched, log_every=max(1, eff["iters"] // 20))
    save_checkpoint(args.out, params, steps=eff["steps"], schedule_kind=eff["schedule"])
    stem = os.path.splitext(args.out)[0]
    write_loss_csv(losses, stem + ".loss.csv")
    report.save_loss_figure(losses, stem + ".loss.png")
    print(f"checkpoint written to {args.out}")
    print(f"loss log written to {stem}.loss.csv (figure alongside)")
    return 0


def _load_sources(paths: list[str]):
    """Load fusion inputs; returns (luma fields, chroma of first color source)."""
    fields = []
    chroma = None
    for path in paths:
        buf = load_image(path)
        luma, cbcr = to_luma_chroma(buf)
        if chroma is None and cbcr is not None:
            chroma = cbcr
        fields.append(luma * 2.0 - 1.0)
    return fields, chroma


def _run_single_fusion(paths, out_path, params, sched, em_cfg, seed, trace_arg,
                       quiet=False):
    fields, chroma = _load_sources(paths)
    fused, trace = fuse_fields(
        fields, params, sched, em_cfg, seed, keep_trace=trace_arg is not None
    )
    luma = denormalize(fused).pixels
    save_image(from_luma_chroma(luma, chroma), out_path)
    if trace_arg is not None:
        trace_path = out_path + ".trace.csv" if trace_arg == "auto" else trace_arg
        write_trace(trace, trace_path)
        figure_path = os.path.splitext(trace_path)[0] + ".png"
        report.save_trace_figure(trace, figure_path)
        print(f"trace written to {trace_path} (figure alongside)")
    if not quiet:
        print(f"fused image written to {out_path}")


def _fusion_worker(job):
    # workers stay silent; the parent announces each output exactly once
    paths, out_path, params, sched, em_cfg, seed = job
    _run_single_fusion(paths, out_path, params, sched, em_cfg, seed, None, quiet=True)
    return out_path


def _cmd_fuse(args) -> int:
    if not 2 <= len(args.inputs) <= 3:
        raise UsageError(f"fusion takes 2 or 3 inputs, got {len(args.inputs)}")
    try:
        params, ckpt_pairs = load_checkpoint(args.ckpt)
    except FileNotFoundError:
        raise RuntimeError(f"checkpoint not found: {args.ckpt}")
    from_ckpt = {}
    if "steps" in ckpt_pairs:
        from_ckpt["steps"] = int(ckpt_pairs["steps"])
    if "schedule" in ckpt_pairs:
        from_ckpt["schedule"] = ckpt_pairs["schedule"]
    eff = _effective(args, "fuse", extra_defaults=from_ckpt)
    sched = make_schedule(eff["schedule"], eff["steps"])
    em_cfg = EMConfig(
        eta=eff["eta"], psi=eff["psi"], gamma0=eff["gamma0"], rho0=eff["rho0"],
        inner_sweeps=eff["inner_sweeps"], expectation_form=eff["expectation_form"],
    )

    dirs = [os.path.isdir(p) for p in args.inputs]
    if any(dirs) and not all(dirs):
        raise UsageError("fusion inputs must be all files or all directories")
    if not any(dirs):
        _run_single_fusion(
            args.inputs, args.out, params, sched, em_cfg, eff["seed"], args.trace
        )
        return 0

    # directory mode: pair files by sorted name, fan out across workers
    listings = [sorted(os.listdir(d)) for d in args.inputs]
    if len(set(map(tuple, listings))) != 1:
        raise RuntimeError("input directories do not contain matching file names")
    os.makedirs(args.out, exist_ok=True)
    jobs = []
    for index, name in enumerate(listings[0]):
        paths = [os.path.join(d, name) for d in args.inputs]
        out_path = os.path.join(args.out, os.path.splitext(name)[0] + ".png")
        jobs.append((paths, out_path, params, sched, em_cfg, eff["seed"] + index))
    if eff["jobs"] > 1:
        with multiprocessing.Pool(eff["jobs"]) as pool:
            for out_path in pool.map(_fusion_worker, jobs):
                print(f"fused image written to {out_path}")
    else:
        for job in jobs:
            _fusion_worker(job)
            print(f"fused image written to {job[1]}")
    return 0


def _as_metric_field(path: str) -> np.ndarray:
    buf = load_image(path)
    luma, _ = to_luma_chroma(buf)
    return np.asarray(luma, dtype=np.float64)


def _cmd_eval(args) -> int:
    _effective(args, "eval")  # validates any config file
    if not 2 <= len(args.sources) <= 3:
        raise UsageError(f"eval takes 2 or 3 sources, got {len(args.sources)}")
    sources = [_as_metric_field(p) for p in args.sources]
    reports = []
    for path in args.fused:
        fused = _as_metric_field(path)
        label = os.path.splitext(os.path.basename(path))[0]
        reports.append(evaluate(fused, sources, label=label))
    print(format_table(reports))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(reports_to_csv(reports))
        figure_path = os.path.splitext(args.out)[0] + ".png"
        report.save_metric_figure(reports, figure_path)
        print(f"metrics written to {args.out} (figure alongside)")
    if args.json:
        with open(args.json, "w") as fh:
            fh.write("[" + ",\n".join(r.to_json() for r in reports) + "]\n")
        print(f"JSON report written to {args.json}")
    return 0


def _cmd_selftest(args) -> int:
    eff = _effective(args, "selftest")
    try:
        results = run_selftest(eff.get("suite"), seed=eff["seed"])
    except ValueError as exc:
        raise UsageError(str(exc))
    failed = 0
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name:<18} {detail}")
        failed += 0 if ok else 1
    print(f"{len(results) - failed}/{len(results)} suites passed")
    return 0 if failed == 0 else 3


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "fuse":
            return _cmd_fuse(args)
        if args.command == "eval":
            return _cmd_eval(args)
        return _cmd_selftest(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (
        FileNotFoundError,
        ImageFormatError,
        CheckpointError,
        ResidueError,
        ValueError,
        RuntimeError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
