"""Command-line front end.

Subcommands: gen (synthesize domains to disk), train (one scenario x
variant x norm x seed), bench (full matrix with report tables),
gradcheck (gradient verification suite), inspect (summarize datasets,
checkpoints, or reports). Progress goes to stderr; artifacts go under
the output directory only.

Exit codes: 0 success, 1 failed checks, 2 malformed configuration,
3 missing files.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import struct
import sys
from pathlib import Path

from . import bench as bench_mod
from . import siggen
from .config import ConfigError, DEFAULT_CONFIG, load_config

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_BAD_CONFIG = 2
EXIT_MISSING_FILE = 3

OUT_ENV_VAR = "MOC_XTALK_OUT"


def _err(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moc-xtalk",
        description="Compound-fault diagnosis workbench (synthetic data, "
                    "cross-talk multi-output classifiers, domain adaptation).")
    parser.add_argument("--print-default-config", action="store_true",
                        help="print the built-in default config as JSON and exit")
    sub = parser.add_subparsers(dest="command")

    def common(p):
        p.add_argument("--config", type=str, default=None,
                       help="JSON config file merged over the defaults")
        p.add_argument("--out", type=str, default=None,
                       help=f"output directory (default: ${OUT_ENV_VAR} or config out_dir)")

    p_gen = sub.add_parser("gen", help="synthesize the configured domains to disk")
    common(p_gen)

    p_train = sub.add_parser("train", help="run one scenario/variant/norm/seed cell")
    common(p_train)
    p_train.add_argument("--scenario", type=str, default=None,
                         help="source:target pair, e.g. A:C (default: first configured)")
    p_train.add_argument("--variant", type=str, default=None)
    p_train.add_argument("--norm", type=str, default=None)
    p_train.add_argument("--seed", type=int, default=None)

    p_bench = sub.add_parser("bench", help="run the full benchmark matrix")
    common(p_bench)
    p_bench.add_argument("--jobs", type=int, default=None,
                         help="parallel cells (default: config bench.jobs)")

    p_grad = sub.add_parser("gradcheck", help="run the gradient verification suite")
    common(p_grad)

    p_inspect = sub.add_parser("inspect", help="summarize a dataset dir, checkpoint, or report")
    p_inspect.add_argument("path", type=str)
    return parser


def _resolve_out(args, cfg: dict) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    env = os.environ.get(OUT_ENV_VAR)
    if env:
        return Path(env)
    return Path(cfg["out_dir"])


def _load_config_or_exit(args) -> dict:
    path = getattr(args, "config", None)
    if path is not None and not Path(path).exists():
        _err(f"error: config file not found: {path}")
        raise SystemExit(EXIT_MISSING_FILE)
    try:
        return load_config(path)
    except ConfigError as exc:
        _err(f"error: invalid config: {exc}")
        raise SystemExit(EXIT_BAD_CONFIG)


def cmd_gen(args) -> int:
    cfg = _load_config_or_exit(args)
    out = _resolve_out(args, cfg)
    for tag in cfg["dataset"]["domains"]:
        path = bench_mod.ensure_dataset(cfg, tag, out)
        print(path)
    return EXIT_OK


def _parse_scenario(text: str, cfg: dict) -> tuple[str, str]:
    pair = text.replace("->", ":").split(":")
    if len(pair) != 2 or not all(pair):
        _err(f"error: bad scenario {text!r}, expected SOURCE:TARGET")
        raise SystemExit(EXIT_BAD_CONFIG)
    for tag in pair:
        if tag not in cfg["dataset"]["domains"]:
            _err(f"error: scenario domain {tag!r} is not configured")
            raise SystemExit(EXIT_BAD_CONFIG)
    return pair[0], pair[1]


def cmd_train(args) -> int:
    cfg = _load_config_or_exit(args)
    out = _resolve_out(args, cfg)
    if args.scenario:
        source, target = _parse_scenario(args.scenario, cfg)
    else:
        source, target = cfg["scenarios"][0]
    cell = bench_mod.Cell(
        source=source, target=target,
        variant=args.variant or cfg["model"]["variant"],
        norm=args.norm or cfg["model"]["norm_kind"],
        seed=args.seed if args.seed is not None else cfg["train"]["seeds"][0])
    try:
        report = bench_mod.run_cell(cfg, cell, out)
    except ValueError as exc:
        _err(f"error: {exc}")
        return EXIT_BAD_CONFIG
    print(json.dumps({"cell": cell.slug, "joint_macro_f1": report.joint_macro_f1,
                      "fault_f1": report.fault_f1,
                      "wall_clock_s": report.wall_clock_s}, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _load_config_or_exit(args)
    out = _resolve_out(args, cfg)
    reports = bench_mod.run_bench(cfg, out, jobs=args.jobs)
    mean = sum(r.joint_macro_f1 for r in reports) / len(reports)
    print(json.dumps({"cells": len(reports), "mean_joint_macro_f1": mean,
                      "report_dir": str(out / "report")}, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verify import run_suite
    results = run_suite()
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status} {r.name:20s} max_rel_err={r.max_rel_err:.3e} "
              f"tol={r.tolerance:g} checked={r.n_checked}")
    return EXIT_OK if failed == 0 else EXIT_CHECK_FAILED


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if not path.exists():
        _err(f"error: no such path: {path}")
        return EXIT_MISSING_FILE
    if path.is_dir() and (path / siggen.MANIFEST_NAME).exists():
        man = siggen.read_manifest(path)
        summary = {"kind": "dataset", "subset": man["subset"],
                   "segments": len(man["segments"]),
                   "classes": len(man["class_list"]),
                   "fs_hz": man["fs_hz"],
                   "profile": man["profile"]}
        print(json.dumps(summary, indent=1, sort_keys=True))
        return EXIT_OK
    if path.is_file() and path.suffix == ".json":
        with open(path) as f:
            print(json.dumps(json.load(f), indent=1, sort_keys=True)[:4000])
        return EXIT_OK
    if path.is_file():
        with open(path, "rb") as f:
            magic = f.read(8)
            if magic != b"MOCX0001":
                _err("error: not a dataset, report, or parameter checkpoint")
                return EXIT_CHECK_FAILED
            (n,) = struct.unpack("<Q", f.read(8))
            header = json.loads(f.read(n))
        total = sum(math.prod(a["shape"]) for a in header["arrays"])
        print(json.dumps({"kind": "checkpoint", "arrays": len(header["arrays"]),
                          "scalars": total, "meta": header["meta"]},
                         indent=1, sort_keys=True))
        return EXIT_OK
    _err("error: nothing recognizable to inspect")
    return EXIT_CHECK_FAILED


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_default_config:
        print(json.dumps(DEFAULT_CONFIG, indent=1, sort_keys=True))
        return EXIT_OK
    handlers = {"gen": cmd_gen, "train": cmd_train, "bench": cmd_bench,
                "gradcheck": cmd_gradcheck, "inspect": cmd_inspect}
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_BAD_CONFIG
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
