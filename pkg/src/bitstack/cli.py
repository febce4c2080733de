"""``bitstack`` command-line driver.

Subcommands: decompose, sort, load-eval, sizes, sweep, verify.

Exit status: 0 success, 1 runtime failure, 2 bad arguments or config,
3 container read/write failure, 4 ``verify`` found violations. Errors are
printed to stderr as one line: ``error[CODE]: message``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._sizes import FACTOR_BITS, MIB, block_size_bits, block_size_bytes, mib
from .avd import STORAGE_DTYPES
from .errors import BadConfig, BitStackError
from .harness import (
    NetworkConfig,
    SurrogateEvaluator,
    budget_sweep,
    build_reference_network,
    compress_network,
    format_sweep_csv,
    load_network,
    make_calibration,
    read_matrix,
    sweep_grid,
)
from .loader import resolve_budget
from .stack import STRATEGIES, sort_stacks, unsorted_stack, verify_order
from .store import build_container, read_block_range, read_container, read_layout, write_container

_UNITS = {"": 1, "B": 1, "KiB": 1 << 10, "MiB": 1 << 20, "GiB": 1 << 30}


def parse_bytes(text: str) -> int:
    """Parse ``"4096"``, ``"64KiB"``, ``"1.5MiB"``; decimal units are rejected."""
    m = re.fullmatch(r"\s*([0-9]*\.?[0-9]+)\s*([A-Za-z]*)\s*", text)
    if not m:
        raise BadConfig(f"cannot parse byte size {text!r}")
    number, unit = m.groups()
    if unit not in _UNITS:
        raise BadConfig(f"unknown unit {unit!r} in {text!r}; use B, KiB, MiB or GiB")
    value = float(number) * _UNITS[unit]
    if value != int(value) and unit in ("", "B"):
        raise BadConfig(f"byte count must be whole: {text!r}")
    return int(value)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run_config(args) -> dict:
    """Validated run configuration, echoed into the container."""
    if args.n_iters < 1:
        raise BadConfig("--n-iters must be at least 1")
    if args.k < 1 or args.k > args.hidden:
        raise BadConfig(f"--k must lie in [1, {args.hidden}]")
    if args.sort_rows < 1 or args.sort_rows > args.calib_rows:
        raise BadConfig("--sort-rows must lie in [1, --calib-rows]")
    NetworkConfig(args.layers, args.maps, args.hidden).validate()
    cfg = {
        "seed": args.seed,
        "layers": args.layers,
        "maps_per_layer": args.maps,
        "hidden": args.hidden,
        "calib_rows": args.calib_rows,
        "calib_seed": args.seed + 1 if args.calib_seed is None else args.calib_seed,
        "sort_rows": args.sort_rows,
        "n_iters": args.n_iters,
        "k": args.k,
        "precision": args.precision,
    }
    for key, path in (("weights_file", args.weights), ("calib_file", args.calib)):
        if path is not None:
            if not Path(path).is_file():
                raise BadConfig(f"no such file: {path}")
            cfg[key] = str(path)
            cfg[key + "_sha256"] = _sha256(path)
    return cfg


def model_from_config(cfg: dict):
    """Rebuild the reference network and calibration batch a container was made from."""
    try:
        net_cfg = NetworkConfig(cfg["layers"], cfg["maps_per_layer"], cfg["hidden"]).validate()
        if "weights_file" in cfg:
            if _sha256(cfg["weights_file"]) != cfg["weights_file_sha256"]:
                raise BadConfig(f"{cfg['weights_file']} changed since the container was written")
            net = load_network(cfg["weights_file"], net_cfg)
        else:
            net = build_reference_network(net_cfg, cfg["seed"])
        if "calib_file" in cfg:
            if _sha256(cfg["calib_file"]) != cfg["calib_file_sha256"]:
                raise BadConfig(f"{cfg['calib_file']} changed since the container was written")
            calib = read_matrix(cfg["calib_file"])
            if calib.shape[1] != net_cfg.hidden:
                raise BadConfig(f"calibration file has {calib.shape[1]} channels, network expects {net_cfg.hidden}")
        else:
            calib = make_calibration(cfg["calib_rows"], net_cfg.hidden, cfg["calib_seed"])
    except KeyError as exc:
        raise BadConfig(f"container config lacks {exc}") from None
    except OSError as exc:
        raise BadConfig(f"cannot read model source: {exc}") from None
    return net, calib


# -- commands --------------------------------------------------------------


def cmd_decompose(args) -> int:
    cfg = run_config(args)
    net, calib = model_from_config(cfg)
    stacks, scalings = compress_network(net, calib, cfg["n_iters"], cfg["k"], cfg["precision"])
    container = build_container(cfg, stacks, scalings, unsorted_stack(stacks), cfg["precision"])
    write_container(args.output, container)
    print(f"wrote {args.output}: {len(stacks)} weights x {cfg['n_iters']} blocks")
    return 0


def cmd_sort(args) -> int:
    c = read_container(args.container)
    evaluator = None
    if args.strategy != "random":
        net, calib = model_from_config(c.config)
        evaluator = SurrogateEvaluator(net, c.scalings, calib[: c.config.get("sort_rows", len(calib))])
    seed = c.config.get("seed", 0) if args.seed is None else args.seed
    universal = sort_stacks(c.stacks, args.strategy, evaluator, seed=seed)
    config = dict(c.config)
    config["sort"] = {"strategy": args.strategy, "seed": seed} if args.strategy == "random" else {"strategy": args.strategy}
    write_container(args.output, build_container(config, c.stacks, c.scalings, universal, c.precision))
    print(f"wrote {args.output}: {len(universal)} blocks sorted by {args.strategy}")
    return 0


def load_eval(path, budget: int) -> dict:
    """Plan from the container layout, stream only the prefix, and score it."""
    layout = read_layout(path)
    if layout.universal.strategy == "none":
        raise BadConfig("container is unsorted; run `bitstack sort` first")
    plan = resolve_budget(layout.universal, layout.block_sizes(), budget)
    mats = {w.weight: np.zeros((w.m, w.n)) for w in layout.weights}
    for block in read_block_range(path, 0, plan.prefix_len):
        mats[block.weight] += block.restored
    net, calib = model_from_config(layout.config)
    score = SurrogateEvaluator(net, layout.scalings, calib)(mats)
    return {
        "budget_bytes": plan.budget_bytes,
        "loaded_bytes": plan.total_bytes,
        "prefix_len": plan.prefix_len,
        "degenerate": plan.degenerate,
        "eval_score": score,
        "levels": {str(w): lvl for w, lvl in sorted(plan.per_weight_level.items())},
    }


def cmd_load_eval(args) -> int:
    report = load_eval(args.container, parse_bytes(args.budget))
    if args.json:
        print(json.dumps(report, sort_keys=True))
    else:
        print(f"budget      {report['budget_bytes']} B")
        print(f"loaded      {report['loaded_bytes']} B ({mib(report['loaded_bytes'], 4)} MiB)")
        print(f"blocks      {report['prefix_len']}")
        print(f"degenerate  {str(report['degenerate']).lower()}")
        print(f"score       {report['eval_score']!r}")
        print("levels      " + " ".join(f"{w}={lvl}" for w, lvl in report["levels"].items()))
    return 0


def size_rows(shapes, k: int, precision: str = "half") -> list[dict]:
    bits_per = FACTOR_BITS[precision]
    rows = []
    for name, m, n in shapes:
        bits = block_size_bits(m, n, k, bits_per)
        rows.append({"weight": name, "m": m, "n": n, "k": k, "size_bits": bits,
                     "size_bytes": block_size_bytes(bits), "size_mib": str(mib(block_size_bytes(bits)))})
    return rows


def _parse_shape(text: str) -> tuple[str, int, int]:
    m = re.fullmatch(r"(\d+)[xX](\d+)", text)
    if not m:
        raise BadConfig(f"shape must look like 4096x1024, got {text!r}")
    return text, int(m.group(1)), int(m.group(2))


def cmd_sizes(args) -> int:
    shapes = [_parse_shape(s) for s in args.shape]
    k, precision = args.k, "half"
    if args.container is not None:
        layout = read_layout(args.container)
        k, precision = layout.k, layout.precision
        shapes = [(str(w.weight), w.m, w.n) for w in layout.weights] + shapes
    if not shapes:
        raise BadConfig("give a container or at least one --shape")
    rows = size_rows(shapes, k, precision)
    cols = ["weight", "m", "n", "k", "size_bits", "size_bytes", "size_mib"]
    print(f"{'weight':<16}{'m':>7}{'n':>7}{'k':>4}{'bits':>12}{'bytes':>11}{'MiB':>9}")
    for r in rows:
        print(f"{r['weight']:<16}{r['m']:>7}{r['n']:>7}{r['k']:>4}{r['size_bits']:>12}{r['size_bytes']:>11}{r['size_mib']:>9}")
    if args.csv:
        lines = [",".join(cols)] + [",".join(str(r[c]) for c in cols) for r in rows]
        Path(args.csv).write_text("\n".join(lines) + "\n")
    return 0


def _gnuplot_script(csv_path: str) -> str:
    return (
        "set datafile separator ','\n"
        "set key autotitle columnhead\n"
        "set xlabel 'loaded bytes (MiB)'\n"
        "set ylabel 'surrogate score'\n"
        "set logscale y\n"
        f"plot '{csv_path}' using ($2/{MIB}.0):5 with linespoints title 'score'\n"
    )


def cmd_sweep(args) -> int:
    c = read_container(args.container)
    if c.universal.strategy == "none":
        raise BadConfig("container is unsorted; run `bitstack sort` first")
    total = sum(block_size_bytes(b.size_bits) for b in c.blocks_in_order())
    if args.stride is not None:
        start = parse_bytes(args.start) if args.start else 0
        stop = parse_bytes(args.stop) if args.stop else total
        stride = parse_bytes(args.stride)
        if stride <= 0 or stop < start:
            raise BadConfig("need stride > 0 and stop >= start")
        budgets = list(range(start, stop + 1, stride))
    else:
        budgets = sweep_grid(total, args.points)
    net, calib = model_from_config(c.config)
    rows = budget_sweep(c.stacks, c.universal, c.scalings, SurrogateEvaluator(net, c.scalings, calib), budgets)
    text = format_sweep_csv(rows)
    if args.output:
        Path(args.output).write_text(text)
        print(f"wrote {args.output}: {len(rows)} budgets")
    else:
        sys.stdout.write(text)
    if args.gnuplot:
        Path(args.gnuplot).write_text(_gnuplot_script(args.output or "sweep.csv"))
    return 0


def cmd_verify(args) -> int:
    c = read_container(args.container)
    problems = verify_order(c.universal)
    if not problems:
        print(f"ok: {len(c.universal)} blocks, strategy {c.universal.strategy}")
        return 0
    for v in problems:
        print(f"{v.kind} at {v.position}: {v.ref} {v.detail}")
    print(f"error[ORDER_VIOLATION]: {len(problems)} violations", file=sys.stderr)
    return 4


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bitstack", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("decompose", help="scale and decompose a model into an unsorted container")
    d.add_argument("-o", "--output", required=True)
    d.add_argument("--seed", type=int, default=1)
    d.add_argument("--layers", type=int, default=4)
    d.add_argument("--maps", type=int, default=2, help="linear maps per layer")
    d.add_argument("--hidden", type=int, default=64)
    d.add_argument("--weights", help="network weights (.npz, keys '<layer>.lin<j>')")
    d.add_argument("--calib", help="calibration matrix file (BMAT format)")
    d.add_argument("--calib-rows", type=int, default=256)
    d.add_argument("--calib-seed", type=int, default=None)
    d.add_argument("--sort-rows", type=int, default=32, help="calibration rows used when sorting")
    d.add_argument("--n-iters", type=int, default=16)
    d.add_argument("--k", type=int, default=16)
    d.add_argument("--precision", choices=sorted(STORAGE_DTYPES), default="half")
    d.set_defaults(func=cmd_decompose)

    s = sub.add_parser("sort", help="order the residual blocks into a universal stack")
    s.add_argument("container")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--strategy", choices=STRATEGIES, default="average")
    s.add_argument("--seed", type=int, default=None, help="shuffle seed for --strategy random")
    s.set_defaults(func=cmd_sort)

    le = sub.add_parser("load-eval", help="load the prefix fitting a budget and score it")
    le.add_argument("container")
    le.add_argument("--budget", required=True, help="bytes, e.g. 65536, 64KiB, 1.5MiB")
    le.add_argument("--json", action="store_true")
    le.set_defaults(func=cmd_load_eval)

    sz = sub.add_parser("sizes", help="residual block size table")
    sz.add_argument("container", nargs="?")
    sz.add_argument("--shape", action="append", default=[], help="extra MxN shape (repeatable)")
    sz.add_argument("--k", type=int, default=16, help="rank for --shape rows without a container")
    sz.add_argument("--csv")
    sz.set_defaults(func=cmd_sizes)

    sw = sub.add_parser("sweep", help="score the model over a range of budgets")
    sw.add_argument("container")
    sw.add_argument("-o", "--output")
    sw.add_argument("--points", type=int, default=50, help="evenly spaced budgets up to the full size")
    sw.add_argument("--start")
    sw.add_argument("--stop")
    sw.add_argument("--stride", help="fixed budget stride; overrides --points")
    sw.add_argument("--gnuplot", help="also write a gnuplot script plotting the CSV")
    sw.set_defaults(func=cmd_sweep)

    v = sub.add_parser("verify", help="check container integrity and stack-order invariants")
    v.add_argument("container")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BitStackError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return exc.exit_status
    except ValueError as exc:
        print(f"error[BAD_CONFIG]: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
