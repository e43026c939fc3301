"""Command-line interface for sparsetile.

Subcommands:

* ``make-dense``  write a seeded random raw-dense matrix;
* ``convert``     prune and pack a raw-dense matrix into a ``.spx`` file;
* ``bench``       validate and time kernels over a sweep, write CSV;
* ``report``      summarize a bench CSV as markdown (and optional plots);
* ``catalog``     print the built-in shape catalog.

Run ``sparsetile --help`` or ``python -m sparsetile --help`` for usage.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

from . import tuning
from .bench import KERNELS, BenchConfig, catalog_shapes, run_bench, write_csv
from .config_service import ConfigService, resolve_workers
from .convert import RDN_DTYPES, convert, make_dense, write_raw_dense
from .errors import SparseTileError
from .report import report

_INT8_VARIANT = {"dense": "int8_dense", "sparse": "int8_sparse"}


def _parse_arguments(argv: Optional[List[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="sparsetile",
        description="sparsetile - bitmap-compressed sparse weight kernels and bench toolkit",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    def add_common(subparser: argparse.ArgumentParser) -> None:
        subparser.add_argument(
            "--portable",
            "-p",
            action="store_true",
            help="Force portable mode (ignored if portable.flag is present)",
        )
        subparser.add_argument("--log-file", help="Append log lines to this file as well")
        subparser.add_argument("--quiet", "-q", action="store_true", help="Do not print log lines to the console")

    # make-dense
    sp = subparsers.add_parser("make-dense", help="Write a seeded random raw-dense (.rdn) matrix")
    add_common(sp)
    sp.add_argument("output", help="Path of the .rdn file to write")
    sp.add_argument("--rows", type=int, required=True, help="Rows (inner dimension K)")
    sp.add_argument("--cols", type=int, required=True, help="Columns (output dimension N)")
    sp.add_argument("--dtype", choices=sorted(RDN_DTYPES), default="bf16", help="Element type")
    sp.add_argument("--seed", type=int, default=None, help="Random seed (default: config seed)")

    # convert
    sp = subparsers.add_parser("convert", help="Prune and pack a raw-dense matrix into a .spx file")
    add_common(sp)
    sp.add_argument("input", help="Raw-dense (.rdn) input file")
    sp.add_argument("output", help="Packed (.spx) output file")
    sp.add_argument("--sparsity", type=float, required=True, help="Fraction of weights to prune")
    sp.add_argument("--dtype", choices=("bf16", "int8"), default="bf16", help="Packed element type")
    sp.add_argument("--workers", type=int, default=None, help="Worker partitions baked into the file")
    sp.add_argument("--vector-path", action="store_true", help="Pack in the vector-path layout (BF16 only)")

    # bench
    sp = subparsers.add_parser("bench", help="Validate and time kernels, write CSV")
    add_common(sp)
    sp.add_argument("--kernel", nargs="+", choices=KERNELS, default=["sparse"], help="Kernel variant(s)")
    sp.add_argument("--dtype", choices=("bf16", "int8"), default="bf16", help="int8 maps dense/sparse to their INT8 variants")
    sp.add_argument("--m", type=int, nargs="+", default=[1], help="Batch sizes (rows of the input)")
    sp.add_argument("--k", type=int, default=None, help="Inner dimension")
    sp.add_argument("--n", type=int, default=None, help="Output dimension")
    sp.add_argument("--catalog", action="store_true", help="Sweep the built-in projection shape catalog")
    sp.add_argument("--catalog-scale", type=int, default=1, help="Divide catalog dimensions by this factor")
    sp.add_argument("--include-profile", action="store_true", help="Add the profile shapes to the catalog sweep")
    sp.add_argument("--sparsity", type=float, nargs="+", default=[0.5], help="Weight sparsities")
    sp.add_argument("--workers", type=int, nargs="+", default=None, help="Worker counts (default: resolved)")
    sp.add_argument("--neuron-groups", type=int, default=None, help="Vector-path lane groups in flight (1-8)")
    sp.add_argument("--reps", type=int, default=None, help="Timed repetitions (>= 3)")
    sp.add_argument("--warmup", type=int, default=None, help="Warmup iterations (>= 1)")
    sp.add_argument("--seed", type=int, default=None, help="Seed for generated inputs")
    sp.add_argument("--context", type=int, nargs="+", default=None, help="Attention context lengths")
    sp.add_argument("--heads", type=int, default=None, help="Query heads (default: tuned attention shape)")
    sp.add_argument("--kv-heads", type=int, default=None, help="KV heads (default: tuned attention shape)")
    sp.add_argument("--head-dim", type=int, default=None, help="Head dimension (default: tuned attention shape)")
    sp.add_argument("--k-sparsity", type=float, nargs="+", default=[tuning.KV_SPARSITY_DEFAULT[0]], help="K cache sparsities")
    sp.add_argument("--v-sparsity", type=float, nargs="+", default=[tuning.KV_SPARSITY_DEFAULT[1]], help="V cache sparsities")
    sp.add_argument("--sweep", help="JSON sweep file (overrides the sweep flags)")
    sp.add_argument("--out", help="CSV output path (default: <out_dir>/bench.csv)")

    # report
    sp = subparsers.add_parser("report", help="Summarize a bench CSV")
    add_common(sp)
    sp.add_argument("csv", help="Bench CSV file")
    sp.add_argument("--out", help="Write the markdown report to this file")
    sp.add_argument("--plot", help="Write speedup plots (PNG) into this directory")

    # catalog
    sp = subparsers.add_parser("catalog", help="Print the projection shape catalog")
    add_common(sp)
    sp.add_argument("--scale", type=int, default=1, help="Divide dimensions by this factor")
    sp.add_argument("--profile", action="store_true", help="Include the profile shapes")
    return parser.parse_args(argv)


def _make_logger(args: argparse.Namespace) -> Callable[[str], None]:
    log_path = Path(args.log_file).expanduser() if getattr(args, "log_file", None) else None
    quiet = bool(getattr(args, "quiet", False))
    if log_path is not None:
        log_path.parent.mkdir(parents=True, exist_ok=True)

    def _log(msg: str) -> None:
        if not quiet:
            print(msg)
        if log_path is not None:
            with log_path.open("a", encoding="utf-8") as f:
                f.write(msg + "\n")

    return _log


def _bench_configs(args: argparse.Namespace, config: Dict[str, Any]) -> List[BenchConfig]:
    if args.sweep:
        return [BenchConfig.from_file(Path(args.sweep).expanduser())]
    if args.catalog:
        shapes = catalog_shapes(args.catalog_scale, include_profile=args.include_profile)
    elif args.k is not None and args.n is not None:
        shapes = [{"k": args.k, "n": args.n}]
    else:
        shapes = [dict(tuning.SHAPE_CATALOG[5])]
    workers = args.workers or [resolve_workers(None, config)]
    common: Dict[str, Any] = {
        "workers": workers,
        "reps": args.reps if args.reps is not None else int(config.get("reps", tuning.BENCH_REPS_DEFAULT)),
        "warmup": args.warmup if args.warmup is not None else int(config.get("warmup", tuning.BENCH_WARMUP_DEFAULT)),
        "seed": args.seed if args.seed is not None else int(config.get("seed", tuning.BENCH_SEED_DEFAULT)),
    }
    configs = []
    for kernel in args.kernel:
        if args.dtype == "int8":
            kernel = _INT8_VARIANT.get(kernel, kernel)
        if kernel == "attention":
            shape = tuning.ATTENTION_SHAPE_DEFAULT
            configs.append(
                BenchConfig(
                    kernel=kernel,
                    context=args.context or [shape["context"]],
                    heads=args.heads if args.heads is not None else shape["heads"],
                    kv_heads=args.kv_heads if args.kv_heads is not None else shape["kv_heads"],
                    head_dim=args.head_dim if args.head_dim is not None else shape["head_dim"],
                    k_sparsity=list(args.k_sparsity),
                    v_sparsity=list(args.v_sparsity),
                    **common,
                )
            )
        else:
            groups = args.neuron_groups or int(config.get("num_neuron_groups", tuning.NUM_NEURON_GROUPS_DEFAULT))
            configs.append(
                BenchConfig(
                    kernel=kernel,
                    shapes=shapes,
                    m=list(args.m),
                    sparsity=list(args.sparsity),
                    neuron_groups=groups,
                    **common,
                )
            )
    return configs


def _run_command(args: argparse.Namespace) -> int:
    service = ConfigService(app_dir=Path.cwd())
    config = service.load_config(cli_portable=bool(getattr(args, "portable", False)))
    service.apply_tuning(config)
    log = _make_logger(args)
    command = args.command

    if command == "make-dense":
        seed = args.seed if args.seed is not None else int(config.get("seed", tuning.BENCH_SEED_DEFAULT))
        matrix = make_dense(args.rows, args.cols, args.dtype, seed)
        size = write_raw_dense(args.output, matrix)
        log(f"make-dense file={args.output} shape={args.rows}x{args.cols} dtype={args.dtype} seed={seed} bytes={size}")
        return 0

    if command == "convert":
        workers = resolve_workers(args.workers, config)
        convert(
            args.input,
            args.output,
            args.sparsity,
            dtype=args.dtype,
            workers=workers,
            vector_path=args.vector_path,
            log_callback=log,
            log_to_console=False,
            clamp_workers=args.workers is None,
        )
        return 0

    if command == "bench":
        configs = _bench_configs(args, config)
        out_dir = Path(config.get("out_dir", ".")).expanduser()
        out_path = Path(args.out).expanduser() if args.out else out_dir / "bench.csv"
        results = run_bench(configs, log_callback=log, log_to_console=False)
        write_csv(results, out_path)
        log(f"bench points={len(results)} csv={out_path}")
        return 0

    if command == "report":
        text = report(args.csv, out_path=args.out, plot_dir=args.plot)
        print(text)
        return 0

    if command == "catalog":
        for shape in catalog_shapes(args.scale, include_profile=args.profile):
            layers = f" layers={shape['layers']}" if "layers" in shape else ""
            print(f"{shape['name']}: k={shape['k']} n={shape['n']}{layers}")
        return 0

    print(f"error: unrecognized command {command}", file=sys.stderr)
    return 1


def main(argv: Optional[List[str]] = None) -> int:
    args = _parse_arguments(argv)
    try:
        return _run_command(args)
    except SparseTileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
