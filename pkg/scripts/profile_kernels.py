from __future__ import annotations

import argparse
import cProfile
import json
import pstats
import sys
import time
from pathlib import Path


def _import_sparsetile():
    repo_root = Path(__file__).resolve().parents[1]
    sys.path.insert(0, str(repo_root / "src"))

    import sparsetile.bench as bench

    return bench


def main() -> int:
    parser = argparse.ArgumentParser(description="Profile one sparsetile bench point (kernel call only).")
    parser.add_argument("--kernel", default="sparse", help="Kernel variant (dense, sparse, vector_sparse, int8_*)")
    parser.add_argument("--m", type=int, default=1, help="Rows of the input")
    parser.add_argument("--k", type=int, default=4096, help="Inner dimension")
    parser.add_argument("--n", type=int, default=4096, help="Output dimension")
    parser.add_argument("--sparsity", type=float, default=0.5, help="Weight sparsity")
    parser.add_argument("--workers", type=int, default=1, help="Worker count")
    parser.add_argument("--calls", type=int, default=10, help="Kernel calls to time")
    parser.add_argument("--seed", type=int, default=0, help="Seed for generated operands")
    parser.add_argument("--profile", action="store_true", help="Enable cProfile and print top cumulative functions")
    parser.add_argument("--stats", type=int, default=30, help="Number of cProfile rows to print")
    parser.add_argument("--sort", default="cumulative", help="cProfile sort key (default: cumulative)")
    parser.add_argument(
        "--json-out",
        type=Path,
        default=None,
        help="Optional JSON output path for metrics (e.g. benchmarks/latest_kernels.json)",
    )
    parser.add_argument("--compare", type=Path, default=None, help="Optional prior metrics JSON to compare against")
    parser.add_argument(
        "--warn-threshold-pct",
        type=float,
        default=10.0,
        help="Warn when ms/call regresses by more than this percent (used with --compare)",
    )
    args = parser.parse_args()

    if args.calls < 1:
        print("error: --calls must be >= 1", file=sys.stderr)
        return 2

    bench = _import_sparsetile()
    point = bench.BenchPoint(
        kernel=args.kernel, m=args.m, k=args.k, n=args.n, sparsity=args.sparsity, workers=args.workers
    )
    print(point.describe())
    prepared = bench.prepare_point(point, args.seed)
    prepared.validate(prepared.run())
    print("validated=true")

    prof = cProfile.Profile() if args.profile else None
    start = time.perf_counter()
    if prof is not None:
        prof.enable()
    for _ in range(args.calls):
        prepared.run()
    if prof is not None:
        prof.disable()

    elapsed = time.perf_counter() - start
    ms_per_call = (elapsed * 1000.0) / args.calls
    gflops = prepared.flops / (ms_per_call * 1e6) if ms_per_call > 0 else 0.0
    print(f"elapsed_seconds={elapsed:.3f}")
    print(f"ms_per_call={ms_per_call:.3f}")
    print(f"gflops={gflops:.3f}")
    print(f"modeled_weight_bytes={prepared.modeled_bytes}")

    metrics = {
        "version": 1,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "point": point.describe(),
        "calls": int(args.calls),
        "profile_enabled": bool(args.profile),
        "elapsed_seconds": round(elapsed, 6),
        "ms_per_call": round(ms_per_call, 6),
        "gflops": round(gflops, 6),
        "modeled_weight_bytes": int(prepared.modeled_bytes),
        "dense_weight_bytes": int(prepared.dense_bytes),
    }

    if args.json_out is not None:
        out_path = args.json_out.resolve()
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(json.dumps(metrics, indent=2), encoding="utf-8")
        print(f"json_out={out_path}")

    if args.compare is not None:
        try:
            prev = json.loads(args.compare.resolve().read_text(encoding="utf-8"))
            prev_ms = float(prev.get("ms_per_call", 0.0) or 0.0)
            delta_ms = ms_per_call - prev_ms
            delta_pct = ((delta_ms / prev_ms) * 100.0) if prev_ms > 0 else 0.0
            print(f"compare_prev_ms_per_call={prev_ms:.6f}")
            print(f"compare_curr_ms_per_call={ms_per_call:.6f}")
            print(f"compare_delta_pct={delta_pct:+.2f}")
            if delta_pct > float(args.warn_threshold_pct):
                print(
                    f"warning: performance regression exceeds threshold "
                    f"({delta_pct:+.2f}% > {float(args.warn_threshold_pct):.2f}%)",
                    file=sys.stderr,
                )
        except Exception as exc:
            print(f"warning: failed to compare metrics JSON: {exc}", file=sys.stderr)

    if prof is not None:
        stats = pstats.Stats(prof)
        stats.sort_stats(args.sort).print_stats(args.stats)

    return 0


if __name__ == "__main__":
    raise SystemExit(main())
