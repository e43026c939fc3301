"""Benchmark harness: validate each configuration, then time it.

A sweep (:class:`BenchConfig`) expands into points.  Every point generates
its operands from the seed and its shape only, so dense and sparse points
of the same shape multiply the same pruned weights and must produce the
same checksum.  Before timing, the kernel output is checked against its
oracle; a mismatch raises :class:`ValidationError` and no timing is
reported.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import config_service, tuning
from .attention import decode_attention, magnitude_prune, pack_kv
from .dtypes import bf16_to_f32, to_bf16
from .errors import ConfigError, ReportError, ValidationError
from .int8_path import (
    choose_scales,
    dequantize_output,
    int8_accumulators,
    quantize,
    quantize_weights,
)
from .kernel_core import GemmPlan, bytes_read_model, dense_gemm, reorder_dense, sparse_gemm, vector_sparse_gemm
from .reference_oracle import gemm_error_bound, integer_gemm, max_normalized_error, naive_attention, naive_gemm_f64
from .sparse_format import TileLayout, compressed_size_bytes, pack_weights, unpack_weights

KERNELS = ("dense", "sparse", "vector_sparse", "int8_dense", "int8_sparse", "attention")

CSV_COLUMNS = (
    "kernel",
    "dtype",
    "m",
    "k",
    "n",
    "heads",
    "kv_heads",
    "head_dim",
    "context",
    "sparsity",
    "k_sparsity",
    "v_sparsity",
    "workers",
    "neuron_groups",
    "reps",
    "warmup",
    "seed",
    "nnz",
    "modeled_weight_bytes",
    "dense_weight_bytes",
    "checksum",
    "median_ns",
    "min_ns",
    "throughput",
    "throughput_unit",
)
TIMING_COLUMNS = ("median_ns", "min_ns", "throughput")


def catalog_shapes(scale: int = 1, include_profile: bool = False) -> List[Dict[str, Any]]:
    """Decoder projection shapes, optionally divided by ``scale`` for desk-sized runs."""
    if scale < 1:
        raise ConfigError(f"catalog scale must be >= 1, got {scale}")
    source = list(tuning.SHAPE_CATALOG) + (list(tuning.PROFILE_SHAPES) if include_profile else [])
    shapes = []
    for entry in source:
        shape = dict(entry)
        shape["k"] = max(1, int(entry["k"]) // scale)
        shape["n"] = max(1, int(entry["n"]) // scale)
        shapes.append(shape)
    return shapes


def kernel_dtype(kernel: str) -> str:
    return "int8" if kernel.startswith("int8") else "bf16"


@dataclass(frozen=True)
class BenchPoint:
    kernel: str
    m: int = 1
    k: int = 0
    n: int = 0
    heads: int = 0
    kv_heads: int = 0
    head_dim: int = 0
    context: int = 0
    sparsity: float = 0.0
    k_sparsity: float = 0.0
    v_sparsity: float = 0.0
    workers: int = 1
    neuron_groups: int = tuning.NUM_NEURON_GROUPS_DEFAULT

    @property
    def dtype(self) -> str:
        return kernel_dtype(self.kernel)

    def describe(self) -> str:
        if self.kernel == "attention":
            return (
                f"kernel=attention heads={self.heads} kv_heads={self.kv_heads} head_dim={self.head_dim} "
                f"context={self.context} k_sparsity={self.k_sparsity} v_sparsity={self.v_sparsity} "
                f"workers={self.workers}"
            )
        return (
            f"kernel={self.kernel} m={self.m} k={self.k} n={self.n} "
            f"sparsity={self.sparsity} workers={self.workers}"
        )


@dataclass
class BenchConfig:
    """One sweep: every combination of the listed values is a point."""

    kernel: str
    shapes: List[Dict[str, Any]] = field(default_factory=lambda: [{"k": 4096, "n": 14336}])
    m: List[int] = field(default_factory=lambda: [1])
    sparsity: List[float] = field(default_factory=lambda: [0.5])
    workers: List[int] = field(default_factory=lambda: [1])
    context: List[int] = field(default_factory=lambda: [tuning.ATTENTION_SHAPE_DEFAULT["context"]])
    k_sparsity: List[float] = field(default_factory=lambda: [tuning.KV_SPARSITY_DEFAULT[0]])
    v_sparsity: List[float] = field(default_factory=lambda: [tuning.KV_SPARSITY_DEFAULT[1]])
    heads: int = tuning.ATTENTION_SHAPE_DEFAULT["heads"]
    kv_heads: int = tuning.ATTENTION_SHAPE_DEFAULT["kv_heads"]
    head_dim: int = tuning.ATTENTION_SHAPE_DEFAULT["head_dim"]
    neuron_groups: int = tuning.NUM_NEURON_GROUPS_DEFAULT
    reps: int = tuning.BENCH_REPS_DEFAULT
    warmup: int = tuning.BENCH_WARMUP_DEFAULT
    seed: int = tuning.BENCH_SEED_DEFAULT

    def __post_init__(self) -> None:
        if self.kernel not in KERNELS:
            raise ConfigError(f"Unknown kernel '{self.kernel}' (expected one of: {', '.join(KERNELS)})")
        if self.reps < tuning.BENCH_MIN_REPS:
            raise ConfigError(f"reps must be >= {tuning.BENCH_MIN_REPS}, got {self.reps}")
        if self.warmup < tuning.BENCH_MIN_WARMUP:
            raise ConfigError(f"warmup must be >= {tuning.BENCH_MIN_WARMUP}, got {self.warmup}")
        if not 1 <= self.neuron_groups <= tuning.NUM_NEURON_GROUPS_MAX:
            raise ConfigError(f"neuron_groups must be in 1..{tuning.NUM_NEURON_GROUPS_MAX}")
        for name in ("sparsity", "k_sparsity", "v_sparsity"):
            for value in getattr(self, name):
                if not 0.0 <= value <= 1.0:
                    raise ConfigError(f"{name} values must be in [0, 1], got {value}")
        if any(w < 1 for w in self.workers) or any(m < 1 for m in self.m):
            raise ConfigError("workers and m values must be >= 1")
        if self.kernel == "attention" and self.heads % self.kv_heads:
            raise ConfigError(f"{self.heads} heads do not divide into {self.kv_heads} kv heads")
        if self.kernel == "attention" and any(c < 1 for c in self.context):
            raise ConfigError("attention context values must be >= 1")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "BenchConfig":
        config_service.validate_json(data, config_service.BENCH_CONFIG_SCHEMA, what="bench sweep")
        known = {f.name for f in fields(cls)}
        return cls(**{key: value for key, value in data.items() if key in known})

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "BenchConfig":
        data = config_service.load_json(Path(path))
        if data is None:
            raise ConfigError(f"bench sweep file not found: {path}")
        return cls.from_dict(data)

    @property
    def dtype(self) -> str:
        return kernel_dtype(self.kernel)

    def points(self) -> List[BenchPoint]:
        if self.kernel == "attention":
            return [
                BenchPoint(
                    kernel="attention",
                    heads=self.heads,
                    kv_heads=self.kv_heads,
                    head_dim=self.head_dim,
                    context=ctx,
                    k_sparsity=ks,
                    v_sparsity=vs,
                    workers=w,
                )
                for ctx, ks, vs, w in itertools.product(self.context, self.k_sparsity, self.v_sparsity, self.workers)
            ]
        return [
            BenchPoint(
                kernel=self.kernel,
                m=m,
                k=int(shape["k"]),
                n=int(shape["n"]),
                sparsity=s,
                workers=w,
                neuron_groups=self.neuron_groups,
            )
            for shape, m, s, w in itertools.product(self.shapes, self.m, self.sparsity, self.workers)
        ]


@dataclass
class BenchResult:
    point: BenchPoint
    reps: int
    warmup: int
    seed: int
    nnz: int
    modeled_weight_bytes: int
    dense_weight_bytes: int
    checksum: str
    median_ns: int
    min_ns: int
    throughput: float
    throughput_unit: str

    def to_row(self) -> Dict[str, Any]:
        row = asdict(self.point)
        row.update(
            dtype=self.point.dtype,
            reps=self.reps,
            warmup=self.warmup,
            seed=self.seed,
            nnz=self.nnz,
            modeled_weight_bytes=self.modeled_weight_bytes,
            dense_weight_bytes=self.dense_weight_bytes,
            checksum=self.checksum,
            median_ns=self.median_ns,
            min_ns=self.min_ns,
            throughput=f"{self.throughput:.6g}",
            throughput_unit=self.throughput_unit,
        )
        return {column: row[column] for column in CSV_COLUMNS}


def output_checksum(out: np.ndarray) -> str:
    """First 16 hex digits of SHA-256 over the FP32 output bytes."""
    data = np.ascontiguousarray(out, dtype="<f4").tobytes()
    return hashlib.sha256(data).hexdigest()[:16]


# ----------------------------------------------------------------------
# Point preparation
# ----------------------------------------------------------------------
@dataclass
class _Prepared:
    run: Callable[[], np.ndarray]
    validate: Callable[[np.ndarray], None]
    nnz: int
    modeled_bytes: int
    dense_bytes: int
    flops: int


def _rng(seed: int, *dims: int) -> np.random.Generator:
    return np.random.default_rng([seed, *dims])


def _check_normalized(out: np.ndarray, ref: np.ndarray, scale: np.ndarray, what: str) -> None:
    err = max_normalized_error(out, ref, scale)
    if not err <= tuning.GEMM_RELATIVE_TOLERANCE:
        raise ValidationError(f"{what}: normalized error {err:.3e} exceeds {tuning.GEMM_RELATIVE_TOLERANCE:.3e}")


def _prepare_linear(point: BenchPoint, seed: int) -> _Prepared:
    rng = _rng(seed, point.m, point.k, point.n)
    w = rng.uniform(-1.0, 1.0, size=(point.k, point.n)).astype(np.float32)
    x = rng.uniform(-1.0, 1.0, size=(point.m, point.k)).astype(np.float32)
    plan = GemmPlan(point.m, point.n, point.k, point.workers)
    flops = 2 * point.m * point.k * point.n

    if point.dtype == "int8":
        pruned = magnitude_prune(w.astype(np.float64), point.sparsity)
        params = choose_scales(pruned).with_activation(x)
        w_q = quantize_weights(pruned, params)
        x_q = quantize(x, params.activation_scale)
        dense_bytes = bytes_read_model((point.k, point.n, "int8"))
        if point.kernel == "int8_sparse":
            packed = pack_weights(w_q, TileLayout.tile("int8"), plan.col_parts)
            operand: Any = packed
            modeled = compressed_size_bytes(packed)
        else:
            operand = reorder_dense(w_q)
            modeled = dense_bytes

        def validate(out: np.ndarray) -> None:
            acc = int8_accumulators(x_q, operand, plan)
            ref = integer_gemm(x_q, w_q)
            if not np.array_equal(acc.astype(np.int64), ref):
                raise ValidationError(f"{point.kernel}: INT32 accumulators differ from the integer oracle")
            if not np.array_equal(out, dequantize_output(acc, params)):
                raise ValidationError(f"{point.kernel}: dequantized output is not reproducible")

        return _Prepared(
            run=lambda: dequantize_output(int8_accumulators(x_q, operand, plan), params),
            validate=validate,
            nnz=int(np.count_nonzero(w_q)),
            modeled_bytes=modeled,
            dense_bytes=dense_bytes,
            flops=flops,
        )

    w_bits = magnitude_prune(to_bf16(w), point.sparsity)
    x_bits = to_bf16(x)
    dense_bytes = bytes_read_model((point.k, point.n, "bf16"))
    nnz = int(np.count_nonzero(w_bits))

    if point.kernel == "dense":
        tiles = reorder_dense(w_bits)

        def validate(out: np.ndarray) -> None:
            ref = naive_gemm_f64(x_bits, w_bits)
            _check_normalized(out, ref, gemm_error_bound(x_bits, w_bits), "dense")

        return _Prepared(lambda: dense_gemm(x_bits, tiles, plan), validate, nnz, dense_bytes, dense_bytes, flops)

    if point.kernel == "sparse":
        packed = pack_weights(w_bits, TileLayout.tile("bf16"), plan.col_parts)

        def validate(out: np.ndarray) -> None:
            ref = dense_gemm(x_bits, unpack_weights(packed), plan)
            if not np.array_equal(out.view(np.uint32), ref.view(np.uint32)):
                raise ValidationError("sparse: output is not bit-identical to the dense kernel on unpacked weights")

        return _Prepared(
            lambda: sparse_gemm(x_bits, packed, plan),
            validate,
            packed.nnz,
            compressed_size_bytes(packed),
            dense_bytes,
            flops,
        )

    packed = pack_weights(w_bits, TileLayout.vector(), plan.col_parts)

    def validate_vector(out: np.ndarray) -> None:
        ref = naive_gemm_f64(x_bits, w_bits)
        _check_normalized(out, ref, gemm_error_bound(x_bits, w_bits), "vector_sparse")

    return _Prepared(
        lambda: vector_sparse_gemm(x_bits, packed, point.neuron_groups, plan),
        validate_vector,
        packed.nnz,
        compressed_size_bytes(packed),
        dense_bytes,
        flops,
    )


def _prepare_attention(point: BenchPoint, seed: int) -> _Prepared:
    rng = _rng(seed, point.heads, point.kv_heads, point.head_dim, point.context)
    shape = (point.kv_heads, point.context, point.head_dim)
    k = to_bf16(rng.uniform(-1.0, 1.0, size=shape).astype(np.float32))
    v = to_bf16(rng.uniform(-1.0, 1.0, size=shape).astype(np.float32))
    q = to_bf16(rng.uniform(-1.0, 1.0, size=(point.heads, point.head_dim)).astype(np.float32))
    cache = pack_kv(k, v, point.k_sparsity, point.v_sparsity, workers=point.workers, n_heads=point.heads)
    group = point.heads // point.kv_heads

    def validate(out: np.ndarray) -> None:
        if not np.all(np.isfinite(out)):
            raise ValidationError("attention: non-finite output")
        for g, pack in enumerate(cache.layers[0].heads):
            kg = bf16_to_f32(unpack_weights(pack.k_static)).T[None]
            vg = bf16_to_f32(unpack_weights(pack.v_static))[None]
            rows = slice(g * group, (g + 1) * group)
            ref = naive_attention(q[rows], kg, vg)
            scale = np.full(ref.shape, max(float(np.max(np.abs(vg))), 1.0))
            _check_normalized(out[rows], ref, scale, "attention")

    modeled = sum(
        compressed_size_bytes(t) for pack in cache.layers[0].heads for t in (pack.k_static, pack.v_static)
    )
    per_head = bytes_read_model((point.head_dim, point.context, "bf16"))
    per_head += bytes_read_model((point.context, point.head_dim, "bf16"))
    return _Prepared(
        run=lambda: decode_attention(q, cache, workers=point.workers),
        validate=validate,
        nnz=sum(cache.static_nnz(0)),
        modeled_bytes=modeled,
        dense_bytes=point.kv_heads * per_head,
        flops=0,
    )


def prepare_point(point: BenchPoint, seed: int) -> _Prepared:
    if point.kernel == "attention":
        return _prepare_attention(point, seed)
    return _prepare_linear(point, seed)


def _time(run: Callable[[], np.ndarray], reps: int, warmup: int) -> List[int]:
    for _ in range(warmup):
        run()
    samples = []
    for _ in range(reps):
        start = time.perf_counter_ns()
        run()
        samples.append(time.perf_counter_ns() - start)
    return samples


def run_point(point: BenchPoint, reps: int, warmup: int, seed: int) -> BenchResult:
    """Validate then time one point."""
    prepared = prepare_point(point, seed)
    out = prepared.run()
    prepared.validate(out)
    samples = _time(prepared.run, reps, warmup)
    median_ns = int(np.median(samples))
    if point.kernel == "attention":
        throughput, unit = 1e9 / max(median_ns, 1), "tokens/s"
    else:
        throughput, unit = prepared.flops / max(median_ns, 1), "GFLOP/s"
    return BenchResult(
        point=point,
        reps=reps,
        warmup=warmup,
        seed=seed,
        nnz=prepared.nnz,
        modeled_weight_bytes=prepared.modeled_bytes,
        dense_weight_bytes=prepared.dense_bytes,
        checksum=output_checksum(out),
        median_ns=median_ns,
        min_ns=int(min(samples)),
        throughput=throughput,
        throughput_unit=unit,
    )


def run_bench(
    configs: Union[BenchConfig, Sequence[BenchConfig]],
    log_callback: Optional[Callable[[str], None]] = None,
    progress_callback: Optional[Callable[[Dict[str, Any]], None]] = None,
    log_to_console: bool = True,
) -> List[BenchResult]:
    """Run every point of one or more sweeps, one point at a time."""
    sweeps = [configs] if isinstance(configs, BenchConfig) else list(configs)

    def _emit_log(msg: str) -> None:
        if log_to_console:
            print(msg)
        if log_callback is not None:
            try:
                log_callback(msg)
            except Exception:
                pass

    def _emit_progress(phase: str, event: str, **payload: Any) -> None:
        if progress_callback is None:
            return
        data: Dict[str, Any] = {"phase": phase, "event": event}
        for key, value in payload.items():
            if value is not None:
                data[key] = value
        try:
            progress_callback(data)
        except Exception:
            pass

    work: List[Tuple[BenchConfig, BenchPoint]] = [(cfg, p) for cfg in sweeps for p in cfg.points()]
    total = len(work)
    _emit_progress("bench", "start", points_total=total, points_done=0)
    results: List[BenchResult] = []
    for index, (cfg, point) in enumerate(work, start=1):
        try:
            result = run_point(point, cfg.reps, cfg.warmup, cfg.seed)
        except ValidationError as exc:
            _emit_log(f"bench point={index}/{total} {point.describe()} status=invalid error={exc}")
            raise
        results.append(result)
        _emit_log(
            f"bench point={index}/{total} {point.describe()} nnz={result.nnz} "
            f"median_ns={result.median_ns} throughput={result.throughput:.4g} unit={result.throughput_unit} "
            f"checksum={result.checksum}"
        )
        _emit_progress("bench", "progress", points_total=total, points_done=index, kernel=point.kernel)
    _emit_progress("bench", "done", points_total=total, points_done=total)
    return results


# ----------------------------------------------------------------------
# CSV
# ----------------------------------------------------------------------
def write_csv(results: Iterable[BenchResult], path: Union[str, Path]) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(CSV_COLUMNS), lineterminator="\n")
        writer.writeheader()
        for result in results:
            writer.writerow(result.to_row())
    return out


_INT_COLUMNS = {
    "m", "k", "n", "heads", "kv_heads", "head_dim", "context", "workers", "neuron_groups",
    "reps", "warmup", "seed", "nnz", "modeled_weight_bytes", "dense_weight_bytes", "median_ns", "min_ns",
}
_FLOAT_COLUMNS = {"sparsity", "k_sparsity", "v_sparsity", "throughput"}


def read_csv(path: Union[str, Path]) -> List[Dict[str, Any]]:
    """Load bench rows with typed columns; a malformed file raises :class:`ReportError`."""
    with Path(path).open("r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ReportError(f"{path}: unexpected CSV header {reader.fieldnames}")
        rows = []
        for lineno, raw in enumerate(reader, start=2):
            row: Dict[str, Any] = {}
            try:
                for key, value in raw.items():
                    if key in _INT_COLUMNS:
                        row[key] = int(value)
                    elif key in _FLOAT_COLUMNS:
                        row[key] = float(value)
                    else:
                        row[key] = value
            except (TypeError, ValueError) as exc:
                raise ReportError(f"{path}:{lineno}: malformed row ({exc})")
            if row["kernel"] not in KERNELS:
                raise ReportError(f"{path}:{lineno}: unknown kernel '{row['kernel']}'")
            rows.append(row)
    return rows
