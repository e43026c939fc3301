from __future__ import annotations

import os
import time

import numpy as np
import pytest

from sparsetile import kernel_core, tuning
from sparsetile.dtypes import to_bf16
from sparsetile.kernel_core import GemmPlan, bytes_read_model, dense_gemm, reorder_dense, sparse_gemm
from sparsetile.sparse_format import TileLayout, compressed_size_bytes, pack_weights

from conftest import full_suite_enabled


def _median_ns(run, reps: int = 5, warmup: int = 2) -> float:
    for _ in range(warmup):
        run()
    samples = []
    for _ in range(reps):
        start = time.perf_counter_ns()
        run()
        samples.append(time.perf_counter_ns() - start)
    return float(np.median(samples))


def test_modeled_weight_bytes_at_high_sparsity() -> None:
    rng = np.random.default_rng(0)
    k, n = 1024, 3584
    w = to_bf16(rng.uniform(-1.0, 1.0, size=(k, n)).astype(np.float32))
    w[rng.random((k, n)) < tuning.PERF_SPARSITY] = 0
    packed = pack_weights(w, TileLayout.tile("bf16"), num_workers=8)
    ratio = compressed_size_bytes(packed) / bytes_read_model((k, n, "bf16"))
    # bitmap 1/16 + values 2/10 of the dense bytes
    assert ratio < tuning.PERF_MAX_BYTES_RATIO
    assert ratio == pytest.approx(0.2625, abs=0.005)


@pytest.mark.skipif(
    not kernel_core.BACKEND_SPARSE_SPEEDUP,
    reason=f"{kernel_core.BACKEND_NAME} backend does not turn skipped weights into speed",
)
@pytest.mark.skipif(not full_suite_enabled(), reason=f"set {tuning.FULL_SUITE_ENV_VAR}=1 to run timing checks")
@pytest.mark.skipif((os.cpu_count() or 1) < tuning.PERF_MIN_CORES, reason=f"needs >= {tuning.PERF_MIN_CORES} cores")
def test_sparse_beats_dense_when_memory_bound() -> None:
    rng = np.random.default_rng(1)
    k, n = 4096, 14336
    w = to_bf16(rng.uniform(-1.0, 1.0, size=(k, n)).astype(np.float32))
    w[rng.random((k, n)) < tuning.PERF_SPARSITY] = 0
    x = to_bf16(rng.uniform(-1.0, 1.0, size=(1, k)).astype(np.float32))
    workers = os.cpu_count() or tuning.PERF_MIN_CORES
    plan = GemmPlan(1, n, k, workers)
    packed = pack_weights(w, TileLayout.tile("bf16"), plan.col_parts)
    tiles = reorder_dense(w)

    assert compressed_size_bytes(packed) < tuning.PERF_MAX_BYTES_RATIO * bytes_read_model((k, n, "bf16"))
    dense_ns = _median_ns(lambda: dense_gemm(x, tiles, plan))
    sparse_ns = _median_ns(lambda: sparse_gemm(x, packed, plan))
    assert dense_ns / sparse_ns >= tuning.PERF_MIN_SPEEDUP


def test_portable_backend_skips_the_timing_check() -> None:
    assert kernel_core.BACKEND_NAME == "portable"
    assert kernel_core.BACKEND_SPARSE_SPEEDUP is False
    marks = {m.kwargs.get("reason", "") for m in test_sparse_beats_dense_when_memory_bound.pytestmark}
    assert any("portable backend" in reason for reason in marks)
