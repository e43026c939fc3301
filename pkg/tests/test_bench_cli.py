from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List

import numpy as np
import pytest

from sparsetile import bench, int8_path, tuning
from sparsetile.bench import (
    CSV_COLUMNS,
    TIMING_COLUMNS,
    BenchConfig,
    BenchPoint,
    BenchResult,
    catalog_shapes,
    output_checksum,
    read_csv,
    run_bench,
    run_point,
    write_csv,
)
from sparsetile.cli import main
from sparsetile.convert import convert, make_dense, read_raw_dense, write_raw_dense
from sparsetile.dtypes import bf16_to_f32
from sparsetile.errors import ConfigError, FormatError, ReportError, ValidationError
from sparsetile.report import find_baseline, layer_summary, render_markdown, report, with_speedups
from sparsetile.sparse_format import load_packed, load_packed_with_quant, unpack_weights

from conftest import full_suite_enabled


def _bench_quietly(configs, **kwargs) -> List[BenchResult]:
    return run_bench(configs, log_to_console=False, **kwargs)


def _stable(row: Dict) -> Dict:
    return {k: v for k, v in row.items() if k not in TIMING_COLUMNS}


# ----------------------------------------------------------------------
# Catalog and sweep config
# ----------------------------------------------------------------------
def test_catalog_shapes_and_scaling() -> None:
    full = catalog_shapes()
    assert [s["name"] for s in full] == ["q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj"]
    assert (full[5]["k"], full[5]["n"]) == (4096, 14336)
    scaled = catalog_shapes(64)
    assert (scaled[6]["k"], scaled[6]["n"]) == (224, 64)
    profile = catalog_shapes(include_profile=True)
    assert [(s["k"], s["layers"]) for s in profile[-2:]] == [(4096, 32), (4192, 32)]
    with pytest.raises(ConfigError):
        catalog_shapes(0)


def test_bench_config_validation() -> None:
    with pytest.raises(ConfigError, match="reps"):
        BenchConfig(kernel="sparse", reps=2)
    with pytest.raises(ConfigError, match="warmup"):
        BenchConfig(kernel="sparse", warmup=0)
    with pytest.raises(ConfigError, match="Unknown kernel"):
        BenchConfig(kernel="fused")
    with pytest.raises(ConfigError):
        BenchConfig(kernel="sparse", sparsity=[1.5])
    with pytest.raises(ConfigError):
        BenchConfig(kernel="attention", heads=6, kv_heads=4)


def test_sweep_expands_to_the_cross_product() -> None:
    cfg = BenchConfig(
        kernel="sparse",
        shapes=[{"k": 64, "n": 32}, {"k": 128, "n": 16}],
        m=[1, 4],
        sparsity=[0.0, 0.5, 0.9],
        workers=[1, 2],
    )
    points = cfg.points()
    assert len(points) == 2 * 2 * 3 * 2
    assert points[0] == BenchPoint("sparse", m=1, k=64, n=32, sparsity=0.0, workers=1)
    attention = BenchConfig(kernel="attention", context=[16, 32], k_sparsity=[0.0, 0.5], v_sparsity=[0.5])
    assert len(attention.points()) == 4
    assert all(p.dtype == "bf16" for p in attention.points())
    assert BenchConfig(kernel="int8_sparse").dtype == "int8"


def test_sweep_file_round_trip(tmp_path: Path) -> None:
    path = tmp_path / "sweep.json"
    path.write_text(json.dumps({"kernel": "vector_sparse", "shapes": [{"k": 64, "n": 48}], "reps": 3}), encoding="utf-8")
    cfg = BenchConfig.from_file(path)
    assert cfg.kernel == "vector_sparse" and cfg.shapes == [{"k": 64, "n": 48}]
    path.write_text(json.dumps({"kernel": "sparse", "colour": "blue"}), encoding="utf-8")
    with pytest.raises(ConfigError, match="Invalid bench sweep"):
        BenchConfig.from_file(path)
    with pytest.raises(ConfigError, match="not found"):
        BenchConfig.from_file(tmp_path / "missing.json")


# ----------------------------------------------------------------------
# Bench runs
# ----------------------------------------------------------------------
def test_checksum_is_sha256_prefix() -> None:
    out = np.array([[1.0, -2.0]], dtype=np.float32)
    assert len(output_checksum(out)) == 16
    assert output_checksum(out) == output_checksum(out.astype(np.float64))
    assert output_checksum(out) != output_checksum(-out)


def test_dense_and_sparse_checksums_match_across_the_catalog() -> None:
    shapes = catalog_shapes(64)
    common = dict(shapes=shapes, sparsity=[0.5], workers=[2], reps=3, warmup=1, seed=11)
    results = _bench_quietly([BenchConfig(kernel="dense", **common), BenchConfig(kernel="sparse", **common)])
    assert len(results) == 2 * len(shapes)
    by_shape: Dict[tuple, Dict[str, str]] = {}
    for r in results:
        by_shape.setdefault((r.point.k, r.point.n), {})[r.point.kernel] = r.checksum
    for checksums in by_shape.values():
        assert checksums["dense"] == checksums["sparse"]
    sparse = [r for r in results if r.point.kernel == "sparse"]
    assert all(r.nnz == r.point.k * r.point.n // 2 for r in sparse)
    assert all(r.median_ns > 0 and r.min_ns <= r.median_ns for r in results)


def test_non_timing_columns_are_deterministic() -> None:
    cfg = BenchConfig(
        kernel="vector_sparse",
        shapes=[{"k": 96, "n": 80}],
        m=[1, 3],
        sparsity=[0.0, 0.7],
        workers=[1, 3],
        reps=3,
        warmup=1,
    )
    first = [_stable(r.to_row()) for r in _bench_quietly(cfg)]
    second = [_stable(r.to_row()) for r in _bench_quietly(cfg)]
    assert first == second
    assert set(first[0]) == set(CSV_COLUMNS) - set(TIMING_COLUMNS)


def test_modeled_bytes_fall_as_sparsity_rises() -> None:
    sizes = [
        run_point(BenchPoint("sparse", k=256, n=896, sparsity=s, workers=2), reps=3, warmup=1, seed=0).modeled_weight_bytes
        for s in (0.0, 0.5, 0.9)
    ]
    assert sizes[0] > sizes[1] > sizes[2]
    dense = run_point(BenchPoint("dense", k=256, n=896), reps=3, warmup=1, seed=0)
    assert dense.modeled_weight_bytes == dense.dense_weight_bytes == 256 * 896 * 2
    assert sizes[2] < 0.4 * dense.dense_weight_bytes


def test_int8_points_validate_against_the_integer_oracle() -> None:
    common = dict(shapes=[{"k": 128, "n": 48}], m=[2], sparsity=[0.5], workers=[2], reps=3, warmup=1)
    results = _bench_quietly([BenchConfig(kernel="int8_dense", **common), BenchConfig(kernel="int8_sparse", **common)])
    assert [r.point.dtype for r in results] == ["int8", "int8"]
    assert results[0].checksum == results[1].checksum
    assert results[0].dense_weight_bytes == 128 * 48
    assert results[1].modeled_weight_bytes < results[0].modeled_weight_bytes


def test_int8_input_uses_the_dequantization_scale(monkeypatch) -> None:
    scales: List[float] = []

    def recording_quantize(x, scale):
        scales.append(scale)
        return int8_path.quantize(x, scale)

    monkeypatch.setattr(bench, "quantize", recording_quantize)
    for kernel in ("int8_dense", "int8_sparse"):
        prepared = bench.prepare_point(BenchPoint(kernel, m=2, k=128, n=48, sparsity=0.5, workers=1), seed=3)
        prepared.validate(prepared.run())
    assert len(scales) == 2
    assert all(s == float(np.float32(s)) for s in scales)


def test_attention_bench_points() -> None:
    cfg = BenchConfig(
        kernel="attention",
        context=[64],
        heads=4,
        kv_heads=2,
        head_dim=32,
        k_sparsity=[0.0, 0.5],
        v_sparsity=[0.0, 0.5],
        workers=[2],
        reps=3,
        warmup=1,
    )
    results = _bench_quietly(cfg)
    assert len(results) == 4
    assert all(r.throughput_unit == "tokens/s" for r in results)
    unpruned = results[0]
    assert unpruned.nnz == 2 * 2 * 64 * 32
    assert results[-1].modeled_weight_bytes < unpruned.modeled_weight_bytes


def test_bench_logs_and_reports_progress() -> None:
    lines: List[str] = []
    events: List[Dict] = []
    cfg = BenchConfig(kernel="sparse", shapes=[{"k": 64, "n": 32}], sparsity=[0.0, 0.5], reps=3, warmup=1)
    _bench_quietly(cfg, log_callback=lines.append, progress_callback=events.append)
    assert lines[0].startswith("bench point=1/2 kernel=sparse m=1 k=64 n=32")
    assert "checksum=" in lines[1]
    assert [e["event"] for e in events] == ["start", "progress", "progress", "done"]
    assert events[-1]["points_done"] == 2


def test_validation_failure_reports_no_timing(monkeypatch) -> None:
    def broken(x, packed, plan=None):
        return np.ones((x.shape[0], packed.logical_cols), dtype=np.float32)

    monkeypatch.setattr(bench, "sparse_gemm", broken)
    lines: List[str] = []
    cfg = BenchConfig(kernel="sparse", shapes=[{"k": 64, "n": 32}], reps=3, warmup=1)
    with pytest.raises(ValidationError, match="bit-identical"):
        _bench_quietly(cfg, log_callback=lines.append)
    assert "status=invalid" in lines[-1]


@pytest.mark.skipif(not full_suite_enabled(), reason=f"set {tuning.FULL_SUITE_ENV_VAR}=1 for full-size shapes")
def test_full_catalog_checksums_match() -> None:
    common = dict(shapes=catalog_shapes(), sparsity=[0.5], workers=[8], reps=3, warmup=1)
    results = _bench_quietly([BenchConfig(kernel="dense", **common), BenchConfig(kernel="sparse", **common)])
    half = len(results) // 2
    for dense, sparse in zip(results[:half], results[half:]):
        assert dense.checksum == sparse.checksum


# ----------------------------------------------------------------------
# CSV and report
# ----------------------------------------------------------------------
def _result(kernel: str, median_ns: int, sparsity: float = 0.5, **point) -> BenchResult:
    bp = BenchPoint(kernel, m=1, k=64, n=32, sparsity=sparsity, **point)
    dense_bytes = 64 * 32 * 2
    modeled = dense_bytes if kernel == "dense" else dense_bytes // 2
    return BenchResult(bp, 3, 1, 0, 1024, modeled, dense_bytes, "0" * 16, median_ns, median_ns - 10, 1.0, "GFLOP/s")


def test_csv_round_trip_keeps_types(tmp_path: Path) -> None:
    path = write_csv([_result("dense", 1000), _result("sparse", 500)], tmp_path / "out" / "bench.csv")
    header = path.read_text(encoding="utf-8").splitlines()[0]
    assert header == ",".join(CSV_COLUMNS)
    rows = read_csv(path)
    assert rows[1]["kernel"] == "sparse"
    assert rows[1]["median_ns"] == 500 and rows[1]["sparsity"] == 0.5
    assert rows[1]["checksum"] == "0" * 16


def test_single_dense_row_has_unit_speedup() -> None:
    rows = [_result("dense", 1000).to_row()]
    rows = [{**r, "median_ns": int(r["median_ns"]), "throughput": float(r["throughput"])} for r in rows]
    assert with_speedups(rows)[0]["speedup"] == 1.0


def test_speedups_match_hand_calculation(tmp_path: Path) -> None:
    csv_path = write_csv(
        [_result("dense", 1000), _result("sparse", 500), _result("vector_sparse", 800)],
        tmp_path / "bench.csv",
    )
    rows = read_csv(csv_path)
    assert [r["speedup"] for r in with_speedups(rows)] == [1.0, 2.0, 1.25]
    text = report(csv_path, out_path=tmp_path / "report.md")
    assert "## sparse" in text and "2.00x" in text and "1.25x" in text
    assert "| sparse | 1x64x32 | 0.5 | 0.00 | 0.00 | 0.5000 |" in text
    assert (tmp_path / "report.md").read_text(encoding="utf-8").startswith("# sparsetile bench report: bench.csv")


def test_baseline_prefers_the_same_sparsity() -> None:
    rows = [
        {**_result("dense", 900, sparsity=0.0).to_row(), "median_ns": 900},
        {**_result("dense", 1000, sparsity=0.5).to_row(), "median_ns": 1000},
        {**_result("sparse", 500, sparsity=0.5).to_row(), "median_ns": 500},
        {**_result("sparse", 450, sparsity=0.9).to_row(), "median_ns": 450},
    ]
    assert find_baseline(rows[2], rows)["median_ns"] == 1000
    # no dense row at 0.9: any dense row of the shape serves
    assert find_baseline(rows[3], rows)["median_ns"] == 900


def test_missing_baseline_is_an_error(tmp_path: Path) -> None:
    csv_path = write_csv([_result("sparse", 500)], tmp_path / "bench.csv")
    with pytest.raises(ReportError, match="missing baseline"):
        report(csv_path)


def test_malformed_csv_is_rejected(tmp_path: Path) -> None:
    bad = tmp_path / "bad.csv"
    bad.write_text("kernel,median_ns\nsparse,10\n", encoding="utf-8")
    with pytest.raises(ReportError, match="unexpected CSV header"):
        read_csv(bad)
    good = write_csv([_result("dense", 1000)], tmp_path / "good.csv")
    lines = good.read_text(encoding="utf-8").splitlines()
    lines[1] = lines[1].replace(",1000,", ",fast,", 1)
    good.write_text("\n".join(lines) + "\n", encoding="utf-8")
    with pytest.raises(ReportError, match="malformed row"):
        read_csv(good)


def test_layer_summary_sums_each_shape_once() -> None:
    rows = []
    for k, n, median in ((64, 32, 100), (128, 32, 300)):
        row = _result("sparse", median).to_row()
        row.update(k=k, n=n, median_ns=median)
        rows.append(row)
    rows.append(dict(rows[0]))
    summary = layer_summary(rows)
    assert len(summary) == 1
    assert summary[0]["shapes"] == 2
    assert summary[0]["median_ns"] == 400


def test_markdown_includes_attention_tables() -> None:
    rows = []
    for ks, median in ((0.0, 2000), (0.5, 1600)):
        row = BenchResult(
            BenchPoint("attention", heads=4, kv_heads=2, head_dim=32, context=64, k_sparsity=ks, v_sparsity=ks),
            3, 1, 0, 100, 100, 200, "f" * 16, median, median, 1e9 / median, "tokens/s",
        ).to_row()
        row.update(median_ns=median, throughput=float(row["throughput"]))
        rows.append(row)
    text = render_markdown(rows)
    assert "## attention" in text
    assert "h4/kv2/d32/ctx64" in text
    assert "1.25x" in text


# ----------------------------------------------------------------------
# Conversion
# ----------------------------------------------------------------------
def test_raw_dense_round_trip_and_errors(tmp_path: Path) -> None:
    matrix = make_dense(5, 7, "bf16", seed=3)
    path = tmp_path / "w.rdn"
    assert write_raw_dense(path, matrix) == 13 + 5 * 7 * 2
    assert np.array_equal(read_raw_dense(path), matrix)
    data = path.read_bytes()
    path.write_bytes(data[:-1])
    with pytest.raises(FormatError, match="malformed raw-dense input"):
        read_raw_dense(path)
    path.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError, match="bad magic"):
        read_raw_dense(path)
    with pytest.raises(FormatError):
        write_raw_dense(path, np.zeros((2, 2), dtype=np.float64))


@pytest.mark.parametrize("sparsity, ratio", [(0.5, 0.5625), (0.0, 1.0625)])
def test_convert_reports_the_compression_ratio(tmp_path: Path, sparsity: float, ratio: float) -> None:
    src = tmp_path / "w.rdn"
    write_raw_dense(src, make_dense(512, 512, "bf16", seed=1))
    result = convert(src, tmp_path / "w.spx", sparsity, log_to_console=False)
    assert result.ratio == pytest.approx(ratio, abs=1e-4)
    assert result.nnz == 512 * 512 - int(512 * 512 * sparsity)
    packed = load_packed(tmp_path / "w.spx")
    assert packed.nnz == result.nnz


def test_convert_is_idempotent_on_pruned_input(tmp_path: Path) -> None:
    src = tmp_path / "w.rdn"
    write_raw_dense(src, make_dense(96, 80, "bf16", seed=2))
    convert(src, tmp_path / "first.spx", 0.5, workers=2, log_to_console=False)
    write_raw_dense(tmp_path / "pruned.rdn", unpack_weights(load_packed(tmp_path / "first.spx")))
    convert(tmp_path / "pruned.rdn", tmp_path / "second.spx", 0.5, workers=2, log_to_console=False)
    assert (tmp_path / "first.spx").read_bytes() == (tmp_path / "second.spx").read_bytes()


def test_float_source_converts_to_quantized_int8(tmp_path: Path) -> None:
    src = tmp_path / "w.rdn"
    dense = make_dense(128, 40, "fp32", seed=4)
    write_raw_dense(src, dense)
    result = convert(src, tmp_path / "w.spx", 0.5, dtype="int8", log_to_console=False)
    assert result.quantized and result.dtype == "int8"
    packed, params = load_packed_with_quant(tmp_path / "w.spx")
    assert params is not None and params.weight_scales.shape == (40,)
    restored = unpack_weights(packed).astype(np.float32) * params.weight_scales
    kept = restored != 0
    assert np.allclose(restored[kept], dense[kept], atol=float(params.weight_scales.max()))


# ----------------------------------------------------------------------
# Command line
# ----------------------------------------------------------------------
def test_cli_make_dense_convert_and_report(tmp_path: Path, isolated_config: Path, monkeypatch, capsys) -> None:
    monkeypatch.chdir(tmp_path)
    rdn, spx = tmp_path / "w.rdn", tmp_path / "w.spx"
    assert main(["make-dense", str(rdn), "--rows", "256", "--cols", "256", "--seed", "5"]) == 0
    assert bf16_to_f32(read_raw_dense(rdn)).shape == (256, 256)
    log = tmp_path / "logs" / "run.log"
    assert main(["convert", str(rdn), str(spx), "--sparsity", "0.5", "--workers", "1", "--log-file", str(log)]) == 0
    out = capsys.readouterr().out
    assert "ratio=0.5625" in out
    assert "ratio=0.5625" in log.read_text(encoding="utf-8")

    csv_path = tmp_path / "bench.csv"
    argv = ["bench", "--kernel", "dense", "sparse", "--catalog", "--catalog-scale", "64",
            "--workers", "1", "2", "--reps", "3", "--warmup", "1", "--out", str(csv_path), "--quiet"]
    assert main(argv) == 0
    assert capsys.readouterr().out == ""
    rows = read_csv(csv_path)
    assert len(rows) == 2 * 7 * 2
    md = tmp_path / "report.md"
    assert main(["report", str(csv_path), "--out", str(md)]) == 0
    assert "## sparse" in md.read_text(encoding="utf-8")


def test_cli_bench_uses_thread_env_and_int8_mapping(tmp_path: Path, isolated_config: Path, monkeypatch) -> None:
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv(tuning.THREADS_ENV_VAR, "3")
    csv_path = tmp_path / "bench.csv"
    argv = ["bench", "--kernel", "sparse", "--dtype", "int8", "--k", "128", "--n", "64",
            "--reps", "3", "--warmup", "1", "--out", str(csv_path), "-q"]
    assert main(argv) == 0
    rows = read_csv(csv_path)
    assert [(r["kernel"], r["workers"], r["dtype"]) for r in rows] == [("int8_sparse", 3, "int8")]


def test_cli_bench_from_sweep_file(tmp_path: Path, isolated_config: Path, monkeypatch) -> None:
    monkeypatch.chdir(tmp_path)
    sweep = tmp_path / "sweep.json"
    sweep.write_text(
        json.dumps({"kernel": "attention", "context": [32], "heads": 4, "kv_heads": 2, "head_dim": 32,
                    "k_sparsity": [0.0], "v_sparsity": [0.0, 0.5], "reps": 3, "warmup": 1}),
        encoding="utf-8",
    )
    csv_path = tmp_path / "attn.csv"
    assert main(["bench", "--sweep", str(sweep), "--out", str(csv_path), "-q"]) == 0
    rows = read_csv(csv_path)
    assert [r["v_sparsity"] for r in rows] == [0.0, 0.5]
    assert "## attention" in report(csv_path)


def test_cli_attention_shape_follows_tuned_defaults(tmp_path: Path, isolated_config: Path, monkeypatch) -> None:
    monkeypatch.chdir(tmp_path)
    monkeypatch.setattr(tuning, "ATTENTION_SHAPE_DEFAULT", dict(tuning.ATTENTION_SHAPE_DEFAULT))
    isolated_config.mkdir(parents=True)
    shape = {"heads": 4, "kv_heads": 2, "head_dim": 32, "context": 32}
    (isolated_config / "sparsetile.json").write_text(
        json.dumps({"tuning": {"ATTENTION_SHAPE_DEFAULT": shape}}), encoding="utf-8"
    )
    csv_path = tmp_path / "attn.csv"
    argv = ["bench", "--kernel", "attention", "--workers", "1", "--reps", "3", "--warmup", "1",
            "--out", str(csv_path), "-q"]
    assert main(argv) == 0
    row = read_csv(csv_path)[0]
    assert (row["heads"], row["kv_heads"], row["head_dim"], row["context"]) == (4, 2, 32, 32)

    assert main([*argv[:-1], "--heads", "8", "-q"]) == 0
    assert read_csv(csv_path)[0]["heads"] == 8


def test_cli_convert_caps_default_workers_at_column_blocks(
    tmp_path: Path, isolated_config: Path, monkeypatch, capsys
) -> None:
    monkeypatch.chdir(tmp_path)
    monkeypatch.setattr("os.cpu_count", lambda: 64)
    rdn, spx = tmp_path / "w.rdn", tmp_path / "w.spx"
    assert main(["make-dense", str(rdn), "--rows", "256", "--cols", "256", "-q"]) == 0
    assert main(["convert", str(rdn), str(spx), "--sparsity", "0.5"]) == 0
    assert "workers=8" in capsys.readouterr().out
    assert load_packed(spx).num_workers == 8

    assert main(["convert", str(rdn), str(spx), "--sparsity", "0.5", "--workers", "64"]) == 1
    assert "over-partitioned: 64 workers for 8 column blocks" in capsys.readouterr().err


def test_cli_catalog(isolated_config: Path, capsys) -> None:
    assert main(["catalog", "--scale", "2", "--profile"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "q_proj: k=2048 n=2048"
    assert out[-1] == "up_proj_profile_4192: k=2096 n=7168 layers=32"


def test_cli_errors_exit_nonzero(tmp_path: Path, isolated_config: Path, monkeypatch, capsys) -> None:
    monkeypatch.chdir(tmp_path)
    garbage = tmp_path / "bad.rdn"
    garbage.write_bytes(b"not a matrix")
    assert main(["convert", str(garbage), str(tmp_path / "x.spx"), "--sparsity", "0.5"]) == 1
    assert "error: malformed raw-dense input" in capsys.readouterr().err
    assert main(["bench", "--k", "64", "--n", "32", "--reps", "2", "-q"]) == 1
    assert "reps must be >= 3" in capsys.readouterr().err
    assert main(["report", str(tmp_path / "missing.csv")]) == 1
    monkeypatch.setenv(tuning.THREADS_ENV_VAR, "zero")
    assert main(["bench", "--k", "64", "--n", "32", "-q"]) == 1
    assert tuning.THREADS_ENV_VAR in capsys.readouterr().err
