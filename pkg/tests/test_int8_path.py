from __future__ import annotations

import numpy as np
import pytest

from sparsetile import tuning
from sparsetile.errors import QuantizationError, ShapeError
from sparsetile.int8_path import (
    QuantParams,
    activation_scale,
    choose_scales,
    dequantize,
    dequantize_output,
    int8_accumulators,
    int8_dense_gemm,
    int8_sparse_gemm,
    quantize,
    quantize_weights,
)
from sparsetile.kernel_core import reorder_dense
from sparsetile.reference_oracle import integer_gemm
from sparsetile.sparse_format import TileLayout, pack_weights, unpack_weights
from sparsetile.attention import magnitude_prune


def test_quantize_basic_values() -> None:
    assert quantize(np.array([0.0]), 0.37).tolist() == [0]
    assert quantize(np.array([0.25, -0.25]), 0.25).tolist() == [1, -1]


def test_quantize_rounds_half_away_from_zero_and_clamps() -> None:
    x = np.array([0.5, -0.5, 1.5, -1.5, 2.49, 1000.0, -1000.0])
    assert quantize(x, 1.0).tolist() == [1, -1, 2, -2, 2, 127, -127]
    assert quantize(x, 1.0).dtype == np.int8


def test_quantize_round_trip_within_half_a_step() -> None:
    rng = np.random.default_rng(0)
    x = rng.uniform(-3.0, 3.0, size=5000)
    scale = activation_scale(x)
    err = np.abs(dequantize(quantize(x, scale), scale).astype(np.float64) - x)
    assert float(err.max()) <= scale / 2 + 1e-6


def test_quantize_rejects_non_finite_and_bad_scales() -> None:
    with pytest.raises(QuantizationError):
        quantize(np.array([1.0, np.nan]), 1.0)
    with pytest.raises(QuantizationError):
        quantize(np.array([np.inf]), 1.0)
    with pytest.raises(QuantizationError):
        quantize(np.array([1.0]), 0.0)


def test_choose_scales_per_output_column() -> None:
    w = np.array([[127.0, 0.0, -2.0], [-50.0, 0.0, 1.0]])
    params = choose_scales(w)
    assert params.weight_scales.tolist() == pytest.approx([1.0, 1.0, 2.0 / 127])
    q = quantize_weights(w, params)
    assert q[:, 1].tolist() == [0, 0]
    assert q[0, 0] == 127
    assert q[0, 2] == -127
    assert params.zero_point == 0


def test_largest_magnitude_per_column_maps_to_full_scale() -> None:
    rng = np.random.default_rng(1)
    w = rng.normal(size=(40, 12))
    q = quantize_weights(w, choose_scales(w))
    rows = np.argmax(np.abs(w), axis=0)
    assert np.all(np.abs(q[rows, np.arange(12)]) == 127)


def test_activation_scale_of_zero_tensor_is_one() -> None:
    assert activation_scale(np.zeros(8)) == 1.0
    assert choose_scales(np.ones((2, 2)), np.full((1, 2), 254.0)).activation_scale == 2.0


def test_quant_params_validation() -> None:
    with pytest.raises(QuantizationError):
        QuantParams(np.array([1.0, 0.0]))
    with pytest.raises(QuantizationError):
        QuantParams(np.array([1.0]), activation_scale=-1.0)
    params = QuantParams(np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        params.weight_scales[0] = 5.0


def test_identity_weights_with_unit_scales() -> None:
    x = np.arange(-64, 64, dtype=np.int8).reshape(2, 64)
    eye = np.eye(64, dtype=np.int8)
    params = QuantParams(np.ones(64, dtype=np.float32), 1.0)
    out = int8_sparse_gemm(x, pack_weights(eye, TileLayout.tile("int8")), params)
    assert out.dtype == np.float32
    assert np.array_equal(out, x.astype(np.float32))


@pytest.mark.parametrize("sparsity", [0.0, 0.5, 0.9])
def test_sparse_accumulators_equal_dense_and_integer_oracle(sparsity: float) -> None:
    rng = np.random.default_rng(7)
    x = rng.integers(-127, 128, size=(3, 200), dtype=np.int8)
    w = magnitude_prune(rng.integers(-127, 128, size=(200, 90), dtype=np.int8), sparsity)
    packed = pack_weights(w, TileLayout.tile("int8"), num_workers=3)
    sparse = int8_accumulators(x, packed)
    dense = int8_accumulators(x, reorder_dense(unpack_weights(packed)))
    assert sparse.dtype == np.int32
    assert np.array_equal(sparse, dense)
    assert np.array_equal(sparse.astype(np.int64), integer_gemm(x, w))


def test_dequantized_output_is_two_fp32_multiplies() -> None:
    rng = np.random.default_rng(8)
    w = rng.uniform(-1.0, 1.0, size=(128, 48))
    x = rng.uniform(-1.0, 1.0, size=(2, 128))
    params = choose_scales(w, x)
    w_q = quantize_weights(w, params)
    x_q = quantize(x, params.activation_scale)
    acc = integer_gemm(x_q, w_q)
    expected = (acc.astype(np.float32) * np.float32(params.activation_scale)) * params.weight_scales
    sparse = int8_sparse_gemm(x_q, pack_weights(w_q, TileLayout.tile("int8")), params)
    dense = int8_dense_gemm(x_q, w_q, params)
    assert np.array_equal(sparse, expected)
    assert np.array_equal(dense, expected)
    assert np.array_equal(dequantize_output(acc.astype(np.int32), params), expected)


def test_quantized_gemm_tracks_float_product() -> None:
    rng = np.random.default_rng(9)
    w = rng.uniform(-1.0, 1.0, size=(256, 64))
    x = rng.uniform(-1.0, 1.0, size=(1, 256))
    params = choose_scales(w, x)
    out = int8_dense_gemm(quantize(x, params.activation_scale), quantize_weights(w, params), params)
    ref = x @ w
    assert float(np.max(np.abs(out - ref))) < 0.05 * float(np.max(np.abs(ref)))


def test_inner_dimension_bound() -> None:
    assert tuning.INT8_MAX_INNER == 133_144
    assert tuning.INT8_MAX_INNER * 127 * 127 <= 2**31 - 1
    wide = np.zeros((tuning.INT8_MAX_INNER + 1, 1), dtype=np.int8)
    with pytest.raises(QuantizationError, match="accumulator bound"):
        int8_accumulators(np.zeros((1, wide.shape[0]), dtype=np.int8), wide)


def test_largest_inner_dimension_accumulates_exactly() -> None:
    k = tuning.INT8_MAX_INNER
    x = np.full((1, k), -127, dtype=np.int8)
    w = np.full((k, 1), -127, dtype=np.int8)
    expected = k * 127 * 127
    assert expected <= np.iinfo(np.int32).max
    assert int(int8_accumulators(x, pack_weights(w, TileLayout.tile("int8")))[0, 0]) == expected
    assert int(int8_accumulators(x, w)[0, 0]) == expected


def test_minus_128_is_rejected_everywhere() -> None:
    w = np.full((64, 32), -128, dtype=np.int8)
    with pytest.raises(QuantizationError, match="-128"):
        pack_weights(w, TileLayout.tile("int8"))
    with pytest.raises(QuantizationError, match="-128"):
        int8_accumulators(np.ones((1, 64), dtype=np.int8), w)
    ones = pack_weights(np.ones((64, 32), dtype=np.int8), TileLayout.tile("int8"))
    with pytest.raises(QuantizationError, match="-128"):
        int8_accumulators(np.full((1, 64), -128, dtype=np.int8), ones)


def test_int8_kernels_reject_bf16_weights() -> None:
    with pytest.raises(ShapeError):
        int8_accumulators(np.zeros((1, 32), dtype=np.int8), np.zeros((32, 32), dtype=np.uint16))


def test_scale_count_must_match_outputs() -> None:
    with pytest.raises(ShapeError):
        dequantize_output(np.zeros((1, 4), dtype=np.int32), QuantParams(np.ones(3)))
