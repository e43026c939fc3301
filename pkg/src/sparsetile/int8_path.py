"""Symmetric INT8 quantization and the INT8 dense/sparse GEMM wrappers.

Weights get one scale per output column, activations one scale per
tensor, zero points are always 0.  The integer core accumulates in INT32
(exact), and only the final two FP32 multiplies round.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import tuning
from .dtypes import Dtype
from .errors import QuantizationError, ShapeError
from .kernel_core import DenseTiles, GemmPlan, dense_gemm, reorder_dense, sparse_gemm
from .sparse_format import PackedSparseTensor


@dataclass(frozen=True)
class QuantParams:
    weight_scales: np.ndarray
    activation_scale: float = 1.0

    def __post_init__(self) -> None:
        scales = np.asarray(self.weight_scales, dtype=np.float32).reshape(-1)
        if scales.size == 0 or not np.all(np.isfinite(scales)) or np.any(scales <= 0):
            raise QuantizationError("weight scales must be finite and > 0")
        if not np.isfinite(self.activation_scale) or self.activation_scale <= 0:
            raise QuantizationError(f"activation scale must be finite and > 0, got {self.activation_scale}")
        scales.setflags(write=False)
        object.__setattr__(self, "weight_scales", scales)
        object.__setattr__(self, "activation_scale", float(np.float32(self.activation_scale)))

    @property
    def zero_point(self) -> int:
        return 0

    def with_activation(self, x: np.ndarray) -> "QuantParams":
        """Same weight scales, activation scale taken from ``x``."""
        return QuantParams(self.weight_scales, activation_scale(x))


def _check_finite(x: np.ndarray) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise QuantizationError("cannot quantize non-finite values")
    return arr


def quantize(x: np.ndarray, scale: Union[float, np.ndarray]) -> np.ndarray:
    """``clamp(round_half_away_from_zero(x / scale), -127, 127)`` as int8.

    ``scale`` may be a scalar or broadcast along the last axis (per column).
    """
    arr = _check_finite(x)
    s = np.asarray(scale, dtype=np.float64)
    if not np.all(np.isfinite(s)) or np.any(s <= 0):
        raise QuantizationError("scale must be finite and > 0")
    ratio = arr / s
    q = np.sign(ratio) * np.floor(np.abs(ratio) + 0.5)
    return np.clip(q, -tuning.INT8_QMAX, tuning.INT8_QMAX).astype(np.int8)


def dequantize(q: np.ndarray, scale: Union[float, np.ndarray]) -> np.ndarray:
    return (np.asarray(q, dtype=np.float32) * np.asarray(scale, dtype=np.float32)).astype(np.float32)


def activation_scale(x: np.ndarray) -> float:
    """Per-tensor scale ``max|x| / 127`` (1 for an all-zero tensor)."""
    peak = float(np.max(np.abs(_check_finite(x)))) if np.size(x) else 0.0
    return peak / tuning.INT8_QMAX if peak > 0 else 1.0


def choose_scales(w: np.ndarray, x: Optional[np.ndarray] = None) -> QuantParams:
    """Per-output-column weight scales ``max|W[:, n]| / 127``; zero columns get 1."""
    arr = _check_finite(w)
    if arr.ndim != 2:
        raise ShapeError(f"expected a K x N weight matrix, got shape {arr.shape}")
    peaks = np.max(np.abs(arr), axis=0)
    scales = np.where(peaks > 0, peaks / tuning.INT8_QMAX, 1.0)
    return QuantParams(scales.astype(np.float32), activation_scale(x) if x is not None else 1.0)


def quantize_weights(w: np.ndarray, params: QuantParams) -> np.ndarray:
    return quantize(w, params.weight_scales.astype(np.float64))


def _check_inner(inner: int) -> None:
    if inner > tuning.INT8_MAX_INNER:
        raise QuantizationError(
            f"K={inner} exceeds the INT32 accumulator bound {tuning.INT8_MAX_INNER} at |q| <= {tuning.INT8_QMAX}"
        )


def int8_accumulators(
    x_q: np.ndarray,
    weights: Union[PackedSparseTensor, DenseTiles, np.ndarray],
    plan: Optional[GemmPlan] = None,
) -> np.ndarray:
    """INT32 accumulators of ``x_q @ W_q`` (sparse or dense INT8 weights)."""
    if isinstance(weights, np.ndarray):
        is_int8 = weights.dtype == np.int8
        inner = weights.shape[0]
    else:
        is_int8 = weights.dtype is Dtype.INT8
        inner = weights.logical_rows
    if not is_int8:
        raise ShapeError("int8 kernels need INT8 weights")
    _check_inner(inner)
    if isinstance(weights, PackedSparseTensor):
        return sparse_gemm(x_q, weights, plan)
    return dense_gemm(x_q, weights, plan)


def dequantize_output(acc: np.ndarray, params: QuantParams) -> np.ndarray:
    """``f32(f32(acc) * a_scale) * w_scale[n]``."""
    a_scale = np.float32(params.activation_scale)
    if params.weight_scales.size != acc.shape[-1]:
        raise ShapeError(f"{params.weight_scales.size} weight scales for {acc.shape[-1]} output columns")
    return (acc.astype(np.float32) * a_scale) * params.weight_scales


def int8_sparse_gemm(
    x_q: np.ndarray,
    weights: PackedSparseTensor,
    params: QuantParams,
    plan: Optional[GemmPlan] = None,
) -> np.ndarray:
    """Sparse INT8 GEMM with INT32 accumulation, dequantized to FP32."""
    return dequantize_output(int8_accumulators(x_q, weights, plan), params)


def int8_dense_gemm(
    x_q: np.ndarray,
    weights: Union[DenseTiles, np.ndarray],
    params: QuantParams,
    plan: Optional[GemmPlan] = None,
) -> np.ndarray:
    """Dense INT8 baseline over the same tile walk."""
    tiles = weights if isinstance(weights, DenseTiles) else reorder_dense(np.asarray(weights))
    return dequantize_output(int8_accumulators(x_q, tiles, plan), params)
