"""Linear layers backed by the tile kernels.

Weights are given the way a model stores them, ``(out_features,
in_features)``; the kernels multiply by the transpose.  Pruning and
packing happen once in ``from_dense``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tuning
from .attention import magnitude_prune
from .dtypes import as_bf16
from .errors import ShapeError
from .int8_path import QuantParams, choose_scales, int8_sparse_gemm, quantize, quantize_weights
from .kernel_core import (
    DenseTiles,
    GemmPlan,
    bytes_read_model,
    dense_gemm,
    reorder_dense,
    sparse_gemm,
    vector_sparse_gemm,
)
from .sparse_format import PackedSparseTensor, TileLayout, pack_weights, repartition, usable_workers


def _check_weight(weight: np.ndarray) -> np.ndarray:
    arr = np.asarray(weight)
    if arr.ndim != 2:
        raise ShapeError(f"weight must be (out_features, in_features), got shape {arr.shape}")
    return arr


def _bias(bias: Optional[np.ndarray], out_features: int) -> Optional[np.ndarray]:
    if bias is None:
        return None
    b = np.asarray(bias, dtype=np.float32).reshape(-1)
    if b.size != out_features:
        raise ShapeError(f"bias has {b.size} entries for {out_features} outputs")
    return b


def _as_batch(x: np.ndarray) -> "tuple[np.ndarray, bool]":
    arr = np.asarray(x)
    return (arr[None], True) if arr.ndim == 1 else (arr, False)


def _finish(out: np.ndarray, bias: Optional[np.ndarray], squeeze: bool) -> np.ndarray:
    if bias is not None:
        out = out + bias
    return out[0] if squeeze else out


@dataclass
class DenseLinear:
    tiles: DenseTiles
    bias: Optional[np.ndarray] = None
    workers: int = 1

    @classmethod
    def from_dense(cls, weight: np.ndarray, bias: Optional[np.ndarray] = None, workers: int = 1) -> "DenseLinear":
        w = _check_weight(weight)
        return cls(reorder_dense(as_bf16(w).T), _bias(bias, w.shape[0]), workers)

    @property
    def in_features(self) -> int:
        return self.tiles.logical_rows

    @property
    def out_features(self) -> int:
        return self.tiles.logical_cols

    @property
    def weight_bytes(self) -> int:
        return bytes_read_model(self.tiles)

    def repartition(self, workers: int) -> "DenseLinear":
        return DenseLinear(self.tiles, self.bias, workers)

    def forward(self, x: np.ndarray) -> np.ndarray:
        batch, squeeze = _as_batch(x)
        plan = GemmPlan(batch.shape[0], self.out_features, self.in_features, self.workers)
        return _finish(dense_gemm(batch, self.tiles, plan), self.bias, squeeze)

    __call__ = forward


@dataclass
class SparseLinear:
    weights: PackedSparseTensor
    bias: Optional[np.ndarray] = None
    num_neuron_groups: int = tuning.NUM_NEURON_GROUPS_DEFAULT

    @classmethod
    def from_dense(
        cls,
        weight: np.ndarray,
        sparsity: float = 0.0,
        workers: int = 1,
        bias: Optional[np.ndarray] = None,
        vector_path: bool = False,
    ) -> "SparseLinear":
        w = _check_weight(weight)
        layout = TileLayout.vector() if vector_path else TileLayout.tile("bf16")
        pruned = magnitude_prune(as_bf16(w), sparsity)
        packed = pack_weights(pruned.T, layout, usable_workers(workers, w.shape[0]))
        return cls(packed, _bias(bias, w.shape[0]))

    @property
    def in_features(self) -> int:
        return self.weights.logical_rows

    @property
    def out_features(self) -> int:
        return self.weights.logical_cols

    @property
    def weight_bytes(self) -> int:
        return bytes_read_model(self.weights)

    def repartition(self, workers: int) -> "SparseLinear":
        packed = repartition(self.weights, usable_workers(workers, self.out_features))
        return SparseLinear(packed, self.bias, self.num_neuron_groups)

    def forward(self, x: np.ndarray) -> np.ndarray:
        batch, squeeze = _as_batch(x)
        if self.weights.layout.is_vector:
            out = vector_sparse_gemm(batch, self.weights, self.num_neuron_groups)
        else:
            out = sparse_gemm(batch, self.weights)
        return _finish(out, self.bias, squeeze)

    __call__ = forward


@dataclass
class Int8SparseLinear:
    weights: PackedSparseTensor
    params: QuantParams
    bias: Optional[np.ndarray] = None

    @classmethod
    def from_dense(
        cls,
        weight: np.ndarray,
        sparsity: float = 0.0,
        workers: int = 1,
        bias: Optional[np.ndarray] = None,
    ) -> "Int8SparseLinear":
        w = _check_weight(weight).astype(np.float64)
        wt = magnitude_prune(w.T, sparsity)
        params = choose_scales(wt)
        q = quantize_weights(wt, params)
        packed = pack_weights(q, TileLayout.tile("int8"), usable_workers(workers, w.shape[0]))
        return cls(packed, params, _bias(bias, w.shape[0]))

    @property
    def in_features(self) -> int:
        return self.weights.logical_rows

    @property
    def out_features(self) -> int:
        return self.weights.logical_cols

    @property
    def weight_bytes(self) -> int:
        return bytes_read_model(self.weights)

    def repartition(self, workers: int) -> "Int8SparseLinear":
        packed = repartition(self.weights, usable_workers(workers, self.out_features))
        return Int8SparseLinear(packed, self.params, self.bias)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Quantizes ``x`` per call with its own activation scale."""
        batch, squeeze = _as_batch(x)
        params = self.params.with_activation(batch)
        x_q = quantize(batch, params.activation_scale)
        return _finish(int8_sparse_gemm(x_q, self.weights, params), self.bias, squeeze)

    __call__ = forward