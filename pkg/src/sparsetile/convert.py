"""Offline conversion: raw-dense tensors to pruned, packed ``.spx`` files.

Raw-dense format (``.rdn``), little-endian::

    "RDN1" | u8 dtype (0 = BF16 bits, 1 = INT8, 2 = FP32) | u32 rows | u32 cols
    | rows * cols elements, row-major
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple, Union

import numpy as np

from .attention import magnitude_prune
from .dtypes import Dtype, as_bf16, bf16_to_f32, to_bf16
from .errors import FormatError
from .int8_path import QuantParams, choose_scales, quantize_weights
from .kernel_core import bytes_read_model
from .sparse_format import (
    PackedSparseTensor,
    TileLayout,
    compressed_size_bytes,
    pack_weights,
    save_packed,
    usable_workers,
)

RDN_MAGIC = b"RDN1"
_RDN_HEADER = struct.Struct("<4sBII")
_RDN_CODES = {0: "<u2", 1: "i1", 2: "<f4"}
RDN_DTYPES = {"bf16": 0, "int8": 1, "fp32": 2}


def _rdn_code(arr: np.ndarray) -> int:
    if arr.dtype == np.uint16:
        return 0
    if arr.dtype == np.int8:
        return 1
    if arr.dtype == np.float32:
        return 2
    raise FormatError(f"raw-dense files hold bf16 bits, int8 or fp32, not {arr.dtype}")


def write_raw_dense(path: Union[str, Path], array: np.ndarray) -> int:
    """Write a 2-D uint16 (BF16 bits), int8 or float32 matrix; returns bytes written."""
    arr = np.asarray(array)
    if arr.ndim != 2:
        raise FormatError(f"raw-dense files hold 2-D matrices, got shape {arr.shape}")
    code = _rdn_code(arr)
    payload = _RDN_HEADER.pack(RDN_MAGIC, code, arr.shape[0], arr.shape[1])
    payload += np.ascontiguousarray(arr).astype(_RDN_CODES[code]).tobytes()
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(payload)
    return len(payload)


def read_raw_dense(path: Union[str, Path]) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _RDN_HEADER.size:
        raise FormatError(f"malformed raw-dense input {path}: truncation in header")
    magic, code, rows, cols = _RDN_HEADER.unpack_from(data)
    if magic != RDN_MAGIC:
        raise FormatError(f"malformed raw-dense input {path}: bad magic {magic!r}")
    if code not in _RDN_CODES:
        raise FormatError(f"malformed raw-dense input {path}: unknown dtype code {code}")
    wire = np.dtype(_RDN_CODES[code])
    body = data[_RDN_HEADER.size :]
    expected = rows * cols * wire.itemsize
    if len(body) != expected:
        raise FormatError(
            f"malformed raw-dense input {path}: truncation, expected {expected} data bytes, found {len(body)}"
        )
    return np.frombuffer(body, dtype=wire).reshape(rows, cols).astype(wire.newbyteorder("="))


def make_dense(rows: int, cols: int, dtype: str = "bf16", seed: int = 0) -> np.ndarray:
    """Seeded random matrix: uniform [-1, 1] for float types, [-127, 127] for int8."""
    rng = np.random.default_rng(seed)
    if dtype == "int8":
        return rng.integers(-127, 128, size=(rows, cols), dtype=np.int8)
    values = rng.uniform(-1.0, 1.0, size=(rows, cols)).astype(np.float32)
    if dtype == "bf16":
        return to_bf16(values)
    if dtype == "fp32":
        return values
    raise ValueError(f"Unknown raw-dense dtype '{dtype}' (expected one of: {', '.join(RDN_DTYPES)})")


@dataclass
class ConvertResult:
    output: str
    rows: int
    cols: int
    dtype: str
    sparsity: float
    workers: int
    nnz: int
    compressed_bytes: int
    dense_bytes: int
    quantized: bool

    @property
    def ratio(self) -> float:
        return self.compressed_bytes / self.dense_bytes

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["ratio"] = self.ratio
        return data


def prune_and_pack(
    dense: np.ndarray,
    sparsity: float,
    dtype: Union[str, Dtype] = Dtype.BF16,
    workers: int = 1,
    vector_path: bool = False,
) -> Tuple[PackedSparseTensor, Optional[QuantParams]]:
    """Prune then pack; returns ``(tensor, quant_params_or_None)``."""
    target = Dtype.parse(dtype)
    arr = np.asarray(dense)
    if target is Dtype.BF16:
        layout = TileLayout.vector() if vector_path else TileLayout.tile(target)
        pruned = magnitude_prune(as_bf16(arr), sparsity)
        return pack_weights(pruned, layout, workers), None
    if vector_path:
        raise ValueError("the vector path is BF16 only")
    if arr.dtype == np.int8:
        pruned = magnitude_prune(arr, sparsity)
        return pack_weights(pruned, TileLayout.tile(target), workers), None
    floats = bf16_to_f32(arr) if arr.dtype == np.uint16 else arr.astype(np.float64)
    pruned = magnitude_prune(floats, sparsity)
    params: QuantParams = choose_scales(pruned)
    return pack_weights(quantize_weights(pruned, params), TileLayout.tile(target), workers), params


def convert(
    input_path: Union[str, Path],
    output_path: Union[str, Path],
    sparsity: float,
    dtype: Union[str, Dtype] = Dtype.BF16,
    workers: int = 1,
    vector_path: bool = False,
    log_callback: Optional[Callable[[str], None]] = None,
    log_to_console: bool = True,
    clamp_workers: bool = False,
) -> ConvertResult:
    """Read a raw-dense matrix, prune it, pack it and write a ``.spx`` file.

    A float source converted to INT8 is quantized per output column and the
    scales are stored in the file's quantization trailer.  With
    ``clamp_workers`` the worker count is capped at the matrix's column
    blocks instead of raising ``over-partitioned``.
    """

    def _emit_log(msg: str) -> None:
        if log_to_console:
            print(msg)
        if log_callback is not None:
            try:
                log_callback(msg)
            except Exception:
                pass

    dense = read_raw_dense(input_path)
    if clamp_workers:
        workers = usable_workers(workers, dense.shape[1])
    tensor, params = prune_and_pack(dense, sparsity, dtype, workers, vector_path)
    save_packed(tensor, output_path, params)
    target = Dtype.parse(dtype)
    result = ConvertResult(
        output=str(output_path),
        rows=tensor.logical_rows,
        cols=tensor.logical_cols,
        dtype=target.value,
        sparsity=sparsity,
        workers=workers,
        nnz=tensor.nnz,
        compressed_bytes=compressed_size_bytes(tensor),
        dense_bytes=bytes_read_model((tensor.logical_rows, tensor.logical_cols, target)),
        quantized=params is not None,
    )
    _emit_log(
        f"convert file={result.output} shape={result.rows}x{result.cols} dtype={result.dtype} "
        f"sparsity={sparsity} workers={result.workers} nnz={result.nnz} ratio={result.ratio:.4f}"
    )
    return result
