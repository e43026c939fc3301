"""sparsetile package

CPU kernels and tooling for bitmap-compressed unstructured weight
sparsity: the packed format, dense/sparse tiled GEMM, an INT8 path,
sparse KV-cache attention, reference oracles and a bench CLI.  See
``README.md`` in the project root for an overview and quickstart.

The main entry points are re-exported here for convenience.
"""

from .dtypes import Dtype, bf16_to_f32, to_bf16  # noqa: F401
from .errors import SparseTileError  # noqa: F401
from .sparse_format import (  # noqa: F401
    PackedSparseTensor,
    TileLayout,
    compressed_size_bytes,
    load_packed,
    pack_weights,
    repartition,
    save_packed,
    unpack_weights,
)
from .kernel_core import GemmPlan, bytes_read_model, dense_gemm, sparse_gemm, vector_sparse_gemm  # noqa: F401
from .int8_path import QuantParams, choose_scales, int8_sparse_gemm, quantize  # noqa: F401
from .attention import SparseKVCache, append_token, magnitude_prune, pack_kv, sparse_attention  # noqa: F401
from .linear import DenseLinear, Int8SparseLinear, SparseLinear  # noqa: F401
from .config_service import ConfigService  # noqa: F401

__version__ = "0.1.0"

__all__ = [
    "Dtype",
    "to_bf16",
    "bf16_to_f32",
    "SparseTileError",
    "PackedSparseTensor",
    "TileLayout",
    "pack_weights",
    "unpack_weights",
    "repartition",
    "compressed_size_bytes",
    "save_packed",
    "load_packed",
    "GemmPlan",
    "dense_gemm",
    "sparse_gemm",
    "vector_sparse_gemm",
    "bytes_read_model",
    "QuantParams",
    "choose_scales",
    "quantize",
    "int8_sparse_gemm",
    "SparseKVCache",
    "magnitude_prune",
    "pack_kv",
    "append_token",
    "sparse_attention",
    "DenseLinear",
    "SparseLinear",
    "Int8SparseLinear",
    "ConfigService",
]
