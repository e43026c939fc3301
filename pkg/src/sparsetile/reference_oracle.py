"""Brute-force reference implementations used to check the kernels.

Nothing here touches the tile layout: operands are logical row-major
matrices and the loops are the textbook ones.  Speed is not a concern.
"""

from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

import numpy as np

from .dtypes import bf16_to_f32
from .errors import DecompressError, ShapeError

_MASK32 = 0xFFFFFFFF


def _as_f64(x: np.ndarray) -> np.ndarray:
    arr = np.asarray(x)
    if arr.dtype == np.uint16:
        arr = bf16_to_f32(arr)
    return arr.astype(np.float64)


def _check_gemm(a: np.ndarray, b: np.ndarray) -> None:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"dimension mismatch: {a.shape} x {b.shape}")


def naive_gemm_f64(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``A @ B`` in FP64 as a sum of rank-1 updates over the inner index.

    uint16 operands are read as BF16 bit patterns.
    """
    fa, fb = _as_f64(a), _as_f64(b)
    _check_gemm(fa, fb)
    out = np.zeros((fa.shape[0], fb.shape[1]), dtype=np.float64)
    for k in range(fa.shape[1]):
        out += np.outer(fa[:, k], fb[k])
    return out


def gemm_error_bound(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``|A| @ |B|`` in FP64, the scale used by :func:`max_normalized_error`."""
    return naive_gemm_f64(np.abs(_as_f64(a)), np.abs(_as_f64(b)))


def max_normalized_error(out: np.ndarray, ref: np.ndarray, scale: np.ndarray) -> float:
    """Largest ``|out - ref| / scale``; elements with zero scale count absolutely."""
    diff = np.abs(np.asarray(out, dtype=np.float64) - np.asarray(ref, dtype=np.float64))
    denom = np.where(scale > 0, scale, 1.0)
    return float(np.max(diff / denom)) if diff.size else 0.0


def integer_gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact integer ``A @ B`` (int64)."""
    ia, ib = np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64)
    _check_gemm(ia, ib)
    out = np.zeros((ia.shape[0], ib.shape[1]), dtype=np.int64)
    for k in range(ia.shape[1]):
        out += np.outer(ia[:, k], ib[k])
    return out


def scalar_popcount(words: Sequence[int]) -> List[int]:
    return [bin(int(w) & _MASK32).count("1") for w in words]


def scalar_prefix_sum(lanes: Sequence[int]) -> List[int]:
    """Running sum modulo 2**32."""
    out, total = [], 0
    for v in lanes:
        total = (total + int(v)) & _MASK32
        out.append(total)
    return out


def scalar_expand(metadata: Sequence[int], values: Sequence, cursor: int) -> Tuple[List, int]:
    """Walk the metadata bits LSB-first, emitting the next value or zero."""
    out: List = []
    for word in metadata:
        word = int(word)
        for bit in range(32):
            if (word >> bit) & 1:
                if cursor >= len(values):
                    raise DecompressError(f"exhausted values at cursor {cursor}")
                out.append(values[cursor])
                cursor += 1
            else:
                out.append(0)
    return out, cursor


def scalar_cursors(bitmap: Sequence[int], bit_starts: Sequence[int]) -> List[int]:
    """Set bits preceding each bit offset, counted one word at a time."""
    counts = scalar_popcount(bitmap)
    cursors = []
    for start in bit_starts:
        cursors.append(sum(counts[: int(start) // 32]))
    return cursors


def sort_prune(x: np.ndarray, sparsity: float) -> np.ndarray:
    """Zero the smallest-magnitude fraction of ``x`` using a full sort.

    Among equal magnitudes the element with the lower flat index is kept.
    """
    arr = np.array(x, copy=True)
    flat = arr.reshape(-1)
    n = flat.size
    drop = int(np.floor(round(sparsity * n, 9)))
    order = sorted(range(n), key=lambda i: (abs(float(flat[i])), -i))
    for i in order[:drop]:
        flat[i] = 0
    return arr


def naive_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    scale: Optional[float] = None,
) -> np.ndarray:
    """Single-token attention in FP64 with the KV heads explicitly repeated.

    ``q``: (heads, head_dim); ``k``/``v``: (kv_heads, context, head_dim).
    """
    fq, fk, fv = _as_f64(q), _as_f64(k), _as_f64(v)
    heads, head_dim = fq.shape
    kv_heads = fk.shape[0]
    if heads % kv_heads:
        raise ShapeError(f"{heads} heads do not divide into {kv_heads} kv heads")
    group = heads // kv_heads
    fk = np.repeat(fk, group, axis=0)
    fv = np.repeat(fv, group, axis=0)
    if scale is None:
        scale = 1.0 / np.sqrt(head_dim)
    out = np.zeros((heads, head_dim), dtype=np.float64)
    for h in range(heads):
        scores = fk[h] @ fq[h] * scale
        weights = np.exp(scores - scores.max())
        weights /= weights.sum()
        out[h] = weights @ fv[h]
    return out
