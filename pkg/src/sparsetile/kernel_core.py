"""Tiled GEMM kernels: dense baseline, sparse-weight GEMM and the vector path.

All kernels walk the weights in the same order: per worker, column block
by column block; inside a block, inner-dimension tiles in ascending order;
inside a tile, packed rows in ascending order.  The BF16 multiply of one
packed row is ``a[2r] * b[2r] + a[2r+1] * b[2r+1]`` in FP32, added to the
FP32 accumulator.  Because the sparse kernel expands each weight tile into
a dense buffer and then runs the very same multiply, its output is
bit-identical to :func:`dense_gemm` on the unpacked weights.

The INT8 variants accumulate in INT32 and return the raw accumulators;
scaling back to FP32 lives in :mod:`sparsetile.int8_path`.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple, Union

import numpy as np

from . import tuning
from .dtypes import Dtype, as_bf16, bf16_to_f32
from .errors import DecompressError, PartitionError, QuantizationError, ShapeError
from .sparse_format import (
    PackedSparseTensor,
    TileBuffer,
    TileLayout,
    compressed_size_bytes,
    pad_dense,
    padded_dims,
    partition_blocks,
    to_stream,
)

Lane16 = np.ndarray

_BLOCK = tuning.COLUMN_BLOCK_COLS
_PAIR = tuning.TILES_PER_COLUMN_BLOCK

# These NumPy kernels are the portable backend: they fix the semantics every
# accelerated backend must reproduce bit for bit.  Tiles are expanded from
# Python, so skipping zero weights does not make them faster than dense.
BACKEND_NAME = "portable"
BACKEND_SPARSE_SPEEDUP = False


# ----------------------------------------------------------------------
# Lane primitives
# ----------------------------------------------------------------------
def prefix_sum16(v: np.ndarray) -> Lane16:
    """Inclusive prefix sum over 16 uint32 lanes (last axis), shift-add schedule.

    Lane arithmetic wraps modulo 2**32.  Leading axes are treated as a batch.
    """
    s = np.array(v, dtype=np.uint32, copy=True)
    if s.shape[-1:] != (tuning.LANES,):
        raise ShapeError(f"prefix_sum16 expects {tuning.LANES} lanes, got shape {s.shape}")
    for offset in (1, 2, 4, 8):
        shifted = np.zeros_like(s)
        shifted[..., offset:] = s[..., :-offset]
        s += shifted
    return s


def row_popcounts(metadata: np.ndarray) -> Lane16:
    """Per-word popcount of 16 metadata words (last axis)."""
    words = np.asarray(metadata, dtype=np.uint32)
    if words.shape[-1:] != (tuning.LANES,):
        raise ShapeError(f"row_popcounts expects {tuning.LANES} words, got shape {words.shape}")
    return np.bitwise_count(words).astype(np.uint32)


def _word_bits(words: np.ndarray) -> np.ndarray:
    raw = np.ascontiguousarray(words, dtype="<u4").view(np.uint8)
    return np.unpackbits(raw, bitorder="little").reshape(words.size, tuning.METADATA_WORD_BITS)


def decompress_tile(metadata: np.ndarray, values: np.ndarray, cursor: int, out: TileBuffer) -> int:
    """Expand one compressed tile into ``out``; returns the advanced cursor.

    Metadata comes in groups of 16 words (one group for BF16 tiles, two for
    INT8 tiles).  Word ``w`` covers tile elements ``32*w .. 32*w+31`` in
    row-major packed order, bit 0 first.
    """
    words = np.asarray(metadata, dtype=np.uint32).reshape(-1)
    expected = out.layout.words_per_tile
    if words.size != expected:
        raise ShapeError(f"tile needs {expected} metadata words, got {words.size}")
    groups = words.reshape(-1, tuning.LANES)
    counts = row_popcounts(groups)
    inclusive = prefix_sum16(counts)
    group_totals = inclusive[:, -1].astype(np.int64)
    group_base = np.concatenate(([0], np.cumsum(group_totals)[:-1]))
    word_offsets = ((inclusive - counts).astype(np.int64) + group_base[:, None]).reshape(-1)
    total = int(group_totals.sum())
    if cursor < 0 or cursor + total > len(values):
        raise DecompressError(
            f"exhausted values: tile needs {total} values at cursor {cursor}, stream has {len(values)}"
        )

    flat = out.data.reshape(-1)
    flat[:] = 0
    if total:
        bits = _word_bits(words)
        rank = np.cumsum(bits, axis=1, dtype=np.int64) - bits
        take = (cursor + word_offsets[:, None] + rank)[bits.astype(bool)]
        flat[bits.reshape(-1).astype(bool)] = values[take]
    return cursor + total


# ----------------------------------------------------------------------
# Work decomposition
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class GemmPlan:
    """Split of an ``out_rows x out_cols`` product over ``workers``.

    Column blocks (32 output columns) are divided first; when there are
    fewer than ``32 * workers`` output columns, row blocks (32 input rows)
    are divided too.
    """

    out_rows: int
    out_cols: int
    inner: int
    workers: int = 1
    col_block: int = _BLOCK
    row_block: int = tuning.ROW_BLOCK_ROWS
    work_items: List[Tuple[Tuple[int, int], int]] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        for name in ("out_rows", "out_cols", "inner", "workers"):
            if getattr(self, name) < 1:
                raise ShapeError(f"GemmPlan.{name} must be >= 1")
        items = [(rows, part) for rows in self.row_ranges for part in range(self.col_parts)]
        object.__setattr__(self, "work_items", items)

    @property
    def column_blocks(self) -> int:
        return -(-self.out_cols // self.col_block)

    @property
    def row_blocks(self) -> int:
        return -(-self.out_rows // self.row_block)

    @property
    def col_parts(self) -> int:
        return min(self.workers, self.column_blocks)

    @property
    def row_parts(self) -> int:
        if self.out_cols >= self.col_block * self.workers:
            return 1
        return min(self.row_blocks, max(1, self.workers // self.col_parts))

    @property
    def col_ranges(self) -> List[Tuple[int, int]]:
        return partition_blocks(self.column_blocks, self.col_parts)

    @property
    def row_ranges(self) -> List[Tuple[int, int]]:
        ranges = []
        for start, end in partition_blocks(self.row_blocks, self.row_parts):
            ranges.append((start * self.row_block, min(end * self.row_block, self.out_rows)))
        return ranges

    @classmethod
    def for_operands(cls, x: np.ndarray, weights: "DenseTiles | PackedSparseTensor", workers: int = 1) -> "GemmPlan":
        return cls(out_rows=x.shape[0], out_cols=weights.logical_cols, inner=weights.logical_rows, workers=workers)


@dataclass(frozen=True)
class DenseTiles:
    """Dense weights pre-reordered into the tile layout.

    ``tiles`` has shape ``(column_blocks, k_tiles, 2, 16, tile_cols)``.
    """

    logical_rows: int
    logical_cols: int
    padded_rows: int
    padded_cols: int
    layout: TileLayout
    tiles: np.ndarray

    @property
    def dtype(self) -> Dtype:
        return self.layout.dtype


def reorder_dense(dense: np.ndarray, layout: Optional[TileLayout] = None) -> DenseTiles:
    """Reorder a logical K x N matrix into dense tiles (int8 input picks the INT8 layout)."""
    arr = np.asarray(dense)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D weight matrix, got shape {arr.shape}")
    if layout is None:
        layout = TileLayout.tile(Dtype.INT8 if arr.dtype == np.int8 else Dtype.BF16)
    if layout.is_vector:
        raise ShapeError("dense tiles use the tile layout, not the vector-path layout")
    if layout.dtype is Dtype.BF16:
        arr = as_bf16(arr)
    elif arr.dtype != np.int8:
        raise ShapeError(f"INT8 dense tiles need int8 weights, got {arr.dtype}")
    else:
        _check_symmetric_int8(arr, "weights")
    rows, cols = arr.shape
    kp, np_ = padded_dims(rows, cols, layout)
    stream = to_stream(pad_dense(arr, layout), layout)
    tiles = stream.reshape(np_ // _BLOCK, kp // layout.k_tile, _PAIR, layout.tile_rows, layout.tile_cols)
    tiles.setflags(write=False)
    return DenseTiles(rows, cols, kp, np_, layout, tiles)


# ----------------------------------------------------------------------
# Tile multiply-accumulate
# ----------------------------------------------------------------------
def _block_operand(tile0: np.ndarray, tile1: np.ndarray, layout: TileLayout) -> np.ndarray:
    """Two weight tiles of one column block as ``(rows, 32 columns, interleave)``."""
    il = layout.interleave
    pair = np.stack((tile0, tile1)).reshape(_PAIR, layout.tile_rows, layout.n_tile, il)
    return pair.transpose(1, 0, 2, 3).reshape(layout.tile_rows, _BLOCK, il)


def _mac_bf16(acc: np.ndarray, a: np.ndarray, b_bits: np.ndarray) -> np.ndarray:
    b = bf16_to_f32(b_bits)
    # (mb, rows, 32): one pair sum per packed row, then rows added in order
    s = a[:, :, None, 0] * b[None, :, :, 0] + a[:, :, None, 1] * b[None, :, :, 1]
    return np.add.accumulate(np.concatenate((acc[:, None, :], s), axis=1), axis=1)[:, -1]


def _mac_int8(acc: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return acc + np.einsum("mrj,rnj->mn", a, b.astype(np.int32), dtype=np.int32)


def _check_symmetric_int8(arr: np.ndarray, what: str) -> None:
    # INT8_MAX_INNER assumes |q| <= 127
    if arr.size and int(arr.min()) < -tuning.INT8_QMAX:
        raise QuantizationError(f"INT8 {what} hold -128; values must lie in [-{tuning.INT8_QMAX}, {tuning.INT8_QMAX}]")


def _prepare_input(x: np.ndarray, layout: TileLayout, inner: int, padded_inner: int) -> np.ndarray:
    """Input rows as ``(M, k_tiles, tile_rows, interleave)`` in the accumulate dtype."""
    arr = np.asarray(x)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D input, got shape {arr.shape}")
    if arr.shape[1] != inner:
        raise ShapeError(f"dimension mismatch: input has {arr.shape[1]} columns, weights have {inner} rows")
    if layout.dtype is Dtype.BF16:
        vals = bf16_to_f32(as_bf16(arr))
    else:
        if arr.dtype != np.int8:
            raise ShapeError(f"INT8 kernels need int8 input, got {arr.dtype}")
        _check_symmetric_int8(arr, "input")
        vals = arr.astype(np.int32)
    m = arr.shape[0]
    if padded_inner != inner:
        wide = np.zeros((m, padded_inner), dtype=vals.dtype)
        wide[:, :inner] = vals
        vals = wide
    return vals.reshape(m, padded_inner // layout.k_tile, layout.tile_rows, layout.interleave)


def _acc_dtype(layout: TileLayout) -> type:
    return np.float32 if layout.dtype is Dtype.BF16 else np.int32


def _check_plan(plan: GemmPlan, m: int, weights: "DenseTiles | PackedSparseTensor") -> None:
    if (plan.out_rows, plan.out_cols, plan.inner) != (m, weights.logical_cols, weights.logical_rows):
        raise ShapeError(
            f"dimension mismatch: plan {plan.out_rows}x{plan.inner}x{plan.out_cols}, "
            f"operands {m}x{weights.logical_rows}x{weights.logical_cols}"
        )


def _run_work_items(plan: GemmPlan, run_item: Callable[[Tuple[int, int], int], None]) -> None:
    items = plan.work_items
    if len(items) == 1:
        run_item(*items[0])
        return
    with ThreadPoolExecutor(max_workers=len(items)) as pool:
        futures = [pool.submit(run_item, rows, part) for rows, part in items]
        for future in futures:
            future.result()


def _finish(acc: np.ndarray, m: int, cols: int) -> np.ndarray:
    return np.ascontiguousarray(acc[:m, :cols])


# ----------------------------------------------------------------------
# GEMM kernels
# ----------------------------------------------------------------------
def dense_gemm(
    x: np.ndarray,
    weights: Union[DenseTiles, np.ndarray],
    plan: Optional[GemmPlan] = None,
) -> np.ndarray:
    """``x @ W`` over dense tiles.

    BF16 weights give an FP32 result; INT8 weights give INT32 accumulators.
    A plain 2-D matrix is reordered into tiles first.
    """
    tiles = weights if isinstance(weights, DenseTiles) else reorder_dense(weights)
    layout = tiles.layout
    a = _prepare_input(x, layout, tiles.logical_rows, tiles.padded_rows)
    m = a.shape[0]
    plan = plan or GemmPlan.for_operands(a, tiles)
    _check_plan(plan, m, tiles)
    mac = _mac_bf16 if layout.dtype is Dtype.BF16 else _mac_int8
    out = np.zeros((m, tiles.padded_cols), dtype=_acc_dtype(layout))
    col_ranges = plan.col_ranges

    def run_item(rows: Tuple[int, int], part: int) -> None:
        r0, r1 = rows
        xa = a[r0:r1]
        b_start, b_end = col_ranges[part]
        for block in range(b_start, b_end):
            acc = np.zeros((r1 - r0, _BLOCK), dtype=out.dtype)
            for kt in range(tiles.tiles.shape[1]):
                pair = tiles.tiles[block, kt]
                acc = mac(acc, xa[:, kt], _block_operand(pair[0], pair[1], layout))
            out[r0:r1, block * _BLOCK : (block + 1) * _BLOCK] = acc

    _run_work_items(plan, run_item)
    return _finish(out, m, tiles.logical_cols)


def sparse_gemm(
    x: np.ndarray,
    weights: PackedSparseTensor,
    plan: Optional[GemmPlan] = None,
) -> np.ndarray:
    """``x @ W`` for a packed tile-layout tensor, expanding one tile at a time.

    Each worker starts at its thread cursor and reuses two tile buffers.
    The result is bit-identical to :func:`dense_gemm` on ``unpack_weights(W)``.
    """
    layout = weights.layout
    if layout.is_vector:
        raise ShapeError("vector-path tensors are multiplied with vector_sparse_gemm")
    a = _prepare_input(x, layout, weights.logical_rows, weights.padded_rows)
    m = a.shape[0]
    plan = plan or GemmPlan.for_operands(a, weights, workers=weights.num_workers)
    _check_plan(plan, m, weights)
    if plan.col_parts != weights.num_workers:
        raise PartitionError(
            f"repartition required: tensor packed for {weights.num_workers} workers, "
            f"plan splits columns {plan.col_parts} ways"
        )
    mac = _mac_bf16 if layout.dtype is Dtype.BF16 else _mac_int8
    out = np.zeros((m, weights.padded_cols), dtype=_acc_dtype(layout))
    col_ranges = plan.col_ranges
    wpt = layout.words_per_tile
    bitmap, values = weights.bitmap, weights.values

    def run_item(rows: Tuple[int, int], part: int) -> None:
        r0, r1 = rows
        xa = a[r0:r1]
        buffers = (TileBuffer(layout), TileBuffer(layout))
        cursor = int(weights.thread_cursors[part])
        b_start, b_end = col_ranges[part]
        for block in range(b_start, b_end):
            acc = np.zeros((r1 - r0, _BLOCK), dtype=out.dtype)
            for kt in range(weights.k_tiles):
                for tile, buf in enumerate(buffers):
                    word = weights.tile_word_offset(block, kt, tile)
                    cursor = decompress_tile(bitmap[word : word + wpt], values, cursor, buf)
                acc = mac(acc, xa[:, kt], _block_operand(buffers[0].data, buffers[1].data, layout))
            out[r0:r1, block * _BLOCK : (block + 1) * _BLOCK] = acc

    _run_work_items(plan, run_item)
    return _finish(out, m, weights.logical_cols)


def vector_sparse_gemm(
    x: np.ndarray,
    weights: PackedSparseTensor,
    num_neuron_groups: int = tuning.NUM_NEURON_GROUPS_DEFAULT,
    plan: Optional[GemmPlan] = None,
) -> np.ndarray:
    """``x @ W`` for a vector-path tensor using lane-vector accumulators.

    Each 16-lane group owns 16 output columns.  Up to ``num_neuron_groups``
    groups are in flight at once; every input element is broadcast over the
    lanes and added into each group's FP32 accumulator in ascending inner
    order.
    """
    if not weights.layout.is_vector:
        raise ShapeError("vector_sparse_gemm needs a tensor packed with TileLayout.vector()")
    if not 1 <= num_neuron_groups <= tuning.NUM_NEURON_GROUPS_MAX:
        raise ValueError(
            f"unsupported group count {num_neuron_groups} (1..{tuning.NUM_NEURON_GROUPS_MAX})"
        )
    layout = weights.layout
    arr = np.asarray(x)
    a = _prepare_input(arr, layout, weights.logical_rows, weights.padded_rows)
    m = a.shape[0]
    a = a.reshape(m, weights.k_tiles, layout.k_tile)
    plan = plan or GemmPlan.for_operands(arr, weights, workers=weights.num_workers)
    _check_plan(plan, m, weights)
    if plan.col_parts != weights.num_workers:
        raise PartitionError(
            f"repartition required: tensor packed for {weights.num_workers} workers, "
            f"plan splits columns {plan.col_parts} ways"
        )
    lanes = layout.n_tile
    wpt = layout.words_per_tile
    segment_words = weights.k_tiles * wpt
    bitmap, values = weights.bitmap, weights.values
    segment_pop = np.bitwise_count(bitmap).reshape(-1, segment_words).sum(axis=1, dtype=np.int64)
    out = np.zeros((m, weights.padded_cols), dtype=np.float32)
    col_ranges = plan.col_ranges

    def run_item(rows: Tuple[int, int], part: int) -> None:
        r0, r1 = rows
        xa = a[r0:r1]
        b_start, b_end = col_ranges[part]
        first, last = b_start * _PAIR, b_end * _PAIR
        buffers = [TileBuffer(layout) for _ in range(num_neuron_groups)]
        chunk_cursor = int(weights.thread_cursors[part])
        for chunk in range(first, last, num_neuron_groups):
            groups = list(range(chunk, min(chunk + num_neuron_groups, last)))
            cursors = [chunk_cursor + int(segment_pop[chunk:g].sum()) for g in groups]
            acc = np.zeros((len(groups), r1 - r0, lanes), dtype=np.float32)
            for kt in range(weights.k_tiles):
                for i, g in enumerate(groups):
                    word = g * segment_words + kt * wpt
                    cursors[i] = decompress_tile(bitmap[word : word + wpt], values, cursors[i], buffers[i])
                    w = bf16_to_f32(buffers[i].data).reshape(layout.k_tile, lanes)
                    prods = xa[:, kt, :, None] * w[None]
                    acc[i] = np.add.accumulate(np.concatenate((acc[i][:, None], prods), axis=1), axis=1)[:, -1]
            chunk_cursor = cursors[-1]
            for i, g in enumerate(groups):
                out[r0:r1, g * lanes : (g + 1) * lanes] = acc[i]

    _run_work_items(plan, run_item)
    return _finish(out, m, weights.logical_cols)


def bytes_read_model(
    weights: Union[PackedSparseTensor, DenseTiles, Tuple[int, int, Union[Dtype, str]]],
) -> int:
    """Modeled weight bytes read by one forward call."""
    if isinstance(weights, PackedSparseTensor):
        return compressed_size_bytes(weights)
    if isinstance(weights, DenseTiles):
        return weights.padded_rows * weights.padded_cols * weights.dtype.element_bytes
    rows, cols, dtype = weights
    layout = TileLayout.tile(dtype)
    kp, np_ = padded_dims(rows, cols, layout)
    return kp * np_ * layout.dtype.element_bytes
