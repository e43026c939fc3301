"""Bitmap-compressed weight format and the tile-interleaved packing order.

A weight matrix ``W`` (inner dimension K by output dimension N) is stored
as two streams:

* ``bitmap`` - one bit per padded element, 32-bit words, LSB-first;
* ``values`` - the non-zero elements, in exactly the order the kernels
  consume them.

Consumption order is column block (32 output columns, two weight tiles)
outer, inner-dimension tile inner, and within a tile row-major over the
16 packed rows.  Each packed row interleaves 2 (BF16) or 4 (INT8)
consecutive inner-dimension elements of one output column, so packed row
``r``, position ``p = n * interleave + j`` holds ``W[r * interleave + j, n]``.

The vector-path layout keeps the same tile size (16 rows x 32 BF16) but
stores, per packed row, two inner-dimension rows of 16 lanes
(``p = j * 16 + lane``), and lays each 16-lane group out as one contiguous
segment of its column block.

Per-worker cursors into ``values`` are computed once at pack time; a
packed tensor is immutable and safe to share between worker threads.

File format (``.spx``), little-endian::

    "SPX1" | u8 version | u8 layout code | u32 logical_rows | u32 logical_cols
    | u32 padded_rows | u32 padded_cols | u32 num_workers
    | u32 n + n * u32 cursors | u32 n + n * u32 bitmap words
    | u32 n + n * element values | optional "QNT1" quantization trailer
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, BinaryIO, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tuning
from .dtypes import Dtype, as_bf16
from .errors import FormatError, PartitionError, QuantizationError, ShapeError

if TYPE_CHECKING:  # pragma: no cover
    from .int8_path import QuantParams

PATH_TILE = "tile"
PATH_VECTOR = "vector"

SPX_MAGIC = b"SPX1"
SPX_VERSION = 1
QNT_MAGIC = b"QNT1"
_HEADER = struct.Struct("<4sBB5I")
_U32 = struct.Struct("<I")

PathOrFile = Union[str, Path, BinaryIO]


@dataclass(frozen=True)
class TileLayout:
    """Geometry and interleave order of one weight operand tile."""

    dtype: Dtype
    path: str = PATH_TILE
    tile_rows: int = tuning.TILE_ROWS

    def __post_init__(self) -> None:
        if self.path not in (PATH_TILE, PATH_VECTOR):
            raise ValueError(f"Unknown layout path '{self.path}'")
        if self.path == PATH_VECTOR and self.dtype is not Dtype.BF16:
            raise ValueError("The vector-path layout is BF16 only")

    @classmethod
    def tile(cls, dtype: "Dtype | str") -> "TileLayout":
        return cls(Dtype.parse(dtype), PATH_TILE)

    @classmethod
    def vector(cls) -> "TileLayout":
        return cls(Dtype.BF16, PATH_VECTOR)

    @property
    def tile_cols(self) -> int:
        return tuning.TILE_ROW_BITS // self.dtype.element_bits

    @property
    def interleave(self) -> int:
        return 2 if self.dtype is Dtype.BF16 else 4

    @property
    def k_tile(self) -> int:
        """Inner-dimension elements covered by one tile."""
        return self.tile_rows * self.interleave

    @property
    def n_tile(self) -> int:
        """Output columns covered by one tile."""
        return self.tile_cols // self.interleave

    @property
    def tile_elements(self) -> int:
        return self.tile_rows * self.tile_cols

    @property
    def words_per_tile(self) -> int:
        return self.tile_elements // tuning.METADATA_WORD_BITS

    @property
    def is_vector(self) -> bool:
        return self.path == PATH_VECTOR

    @property
    def code(self) -> int:
        if self.is_vector:
            return 2
        return 0 if self.dtype is Dtype.BF16 else 1

    @classmethod
    def from_code(cls, code: int) -> "TileLayout":
        if code == 0:
            return cls.tile(Dtype.BF16)
        if code == 1:
            return cls.tile(Dtype.INT8)
        if code == 2:
            return cls.vector()
        raise FormatError(f"Unknown layout code {code}")

    def position(self, k: int, n: int) -> Tuple[int, int]:
        """Map a tile-local logical (k, n) to its packed (row, position)."""
        if not (0 <= k < self.k_tile and 0 <= n < self.n_tile):
            raise IndexError(f"({k}, {n}) outside a {self.k_tile}x{self.n_tile} block")
        row, j = divmod(k, self.interleave)
        if self.is_vector:
            return row, j * self.n_tile + n
        return row, n * self.interleave + j

    def logical(self, row: int, pos: int) -> Tuple[int, int]:
        """Inverse of :meth:`position`."""
        if not (0 <= row < self.tile_rows and 0 <= pos < self.tile_cols):
            raise IndexError(f"({row}, {pos}) outside a {self.tile_rows}x{self.tile_cols} tile")
        if self.is_vector:
            j, n = divmod(pos, self.n_tile)
        else:
            n, j = divmod(pos, self.interleave)
        return row * self.interleave + j, n


@dataclass
class TileBuffer:
    """Dense scratch for one decompressed weight tile, reused across iterations."""

    layout: TileLayout
    data: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.data is None:
            self.data = np.zeros((self.layout.tile_rows, self.layout.tile_cols), dtype=self.layout.dtype.storage)
        elif self.data.shape != (self.layout.tile_rows, self.layout.tile_cols):
            raise ShapeError(f"TileBuffer must hold exactly one {self.layout.tile_rows}x{self.layout.tile_cols} tile")


@dataclass(eq=False)
class PackedSparseTensor:
    """Compressed weight (or cached K/V) matrix."""

    logical_rows: int
    logical_cols: int
    padded_rows: int
    padded_cols: int
    layout: TileLayout
    bitmap: np.ndarray
    values: np.ndarray
    thread_cursors: np.ndarray
    num_workers: int

    def __post_init__(self) -> None:
        self.bitmap = _frozen(np.asarray(self.bitmap, dtype=np.uint32).reshape(-1))
        self.values = _frozen(np.asarray(self.values, dtype=self.layout.dtype.storage).reshape(-1))
        self.thread_cursors = _frozen(np.asarray(self.thread_cursors, dtype=np.int64).reshape(-1))

    __hash__ = None  # type: ignore[assignment]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PackedSparseTensor):
            return NotImplemented
        return (
            self.logical_rows == other.logical_rows
            and self.logical_cols == other.logical_cols
            and self.padded_rows == other.padded_rows
            and self.padded_cols == other.padded_cols
            and self.layout == other.layout
            and self.num_workers == other.num_workers
            and np.array_equal(self.thread_cursors, other.thread_cursors)
            and np.array_equal(self.bitmap, other.bitmap)
            and self.values.dtype == other.values.dtype
            and np.array_equal(self.values, other.values)
        )

    @property
    def dtype(self) -> Dtype:
        return self.layout.dtype

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    @property
    def padded_elements(self) -> int:
        return self.padded_rows * self.padded_cols

    @property
    def column_blocks(self) -> int:
        return self.padded_cols // tuning.COLUMN_BLOCK_COLS

    @property
    def k_tiles(self) -> int:
        return self.padded_rows // self.layout.k_tile

    @property
    def words_per_block(self) -> int:
        return self.padded_rows * tuning.COLUMN_BLOCK_COLS // tuning.METADATA_WORD_BITS

    def worker_blocks(self, worker: int) -> Tuple[int, int]:
        return partition_blocks(self.column_blocks, self.num_workers)[worker]

    def tile_word_offset(self, block: int, k_tile: int, tile: int) -> int:
        """First metadata word of a tile, in stream order for this layout."""
        wpt = self.layout.words_per_tile
        if self.layout.is_vector:
            return ((block * tuning.TILES_PER_COLUMN_BLOCK + tile) * self.k_tiles + k_tile) * wpt
        return ((block * self.k_tiles + k_tile) * tuning.TILES_PER_COLUMN_BLOCK + tile) * wpt

    def validate(self) -> None:
        """Raise :class:`FormatError` when the streams are inconsistent."""
        kp, np_ = padded_dims(self.logical_rows, self.logical_cols, self.layout)
        if (kp, np_) != (self.padded_rows, self.padded_cols):
            raise FormatError(
                f"corrupt tensor: padded dims {self.padded_rows}x{self.padded_cols} "
                f"do not match logical {self.logical_rows}x{self.logical_cols}"
            )
        if self.bitmap.size * tuning.METADATA_WORD_BITS != self.padded_elements:
            raise FormatError(
                f"corrupt tensor: bitmap has {self.bitmap.size} words for {self.padded_elements} elements"
            )
        set_bits = int(np.bitwise_count(self.bitmap).sum(dtype=np.int64))
        if set_bits != self.values.size:
            raise FormatError(f"corrupt tensor: bitmap popcount {set_bits} != {self.values.size} values")
        if self.thread_cursors.size != self.num_workers:
            raise FormatError(
                f"corrupt tensor: {self.thread_cursors.size} cursors for {self.num_workers} workers"
            )
        try:
            expected = build_thread_cursors(
                self.bitmap,
                _worker_bit_starts(self.column_blocks, self.padded_rows, self.num_workers),
                tile_bits=self.layout.tile_elements,
            )
        except PartitionError as exc:
            raise FormatError(f"corrupt tensor: {exc}") from exc
        if not np.array_equal(self.thread_cursors, expected):
            raise FormatError(
                f"corrupt tensor: thread cursors {self.thread_cursors.tolist()} "
                f"do not match the bitmap (expected {expected.tolist()})"
            )
        if (self.padded_rows, self.padded_cols) != (self.logical_rows, self.logical_cols):
            padding = np.ones((self.padded_rows, self.padded_cols), dtype=bool)
            padding[: self.logical_rows, : self.logical_cols] = False
            if np.any(_mask_from_bitmap(self.bitmap) & to_stream(padding, self.layout)):
                raise FormatError("corrupt tensor: bitmap marks padding elements as stored")
        if self.dtype is Dtype.INT8 and self.values.size and int(self.values.min()) < -tuning.INT8_QMAX:
            raise FormatError(f"corrupt tensor: INT8 value below -{tuning.INT8_QMAX}")


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    if arr.flags.writeable:
        arr = arr.copy() if arr.base is not None else arr
        arr.setflags(write=False)
    return arr


def _round_up(value: int, multiple: int) -> int:
    return -(-value // multiple) * multiple


def padded_dims(rows: int, cols: int, layout: TileLayout) -> Tuple[int, int]:
    """Round K up to the tile depth and N up to a whole column block."""
    return _round_up(rows, layout.k_tile), _round_up(cols, tuning.COLUMN_BLOCK_COLS)


def usable_workers(workers: int, cols: int) -> int:
    """Clamp a worker count to the column blocks of an N-column matrix."""
    blocks = -(-cols // tuning.COLUMN_BLOCK_COLS)
    return max(1, min(workers, blocks))


def partition_blocks(column_blocks: int, num_workers: int) -> List[Tuple[int, int]]:
    """Split column blocks into contiguous, balanced per-worker ranges."""
    if num_workers < 1:
        raise PartitionError("num_workers must be >= 1")
    if num_workers > column_blocks:
        raise PartitionError(
            f"over-partitioned: {num_workers} workers for {column_blocks} column blocks"
        )
    return [
        (t * column_blocks // num_workers, (t + 1) * column_blocks // num_workers)
        for t in range(num_workers)
    ]


def _coerce_dense(dense: np.ndarray, dtype: Dtype) -> np.ndarray:
    arr = np.asarray(dense)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {arr.shape}")
    if dtype is Dtype.BF16:
        return np.ascontiguousarray(as_bf16(arr))
    if not np.issubdtype(arr.dtype, np.integer):
        raise ShapeError(f"INT8 packing expects integer input, got {arr.dtype}")
    if arr.size and (arr.min() < -128 or arr.max() > 127):
        raise ShapeError("INT8 packing input out of range [-128, 127]")
    if arr.size and arr.min() == -128:
        raise QuantizationError(f"INT8 weights must lie in [-{tuning.INT8_QMAX}, {tuning.INT8_QMAX}]; got -128")
    return np.ascontiguousarray(arr, dtype=np.int8)


def pad_dense(dense: np.ndarray, layout: TileLayout) -> np.ndarray:
    """Zero-pad a logical matrix to tile granularity."""
    rows, cols = dense.shape
    kp, np_ = padded_dims(rows, cols, layout)
    if (kp, np_) == (rows, cols):
        return dense
    out = np.zeros((kp, np_), dtype=dense.dtype)
    out[:rows, :cols] = dense
    return out


def to_stream(padded: np.ndarray, layout: TileLayout) -> np.ndarray:
    """Reorder a padded dense matrix into kernel consumption order (1-D)."""
    kp, np_ = padded.shape
    kt, nb = kp // layout.k_tile, np_ // tuning.COLUMN_BLOCK_COLS
    il = layout.interleave
    t = tuning.TILES_PER_COLUMN_BLOCK
    if layout.is_vector:
        # (kt, r, j, b, t, lane) -> (b, t, kt, r, j, lane)
        w = padded.reshape(kt, layout.tile_rows, il, nb, t, layout.n_tile).transpose(3, 4, 0, 1, 2, 5)
    else:
        # (kt, r, j, b, t, n) -> (b, kt, t, r, n, j)
        w = padded.reshape(kt, layout.tile_rows, il, nb, t, layout.n_tile).transpose(3, 0, 4, 1, 5, 2)
    return np.ascontiguousarray(w).reshape(-1)


def from_stream(stream: np.ndarray, padded_rows: int, padded_cols: int, layout: TileLayout) -> np.ndarray:
    """Inverse of :func:`to_stream`."""
    kt, nb = padded_rows // layout.k_tile, padded_cols // tuning.COLUMN_BLOCK_COLS
    il = layout.interleave
    t = tuning.TILES_PER_COLUMN_BLOCK
    if layout.is_vector:
        w = stream.reshape(nb, t, kt, layout.tile_rows, il, layout.n_tile).transpose(2, 3, 4, 0, 1, 5)
    else:
        w = stream.reshape(nb, kt, t, layout.tile_rows, layout.n_tile, il).transpose(1, 3, 5, 0, 2, 4)
    return np.ascontiguousarray(w).reshape(padded_rows, padded_cols)


def _bitmap_from_mask(mask: np.ndarray) -> np.ndarray:
    packed = np.packbits(mask.reshape(-1), bitorder="little")
    return np.frombuffer(packed.tobytes(), dtype="<u4").astype(np.uint32)


def _mask_from_bitmap(bitmap: np.ndarray) -> np.ndarray:
    raw = np.ascontiguousarray(bitmap, dtype="<u4").view(np.uint8)
    return np.unpackbits(raw, bitorder="little").astype(bool)


def _worker_bit_starts(column_blocks: int, padded_rows: int, num_workers: int) -> List[int]:
    bits_per_block = padded_rows * tuning.COLUMN_BLOCK_COLS
    return [start * bits_per_block for start, _ in partition_blocks(column_blocks, num_workers)]


def pack_weights(dense: np.ndarray, layout: TileLayout, num_workers: int = 1) -> PackedSparseTensor:
    """Compress an already-pruned K x N matrix into the bitmap format.

    BF16 layouts take uint16 bit patterns or floats (rounded to BF16); the
    INT8 layout takes integers in [-127, 127].  Zeros are the pruned
    entries: an element is stored iff its bit pattern is non-zero.
    """
    logical = _coerce_dense(dense, layout.dtype)
    rows, cols = logical.shape
    if rows < 1 or cols < 1:
        raise ShapeError(f"cannot pack an empty {rows}x{cols} matrix")
    if num_workers < 1:
        raise PartitionError("num_workers must be >= 1")
    padded = pad_dense(logical, layout)
    kp, np_ = padded.shape
    partition_blocks(np_ // tuning.COLUMN_BLOCK_COLS, num_workers)

    stream = to_stream(padded, layout)
    mask = stream != 0
    bitmap = _bitmap_from_mask(mask)
    values = stream[mask]
    cursors = build_thread_cursors(
        bitmap,
        _worker_bit_starts(np_ // tuning.COLUMN_BLOCK_COLS, kp, num_workers),
        tile_bits=layout.tile_elements,
    )
    return PackedSparseTensor(
        logical_rows=rows,
        logical_cols=cols,
        padded_rows=kp,
        padded_cols=np_,
        layout=layout,
        bitmap=bitmap,
        values=values,
        thread_cursors=cursors,
        num_workers=num_workers,
    )


def unpack_weights(t: PackedSparseTensor) -> np.ndarray:
    """Rebuild the logical dense matrix (storage dtype); padding is stripped."""
    t.validate()
    mask = _mask_from_bitmap(t.bitmap)
    stream = np.zeros(t.padded_elements, dtype=t.dtype.storage)
    stream[mask] = t.values
    dense = from_stream(stream, t.padded_rows, t.padded_cols, t.layout)
    return np.ascontiguousarray(dense[: t.logical_rows, : t.logical_cols])


def build_thread_cursors(
    bitmap: np.ndarray,
    partition: Sequence[int],
    tile_bits: int = tuning.TILE_ROWS * tuning.METADATA_WORD_BITS,
) -> np.ndarray:
    """Count the set bits preceding each partition start (bit offsets)."""
    words = np.asarray(bitmap, dtype=np.uint32).reshape(-1)
    total_bits = words.size * tuning.METADATA_WORD_BITS
    starts = [int(s) for s in partition]
    for idx, start in enumerate(starts):
        if start < 0 or start > total_bits:
            raise PartitionError(f"partition start {start} outside bitmap of {total_bits} bits")
        if start % tile_bits:
            raise PartitionError(f"unaligned partition start {start} (tile is {tile_bits} bits)")
        if idx and start <= starts[idx - 1]:
            raise PartitionError("partition starts must be strictly increasing")
    prefix = np.zeros(words.size + 1, dtype=np.int64)
    np.cumsum(np.bitwise_count(words), dtype=np.int64, out=prefix[1:])
    return np.array([prefix[s // tuning.METADATA_WORD_BITS] for s in starts], dtype=np.int64)


def repartition(t: PackedSparseTensor, num_workers: int) -> PackedSparseTensor:
    """Recompute thread cursors for a different worker count."""
    cursors = build_thread_cursors(
        t.bitmap,
        _worker_bit_starts(t.column_blocks, t.padded_rows, num_workers),
        tile_bits=t.layout.tile_elements,
    )
    return PackedSparseTensor(
        logical_rows=t.logical_rows,
        logical_cols=t.logical_cols,
        padded_rows=t.padded_rows,
        padded_cols=t.padded_cols,
        layout=t.layout,
        bitmap=t.bitmap,
        values=t.values,
        thread_cursors=cursors,
        num_workers=num_workers,
    )


def compressed_size_bytes(t: PackedSparseTensor) -> int:
    """Bitmap bytes + stored values + one 4-byte cursor per worker."""
    return -(-t.padded_elements // 8) + t.dtype.element_bytes * t.nnz + 4 * t.num_workers


# ----------------------------------------------------------------------
# .spx files
# ----------------------------------------------------------------------
def _value_wire_dtype(dtype: Dtype) -> str:
    return "<u2" if dtype is Dtype.BF16 else "i1"


def encode_packed(t: PackedSparseTensor, quant: Optional["QuantParams"] = None) -> bytes:
    """Serialize to the ``.spx`` byte layout."""
    buf = io.BytesIO()
    buf.write(
        _HEADER.pack(
            SPX_MAGIC,
            SPX_VERSION,
            t.layout.code,
            t.logical_rows,
            t.logical_cols,
            t.padded_rows,
            t.padded_cols,
            t.num_workers,
        )
    )
    for arr, wire in (
        (t.thread_cursors, "<u4"),
        (t.bitmap, "<u4"),
        (t.values, _value_wire_dtype(t.dtype)),
    ):
        buf.write(_U32.pack(arr.size))
        buf.write(np.ascontiguousarray(arr).astype(wire).tobytes())
    if quant is not None:
        scales = np.asarray(quant.weight_scales, dtype="<f4").reshape(-1)
        buf.write(QNT_MAGIC)
        buf.write(_U32.pack(scales.size))
        buf.write(scales.tobytes())
        buf.write(np.asarray([quant.activation_scale], dtype="<f4").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise FormatError(f"truncation: stream ended while reading {what}")
        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]

    def array(self, wire: str, what: str) -> np.ndarray:
        count = self.u32(f"{what} length")
        itemsize = np.dtype(wire).itemsize
        return np.frombuffer(self.take(count * itemsize, what), dtype=wire)

    @property
    def remaining(self) -> int:
        return len(self.data) - self.offset


def decode_packed(data: bytes) -> Tuple[PackedSparseTensor, Optional["QuantParams"]]:
    """Parse ``.spx`` bytes; returns the tensor and the optional quantization trailer."""
    reader = _Reader(data)
    magic, version, code, rows, cols, prow, pcol, workers = _HEADER.unpack(reader.take(_HEADER.size, "header"))
    if magic != SPX_MAGIC:
        raise FormatError(f"bad magic {magic!r} (expected {SPX_MAGIC!r})")
    if version != SPX_VERSION:
        raise FormatError(f"version mismatch: file version {version}, supported {SPX_VERSION}")
    layout = TileLayout.from_code(code)
    cursors = reader.array("<u4", "cursors")
    bitmap = reader.array("<u4", "bitmap")
    values = reader.array(_value_wire_dtype(layout.dtype), "values")
    tensor = PackedSparseTensor(
        logical_rows=rows,
        logical_cols=cols,
        padded_rows=prow,
        padded_cols=pcol,
        layout=layout,
        bitmap=bitmap.astype(np.uint32),
        values=values.astype(layout.dtype.storage),
        thread_cursors=cursors.astype(np.int64),
        num_workers=workers,
    )
    tensor.validate()

    quant = None
    if reader.remaining:
        tag = reader.take(4, "trailer tag")
        if tag != QNT_MAGIC:
            raise FormatError(f"unexpected trailing bytes (tag {tag!r})")
        from .int8_path import QuantParams

        scales = reader.array("<f4", "quantization scales")
        act = np.frombuffer(reader.take(4, "activation scale"), dtype="<f4")[0]
        if reader.remaining:
            raise FormatError("unexpected bytes after quantization trailer")
        quant = QuantParams(weight_scales=scales.astype(np.float32), activation_scale=float(act))
    return tensor, quant


def save_packed(t: PackedSparseTensor, sink: PathOrFile, quant: Optional["QuantParams"] = None) -> int:
    """Write a ``.spx`` file (path or binary file object); returns bytes written."""
    payload = encode_packed(t, quant)
    if isinstance(sink, (str, Path)):
        path = Path(sink)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
    else:
        sink.write(payload)
    return len(payload)


def _read_source(source: PathOrFile) -> bytes:
    if isinstance(source, (str, Path)):
        return Path(source).read_bytes()
    return source.read()


def load_packed(source: PathOrFile) -> PackedSparseTensor:
    """Read a ``.spx`` file; any quantization trailer is ignored."""
    return decode_packed(_read_source(source))[0]


def load_packed_with_quant(source: PathOrFile) -> Tuple[PackedSparseTensor, Optional["QuantParams"]]:
    return decode_packed(_read_source(source))


def spx_file_size(t: PackedSparseTensor) -> int:
    """Size in bytes of the ``.spx`` encoding of ``t`` (no trailer)."""
    return (
        _HEADER.size
        + 3 * _U32.size
        + 4 * t.thread_cursors.size
        + 4 * t.bitmap.size
        + t.dtype.element_bytes * t.values.size
    )
