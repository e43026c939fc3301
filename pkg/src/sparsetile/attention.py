"""Sparse KV-cache attention for single-token decode.

After prefill the cached keys and values of each layer are magnitude
pruned and packed per KV head: ``K`` transposed (head_dim x context) so
``q @ K^T`` is a sparse GEMM, ``V`` as is (context x head_dim) for
``r @ V``.  Tokens generated later go to dense BF16 tails that grow by
capacity doubling; the static packs never change.

Heads are independent and run on a thread pool.  Query heads of one GQA
group read the same packed K/V, nothing is repeated in memory.
"""

from __future__ import annotations

import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from . import config_service
from .dtypes import as_bf16, bf16_to_f32
from .errors import AttentionError, ShapeError
from .kernel_core import DenseTiles, dense_gemm, reorder_dense, sparse_gemm
from .sparse_format import PackedSparseTensor, TileLayout, load_packed, pack_weights, save_packed, unpack_weights

PRUNE_SCOPES = ("layer", "head")
MATMUL_MODES = ("sparse", "dense")
MANIFEST_NAME = "manifest.json"
TAILS_NAME = "tails.npz"
MANIFEST_FORMAT = "sparsetile-kv"
MANIFEST_VERSION = 1


def magnitude_prune(x: np.ndarray, sparsity: float) -> np.ndarray:
    """Zero the ``floor(sparsity * size)`` smallest-magnitude elements.

    Ties keep the lower flat index.  uint16 input is taken as BF16 bits and
    the result keeps the input dtype.
    """
    if not 0.0 <= sparsity <= 1.0:
        raise ValueError(f"sparsity must be in [0, 1], got {sparsity}")
    arr = np.asarray(x)
    out = np.array(arr, copy=True)
    n = arr.size
    drop = int(np.floor(round(sparsity * n, 9)))
    if drop == 0:
        return out
    mags = np.abs(bf16_to_f32(arr) if arr.dtype == np.uint16 else arr.astype(np.float64)).reshape(-1)
    index = np.arange(n)
    # ascending magnitude; equal magnitudes list the higher index first
    order = np.lexsort((-index, mags))
    out.reshape(-1)[order[:drop]] = 0
    return out


def softmax(scores: np.ndarray) -> np.ndarray:
    """FP32 softmax over the last axis with the maximum subtracted."""
    s = np.asarray(scores, dtype=np.float32)
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True, dtype=np.float32)


class KVTail:
    """Growable dense BF16 buffer of decode-time tokens for all KV heads of a layer."""

    def __init__(self, n_kv_heads: int, head_dim: int, capacity: int = 16) -> None:
        self.n_kv_heads = n_kv_heads
        self.head_dim = head_dim
        self.length = 0
        self._data = np.zeros((n_kv_heads, max(1, capacity), head_dim), dtype=np.uint16)

    @property
    def capacity(self) -> int:
        return self._data.shape[1]

    def append(self, rows: np.ndarray) -> None:
        if self.length == self.capacity:
            grown = np.zeros((self.n_kv_heads, 2 * self.capacity, self.head_dim), dtype=np.uint16)
            grown[:, : self.length] = self._data[:, : self.length]
            self._data = grown
        self._data[:, self.length] = rows
        self.length += 1

    def view(self, kv_head: int) -> np.ndarray:
        """(length, head_dim) BF16 bits of one KV head."""
        return self._data[kv_head, : self.length]

    def all(self) -> np.ndarray:
        return self._data[:, : self.length]


@dataclass
class KVHeadPack:
    k_static: Optional[PackedSparseTensor]
    v_static: Optional[PackedSparseTensor]
    _dense: Optional[Tuple[DenseTiles, DenseTiles]] = field(default=None, repr=False)

    def dense_tiles(self, lock: threading.Lock) -> Tuple[DenseTiles, DenseTiles]:
        """Unpacked static K/V as dense tiles, built once for the dense baseline."""
        with lock:
            if self._dense is None:
                assert self.k_static is not None and self.v_static is not None
                self._dense = (
                    reorder_dense(unpack_weights(self.k_static)),
                    reorder_dense(unpack_weights(self.v_static)),
                )
            return self._dense


@dataclass
class KVLayer:
    heads: List[KVHeadPack]
    k_tail: KVTail
    v_tail: KVTail


@dataclass
class SparseKVCache:
    n_heads: int
    n_kv_heads: int
    head_dim: int
    n_static: int
    layers: List[KVLayer]
    k_sparsity: float = 0.0
    v_sparsity: float = 0.0
    prune_scope: str = "layer"
    _lock: threading.Lock = field(default_factory=threading.Lock, init=False, repr=False)

    def __post_init__(self) -> None:
        if self.n_kv_heads < 1 or self.n_heads % self.n_kv_heads:
            raise AttentionError(f"{self.n_heads} heads do not divide into {self.n_kv_heads} kv heads")

    @property
    def group_size(self) -> int:
        return self.n_heads // self.n_kv_heads

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def n_tail(self, layer: int = 0) -> int:
        return self.layers[layer].k_tail.length

    def static_nnz(self, layer: int = 0) -> Tuple[int, int]:
        heads = self.layers[layer].heads
        k = sum(h.k_static.nnz for h in heads if h.k_static is not None)
        v = sum(h.v_static.nnz for h in heads if h.v_static is not None)
        return k, v

    def static_bytes(self) -> int:
        total = 0
        for lyr in self.layers:
            for h in lyr.heads:
                for t in (h.k_static, h.v_static):
                    if t is not None:
                        total += t.bitmap.nbytes + t.values.nbytes + t.thread_cursors.size * 4
        return total


def _as_layers(x: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(x)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"{name} must be (layers, kv_heads, context, head_dim), got shape {arr.shape}")
    return as_bf16(arr)


def _prune(x: np.ndarray, sparsity: float, scope: str) -> np.ndarray:
    if scope == "layer":
        return magnitude_prune(x, sparsity)
    return np.stack([magnitude_prune(head, sparsity) for head in x])


def pack_kv(
    k: np.ndarray,
    v: np.ndarray,
    k_sparsity: float,
    v_sparsity: float,
    workers: int = 1,
    n_heads: Optional[int] = None,
    prune_scope: str = "layer",
    log_callback: Optional[Callable[[str], None]] = None,
) -> SparseKVCache:
    """Prune and pack a prefilled cache.

    ``k``/``v``: ``(layers, kv_heads, context, head_dim)``, or one layer
    without the leading axis.  ``prune_scope`` chooses whether the pruning
    threshold is shared by the whole layer or set per KV head.
    """
    if prune_scope not in PRUNE_SCOPES:
        raise ValueError(f"prune_scope must be one of {PRUNE_SCOPES}, got '{prune_scope}'")
    kb, vb = _as_layers(k, "K"), _as_layers(v, "V")
    if kb.shape != vb.shape:
        raise ShapeError(f"K {kb.shape} and V {vb.shape} differ")
    n_layers, n_kv, n_ctx, head_dim = kb.shape
    n_heads = n_kv if n_heads is None else n_heads
    layout = TileLayout.tile("bf16")

    def pack_head(pk: np.ndarray, pv: np.ndarray) -> KVHeadPack:
        if n_ctx == 0:
            return KVHeadPack(None, None)
        return KVHeadPack(pack_weights(pk.T, layout, 1), pack_weights(pv, layout, 1))

    layers: List[KVLayer] = []
    started = time.perf_counter()
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for layer in range(n_layers):
            pk = _prune(kb[layer], k_sparsity, prune_scope)
            pv = _prune(vb[layer], v_sparsity, prune_scope)
            heads = list(pool.map(pack_head, pk, pv))
            layers.append(KVLayer(heads, KVTail(n_kv, head_dim), KVTail(n_kv, head_dim)))
    cache = SparseKVCache(
        n_heads=n_heads,
        n_kv_heads=n_kv,
        head_dim=head_dim,
        n_static=n_ctx,
        layers=layers,
        k_sparsity=k_sparsity,
        v_sparsity=v_sparsity,
        prune_scope=prune_scope,
    )
    if log_callback is not None:
        try:
            log_callback(
                f"kv_pack layers={n_layers} kv_heads={n_kv} context={n_ctx} head_dim={head_dim} "
                f"k_sparsity={k_sparsity} v_sparsity={v_sparsity} scope={prune_scope} "
                f"seconds={time.perf_counter() - started:.3f}"
            )
        except Exception:
            pass
    return cache


def append_token(cache: SparseKVCache, k_new: np.ndarray, v_new: np.ndarray, layer: int = 0) -> None:
    """Append one decode token's keys and values to a layer's tails."""
    shape = (cache.n_kv_heads, cache.head_dim)
    kb, vb = as_bf16(np.asarray(k_new)), as_bf16(np.asarray(v_new))
    if kb.size != cache.n_kv_heads * cache.head_dim or vb.size != kb.size:
        raise ShapeError(f"new K/V must hold {cache.n_kv_heads * cache.head_dim} values each")
    lyr = cache.layers[layer]
    lyr.k_tail.append(kb.reshape(shape))
    lyr.v_tail.append(vb.reshape(shape))


def decode_attention(
    q: np.ndarray,
    cache: SparseKVCache,
    layer: int = 0,
    workers: int = 1,
    matmul: str = "sparse",
) -> np.ndarray:
    """Attention output ``(heads, head_dim)`` for one decode token.

    ``matmul="sparse"`` multiplies straight from the packed cache;
    ``matmul="dense"`` runs the dense kernel over the unpacked static tiles.
    """
    if matmul not in MATMUL_MODES:
        raise ValueError(f"matmul must be one of {MATMUL_MODES}, got '{matmul}'")
    qb = as_bf16(np.asarray(q))
    if qb.shape != (cache.n_heads, cache.head_dim):
        raise ShapeError(f"q must be ({cache.n_heads}, {cache.head_dim}), got {qb.shape}")
    lyr = cache.layers[layer]
    n_tail = lyr.k_tail.length
    if cache.n_static == 0 and n_tail == 0:
        raise AttentionError("no context: cache holds no static or tail tokens")
    scale = np.float32(1.0 / np.sqrt(cache.head_dim))
    qf = bf16_to_f32(qb)

    def run_head(h: int) -> np.ndarray:
        g = h // cache.group_size
        pack = lyr.heads[g]
        parts = []
        if cache.n_static:
            if matmul == "sparse":
                parts.append(sparse_gemm(qb[h : h + 1], pack.k_static)[0])
            else:
                parts.append(dense_gemm(qb[h : h + 1], pack.dense_tiles(cache._lock)[0])[0])
        k_tail = bf16_to_f32(lyr.k_tail.view(g))
        if n_tail:
            parts.append(k_tail @ qf[h])
        r = softmax(np.concatenate(parts) * scale)
        out = np.zeros(cache.head_dim, dtype=np.float32)
        if cache.n_static:
            r_static = r[None, : cache.n_static]
            if matmul == "sparse":
                out += sparse_gemm(r_static, pack.v_static)[0]
            else:
                out += dense_gemm(r_static, pack.dense_tiles(cache._lock)[1])[0]
        if n_tail:
            out += r[cache.n_static :] @ bf16_to_f32(lyr.v_tail.view(g))
        return out

    if workers <= 1:
        rows = [run_head(h) for h in range(cache.n_heads)]
    else:
        with ThreadPoolExecutor(max_workers=min(workers, cache.n_heads)) as pool:
            rows = list(pool.map(run_head, range(cache.n_heads)))
    return np.stack(rows)


def sparse_attention(q: np.ndarray, cache: SparseKVCache, layer: int = 0, workers: int = 1) -> np.ndarray:
    return decode_attention(q, cache, layer=layer, workers=workers, matmul="sparse")


# ----------------------------------------------------------------------
# Persistence
# ----------------------------------------------------------------------
def save_kv_cache(cache: SparseKVCache, directory: Path) -> Path:
    """Write one ``.spx`` per static tensor, the tails and a manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors: List[Dict[str, Any]] = []
    tails: Dict[str, np.ndarray] = {}
    for li, lyr in enumerate(cache.layers):
        for g, pack in enumerate(lyr.heads):
            for role, tensor in (("k", pack.k_static), ("v", pack.v_static)):
                if tensor is None:
                    continue
                name = f"layer{li:03d}_kv{g:03d}_{role}.spx"
                save_packed(tensor, directory / name)
                tensors.append({"layer": li, "kv_head": g, "role": role, "file": name})
        tails[f"k_{li}"] = lyr.k_tail.all()
        tails[f"v_{li}"] = lyr.v_tail.all()
    np.savez(directory / TAILS_NAME, **tails)
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "n_layers": cache.n_layers,
        "n_heads": cache.n_heads,
        "n_kv_heads": cache.n_kv_heads,
        "head_dim": cache.head_dim,
        "n_static": cache.n_static,
        "k_sparsity": cache.k_sparsity,
        "v_sparsity": cache.v_sparsity,
        "prune_scope": cache.prune_scope,
        "tails": TAILS_NAME,
        "tensors": tensors,
    }
    config_service.validate_json(manifest, config_service.KV_MANIFEST_SCHEMA, what="KV cache manifest")
    path = directory / MANIFEST_NAME
    config_service.save_json(manifest, path)
    return path


def load_kv_cache(directory: Path) -> SparseKVCache:
    """Inverse of :func:`save_kv_cache`."""
    directory = Path(directory)
    manifest = config_service.load_json(directory / MANIFEST_NAME)
    if manifest is None:
        raise AttentionError(f"no {MANIFEST_NAME} in {directory}")
    config_service.validate_json(manifest, config_service.KV_MANIFEST_SCHEMA, what="KV cache manifest")
    n_layers, n_kv, head_dim = manifest["n_layers"], manifest["n_kv_heads"], manifest["head_dim"]
    packs = [[KVHeadPack(None, None) for _ in range(n_kv)] for _ in range(n_layers)]
    for entry in manifest["tensors"]:
        tensor = load_packed(directory / entry["file"])
        pack = packs[entry["layer"]][entry["kv_head"]]
        if entry["role"] == "k":
            pack.k_static = tensor
        else:
            pack.v_static = tensor
    layers: List[KVLayer] = []
    with np.load(directory / manifest["tails"]) as stored:
        for li in range(n_layers):
            k_tail, v_tail = KVTail(n_kv, head_dim), KVTail(n_kv, head_dim)
            for tail, key in ((k_tail, f"k_{li}"), (v_tail, f"v_{li}")):
                rows = stored[key]
                for t in range(rows.shape[1]):
                    tail.append(rows[:, t])
            layers.append(KVLayer(packs[li], k_tail, v_tail))
    return SparseKVCache(
        n_heads=manifest["n_heads"],
        n_kv_heads=n_kv,
        head_dim=head_dim,
        n_static=manifest["n_static"],
        layers=layers,
        k_sparsity=manifest["k_sparsity"],
        v_sparsity=manifest["v_sparsity"],
        prune_scope=manifest["prune_scope"],
    )
