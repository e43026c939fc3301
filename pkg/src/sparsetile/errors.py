"""Exception types raised by sparsetile.

Every error derives from :class:`SparseTileError`; most also derive from
the builtin that callers would naturally catch (``ValueError`` for bad
input, ``RuntimeError`` for kernel-time failures).
"""

from __future__ import annotations


class SparseTileError(Exception):
    """Base class for all sparsetile errors."""


class FormatError(SparseTileError, ValueError):
    """Bad magic, version mismatch, truncation or a corrupt tensor."""


class PartitionError(SparseTileError, ValueError):
    """Worker partition that does not fit the packed tensor."""


class DecompressError(SparseTileError, RuntimeError):
    """Value stream ran out during tile expansion."""


class ShapeError(SparseTileError, ValueError):
    """Operand dimensions that do not line up."""


class QuantizationError(SparseTileError, ValueError):
    """Non-finite input, non-positive scale or an INT32 accumulator bound violation."""


class AttentionError(SparseTileError, ValueError):
    """Invalid attention call (empty cache, bad head mapping)."""


class ValidationError(SparseTileError, RuntimeError):
    """Kernel output disagreed with its oracle; timings are not reported."""


class ReportError(SparseTileError, ValueError):
    """Malformed bench CSV or a row without its baseline."""


class ConfigError(SparseTileError, ValueError):
    """Invalid configuration or bench sweep file."""
