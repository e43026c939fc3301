from __future__ import annotations

import os
from typing import Callable

import numpy as np
import pytest

from sparsetile import tuning
from sparsetile.attention import magnitude_prune
from sparsetile.dtypes import to_bf16


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def pruned_bf16(rng: np.random.Generator) -> Callable[..., np.ndarray]:
    """Factory: uniform [-1, 1] BF16 bits with the given fraction pruned."""

    def make(rows: int, cols: int, sparsity: float = 0.5) -> np.ndarray:
        dense = to_bf16(rng.uniform(-1.0, 1.0, size=(rows, cols)).astype(np.float32))
        return magnitude_prune(dense, sparsity)

    return make


@pytest.fixture
def pruned_int8(rng: np.random.Generator) -> Callable[..., np.ndarray]:
    """Factory: int8 values in [-127, 127] with the given fraction pruned."""

    def make(rows: int, cols: int, sparsity: float = 0.5) -> np.ndarray:
        dense = rng.integers(-127, 128, size=(rows, cols), dtype=np.int8)
        return magnitude_prune(dense, sparsity)

    return make


@pytest.fixture
def isolated_config(tmp_path, monkeypatch):
    """Point config resolution at a temp dir and clear the worker override."""
    monkeypatch.setenv(tuning.CONFIG_DIR_ENV_VAR, str(tmp_path / "config"))
    monkeypatch.delenv(tuning.THREADS_ENV_VAR, raising=False)
    return tmp_path / "config"


def full_suite_enabled() -> bool:
    return os.environ.get(tuning.FULL_SUITE_ENV_VAR) == "1"
