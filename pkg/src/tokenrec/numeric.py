"""Float64 numeric substrate: checked ops, rng streams, and a flop counter.

Matrices are plain 2-D float64 numpy arrays (row-major). Public ops validate
shapes and finiteness at the boundary; inner kernels trust their inputs.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

# Additive mask sentinel. Anything at or below MASK_THRESHOLD is treated as
# fully masked: exp(x - rowmax) underflows to an exact 0.0 for such entries.
NEG_INF = -1.0e30
MASK_THRESHOLD = -1.0e29


class NumericsError(RuntimeError):
    """Numerical failure: non-finite values, empty softmax rows, SVD issues."""


class DataError(ValueError):
    """Malformed records, streams, or dataset files."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Deterministic generator for (seed, stream...) key.

    Equal keys give identical draw sequences; distinct stream suffixes give
    statistically independent streams off one experiment seed.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, stream)]))


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise NumericsError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def check_finite(a: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericsError(f"non-finite values in {name}")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Checked matrix product. Raises with both shapes on mismatch."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise NumericsError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    flops_note(matmul_mas(a.shape, b.shape))
    return np.matmul(a, b)


def matmul_mas(a_shape, b_shape) -> int:
    """Multiply-add count for a (possibly batched) matmul."""
    n, m = a_shape[-2], a_shape[-1]
    p = b_shape[-1]
    batch = np.broadcast_shapes(a_shape[:-2], b_shape[:-2])
    total = n * m * p
    for s in batch:
        total *= s
    return int(total)


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    """Row-wise softmax with additive-mask support.

    Entries at or below MASK_THRESHOLD (or -inf) are masked and come out as
    exact zeros. A row with no visible entry is an error, not a NaN.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim < 1:
        raise NumericsError("softmax_rows needs at least 1-D input")
    row_max = np.max(s, axis=-1, keepdims=True)
    if np.any(row_max <= MASK_THRESHOLD) or np.any(np.isneginf(row_max)):
        raise NumericsError("empty visibility row: softmax over fully masked row")
    with np.errstate(invalid="ignore"):
        e = np.exp(s - row_max)
    e = np.where(np.isnan(e), 0.0, e)  # exp(-inf - -inf) guard; masked stays 0
    out = e / np.sum(e, axis=-1, keepdims=True)
    return out


def svd_singular_values(m: np.ndarray) -> np.ndarray:
    """Singular values of a 2-D matrix, descending, length min(rows, cols)."""
    a = as_matrix(m, "svd input")
    check_finite(a, "svd input")
    try:
        s = np.linalg.svd(a, compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise NumericsError(
            f"svd did not converge on matrix of shape {a.shape}: {exc}"
        ) from exc
    return s


class FlopCounter:
    """Accumulates multiply-add counts from instrumented ops."""

    def __init__(self) -> None:
        self.multiply_adds = 0

    @property
    def flops(self) -> int:
        # 1 multiply-add = 2 floating point operations.
        return 2 * self.multiply_adds


_ACTIVE_COUNTERS: list[FlopCounter] = []


def flops_note(multiply_adds: int) -> None:
    for c in _ACTIVE_COUNTERS:
        c.multiply_adds += multiply_adds


@contextmanager
def count_flops():
    """Context manager yielding a FlopCounter fed by instrumented ops."""
    counter = FlopCounter()
    _ACTIVE_COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _ACTIVE_COUNTERS.remove(counter)
