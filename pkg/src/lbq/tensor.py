"""Dense FP32 tensors, the FP64-accumulating reference matmul, and the seeded RNG.

Tensors are plain ``numpy.ndarray`` objects with dtype float32. :func:`as_tensor`
is the validating constructor: it enforces the dtype, a C-contiguous row-major
layout, finiteness, and marks the array read-only.

Random tensors come from Philox4x64-10 (a counter-based generator with a
256-bit counter and 128-bit key), keyed through ``numpy.random.SeedSequence(seed)``.
Only the raw 64-bit output stream is used, which numpy guarantees stable across
versions and platforms; distributions are derived here:

* uniform[-1, 1]:  ``u = (r >> 11) * 2**-53``, value ``2u - 1``
* normal(0, 1):    Box-Muller on consecutive draw pairs ``(r0, r1)``:
  ``u1 = 1 - u(r0)``, ``u2 = u(r1)``, ``rad = sqrt(-2 ln u1)``; the pair yields
  ``rad*cos(2 pi u2)`` then ``rad*sin(2 pi u2)``.

All arithmetic is done in float64 and narrowed to float32 at the end.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError, InputError

__all__ = ["as_tensor", "matmul_ref", "rand_tensor", "relative_error"]

_TWO_POW_M53 = 2.0**-53


def as_tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Build an immutable FP32 tensor, optionally reshaping flat ``data`` to ``shape``."""
    arr = np.array(data, dtype=np.float32, order="C", copy=True)
    if shape is not None:
        shape = tuple(int(d) for d in shape)
        if any(d <= 0 for d in shape):
            raise DimensionError(f"shape dims must be positive, got {shape}")
        if arr.size != math.prod(shape):
            raise DimensionError(f"{arr.size} elements do not fill shape {shape}")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise InputError("tensor contains NaN or Inf")
    arr.flags.writeable = False
    return arr


def matmul_ref(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """C = A @ B accumulated in float64, narrowed to float32."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul_ref needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)


def relative_error(actual: np.ndarray, expected: np.ndarray) -> float:
    """max|actual - expected| / max|expected| in float64 (0 when both are zero)."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    num = float(np.max(np.abs(actual - expected), initial=0.0))
    den = float(np.max(np.abs(expected), initial=0.0))
    if den == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return num / den


def _raw_uint64(seed: int, count: int) -> np.ndarray:
    if not 0 <= seed < 2**64:
        raise InputError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.Philox(seed).random_raw(count)


def _unit_interval(raw: np.ndarray) -> np.ndarray:
    return (raw >> np.uint64(11)).astype(np.float64) * _TWO_POW_M53


def rand_tensor(shape: Iterable[int], seed: int, dist: str = "uniform") -> np.ndarray:
    """Deterministic random tensor; ``dist`` is ``"uniform"`` ([-1, 1]) or ``"normal"``."""
    shape = tuple(int(d) for d in shape)
    if not shape or any(d <= 0 for d in shape):
        raise DimensionError(f"rand_tensor needs a non-empty shape of positive dims, got {shape}")
    n = math.prod(shape)
    if dist == "uniform":
        values = 2.0 * _unit_interval(_raw_uint64(seed, n)) - 1.0
    elif dist == "normal":
        pairs = (n + 1) // 2
        u = _unit_interval(_raw_uint64(seed, 2 * pairs)).reshape(pairs, 2)
        rad = np.sqrt(-2.0 * np.log(1.0 - u[:, 0]))
        theta = 2.0 * math.pi * u[:, 1]
        values = np.stack([rad * np.cos(theta), rad * np.sin(theta)], axis=1).reshape(-1)[:n]
    else:
        raise InputError(f"unknown distribution {dist!r}")
    out = values.astype(np.float32).reshape(shape)
    out.flags.writeable = False
    return out
