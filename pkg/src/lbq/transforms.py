"""Equivalence-preserving preprocessing applied before quantization.

Smoothing rewrites ``Y = X W`` as ``(X S^-1)(S W)`` with ``S = diag(s)`` and
``s_j = max|X_j|**alpha / max|W_j|**(1 - alpha)``, where ``j`` indexes the
shared contraction channel (columns of X, rows of W).

Rotation rewrites it as ``(X H)(H^T W)`` with ``H`` a normalized Hadamard
matrix. Dimensions that are not powers of two use a block-diagonal ``H``
whose blocks are Sylvester matrices of the largest power of two dividing the
dimension.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DimensionError, InputError

__all__ = [
    "SmoothingVector",
    "HadamardTransform",
    "compute_smoothing",
    "apply_smoothing",
    "hadamard_matrix",
    "rotate",
    "fwht",
    "DEFAULT_ALPHA",
]

DEFAULT_ALPHA = 0.5


@dataclass(frozen=True)
class SmoothingVector:
    alpha: float
    s: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.s, dtype=np.float32).reshape(-1)
        if not np.all(s > 0) or not np.all(np.isfinite(s)):
            raise InputError("smoothing factors must be finite and positive")
        object.__setattr__(self, "s", s)

    def __len__(self):
        return self.s.size


def compute_smoothing(act_absmax, w: np.ndarray, alpha: float = DEFAULT_ALPHA) -> SmoothingVector:
    """Per-channel migration factors from calibrated activation absmax and weight row absmax."""
    act = np.asarray(act_absmax, dtype=np.float64).reshape(-1)
    w = np.asarray(w, dtype=np.float32)
    if w.ndim != 2 or act.size != w.shape[0]:
        raise DimensionError(f"act_absmax of length {act.size} does not match weight rows {w.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise InputError(f"alpha must lie in [0, 1], got {alpha}")
    if np.any(act < 0) or not np.all(np.isfinite(act)):
        raise InputError("activation absmax must be finite and nonnegative")
    w_max = np.abs(w).max(axis=1).astype(np.float64)
    live = (act > 0) & (w_max > 0)
    s = np.ones_like(act)
    s[live] = act[live] ** alpha / w_max[live] ** (1.0 - alpha)
    s = s.astype(np.float32)
    # Extreme ratios can under/overflow float32; such channels fall back to no migration.
    s = np.where(np.isfinite(s) & (s > 0), s, np.float32(1.0))
    return SmoothingVector(alpha=float(alpha), s=s)


def apply_smoothing(x: np.ndarray, w: np.ndarray, sv: SmoothingVector) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float32)
    w = np.asarray(w, dtype=np.float32)
    if x.shape[-1] != len(sv) or w.shape[0] != len(sv):
        raise DimensionError(f"smoothing length {len(sv)} vs x {x.shape}, w {w.shape}")
    return (x / sv.s).astype(np.float32), (w * sv.s[:, None]).astype(np.float32)


def _sylvester(n: int) -> np.ndarray:
    h = np.ones((1, 1))
    while h.shape[0] < n:
        h = np.block([[h, h], [h, -h]])
    return h


@dataclass(frozen=True)
class HadamardTransform:
    dim: int
    block_size: int

    @property
    def is_identity(self) -> bool:
        return self.block_size == 1

    @property
    def n_blocks(self) -> int:
        return self.dim // self.block_size

    @cached_property
    def matrix(self) -> np.ndarray:
        """Dense ``dim x dim`` float32 matrix: ``n_blocks`` copies of the normalized block."""
        block = _sylvester(self.block_size) / math.sqrt(self.block_size)
        dense = np.kron(np.eye(self.n_blocks), block).astype(np.float32)
        dense.flags.writeable = False
        return dense

    def apply(self, x: np.ndarray, method: str = "fwht") -> np.ndarray:
        """``x @ H`` over the last axis."""
        x = np.asarray(x, dtype=np.float32)
        if x.shape[-1] != self.dim:
            raise DimensionError(f"last axis {x.shape[-1]} does not match Hadamard dim {self.dim}")
        if method == "dense":
            return (x.astype(np.float64) @ self.matrix.astype(np.float64)).astype(np.float32)
        if method != "fwht":
            raise InputError(f"unknown method {method!r}")
        return fwht(x, self.block_size)

    def apply_transpose_left(self, w: np.ndarray, method: str = "fwht") -> np.ndarray:
        """``H^T @ w`` over the first axis (H is symmetric, so this is ``H @ w``)."""
        w = np.asarray(w, dtype=np.float32)
        if w.shape[0] != self.dim:
            raise DimensionError(f"first axis {w.shape[0]} does not match Hadamard dim {self.dim}")
        if w.ndim == 1:
            return self.apply(w, method)
        return np.ascontiguousarray(self.apply(w.T, method).T)


def fwht(x: np.ndarray, block_size: int) -> np.ndarray:
    """Normalized fast Walsh-Hadamard transform on consecutive ``block_size`` chunks of the last axis.

    Butterflies run in float64 in natural (Sylvester) order, so the result equals
    ``x @ block_diag(H_b, ..., H_b) / sqrt(b)``.
    """
    if block_size & (block_size - 1) or block_size < 1:
        raise InputError(f"block size must be a power of two, got {block_size}")
    lead = x.shape[:-1]
    dim = x.shape[-1]
    if dim % block_size:
        raise DimensionError(f"block size {block_size} does not divide {dim}")
    a = x.astype(np.float64).reshape(-1, dim // block_size, block_size)
    h = 1
    while h < block_size:
        a = a.reshape(a.shape[0], a.shape[1], block_size // (2 * h), 2, h)
        lo = a[..., 0, :]
        hi = a[..., 1, :]
        a = np.stack([lo + hi, lo - hi], axis=-2).reshape(a.shape[0], a.shape[1], block_size)
        h *= 2
    a = a / math.sqrt(block_size)
    return a.reshape(*lead, dim).astype(np.float32)


def hadamard_matrix(dim: int) -> HadamardTransform:
    """Block-diagonal normalized Sylvester transform of size ``dim``.

    The block size is the largest power of two dividing ``dim``; odd ``dim``
    degenerates to the identity, which is reported with a ``RuntimeWarning``.
    """
    dim = int(dim)
    if dim < 1:
        raise DimensionError(f"Hadamard dim must be positive, got {dim}")
    block = dim & -dim
    if block == 1:
        warnings.warn(f"dim {dim} has no power-of-two factor > 1; Hadamard rotation is the identity",
                      RuntimeWarning, stacklevel=2)
    return HadamardTransform(dim=dim, block_size=block)


def rotate(x: np.ndarray, w: np.ndarray, h: HadamardTransform, method: str = "fwht"):
    """Return ``(x @ H, H^T @ w)``."""
    x = np.asarray(x, dtype=np.float32)
    w = np.asarray(w, dtype=np.float32)
    if x.shape[-1] != h.dim or w.shape[0] != h.dim:
        raise DimensionError(f"rotation dim {h.dim} vs x {x.shape}, w {w.shape}")
    return h.apply(x, method), h.apply_transpose_left(w, method)
