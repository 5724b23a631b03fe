"""Symmetric scale computation, quantization, dequantization and int4 packing.

Scales follow ``s = 2 * max|x_R| / (2**n - 1)`` over each granularity region R,
and values map to ``clamp(round(x / s), -2**(n-1), 2**(n-1) - 1)`` with
round-half-away-from-zero. With this scale the largest positive element lands
on ``(2**n - 1) / 2`` (127.5 for n=8), rounds up to ``2**(n-1)`` and is clamped
one step down. The alternative ``s = max / (2**(n-1) - 1)`` avoids that, but is
not what is implemented here.

Region conventions for a 2-D tensor:

* ``PER_TENSOR``: one scale.
* ``PER_CHANNEL``: one scale per column. For ``Y = X @ W`` with ``W`` of shape
  [K, N] the columns are the output channels.
* ``PER_TOKEN``: one scale per row (activation rows are tokens).
* ``PER_GROUP``: contiguous runs of ``group_size`` rows within each column,
  giving a [K // group_size, N] scale grid.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .container import ContainerEntry
from .errors import ConfigError, DimensionError, RangeError

__all__ = [
    "Granularity",
    "QuantScheme",
    "ScaleSet",
    "QuantizedTensor",
    "QuantError",
    "compute_scale",
    "quantize",
    "quantize_tensor",
    "dequantize",
    "pack_int4",
    "unpack_int4",
    "quant_error",
    "to_entries",
    "from_entries",
    "ZERO_SCALE",
    "DEFAULT_GROUP_SIZE",
]

ZERO_SCALE = np.float32(1e-10)
DEFAULT_GROUP_SIZE = 128


class Granularity(str, enum.Enum):
    PER_TENSOR = "per_tensor"
    PER_CHANNEL = "per_channel"
    PER_TOKEN = "per_token"
    PER_GROUP = "per_group"


@dataclass(frozen=True)
class QuantScheme:
    bits: int = 8
    granularity: Granularity = Granularity.PER_TENSOR
    group_size: int = DEFAULT_GROUP_SIZE

    def __post_init__(self):
        if self.bits not in (4, 8):
            raise ConfigError(f"bits must be 4 or 8, got {self.bits}")
        object.__setattr__(self, "granularity", Granularity(self.granularity))
        if self.granularity is Granularity.PER_GROUP and self.group_size <= 0:
            raise ConfigError(f"group_size must be positive, got {self.group_size}")

    @property
    def qmin(self) -> int:
        return -(1 << (self.bits - 1))

    @property
    def qmax(self) -> int:
        return (1 << (self.bits - 1)) - 1

    @property
    def symmetric(self) -> bool:
        return True


@dataclass(frozen=True)
class ScaleSet:
    granularity: Granularity
    scales: np.ndarray
    group_size: int = 0

    def __post_init__(self):
        scales = np.asarray(self.scales, dtype=np.float32)
        if scales.size == 0 or not np.all(scales > 0) or not np.all(np.isfinite(scales)):
            raise ConfigError("scales must be finite and strictly positive")
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "granularity", Granularity(self.granularity))

    def expand(self, shape: tuple[int, ...]) -> np.ndarray:
        """Per-element scale array broadcastable against a tensor of ``shape``."""
        g = self.granularity
        s = self.scales
        if g is Granularity.PER_TENSOR:
            if s.size != 1:
                raise ConfigError(f"per-tensor scale set has {s.size} scales")
            return s.reshape((1,) * len(shape))
        rows, cols = _as_matrix_shape(shape, g)
        if g is Granularity.PER_CHANNEL:
            if s.shape != (cols,):
                raise ConfigError(f"expected {cols} channel scales, got shape {s.shape}")
            return s.reshape(1, cols)
        if g is Granularity.PER_TOKEN:
            if s.shape != (rows,):
                raise ConfigError(f"expected {rows} token scales, got shape {s.shape}")
            return s.reshape(rows, 1)
        gs = self.group_size
        if gs <= 0 or rows % gs:
            raise ConfigError(f"group_size {gs} does not divide axis of length {rows}")
        if s.shape != (rows // gs, cols):
            raise ConfigError(f"expected group scales {(rows // gs, cols)}, got {s.shape}")
        return np.repeat(s, gs, axis=0)


@dataclass(frozen=True)
class QuantizedTensor:
    """Integer payload plus scales. For 8 bits ``payload`` is an int8 array of
    ``shape``; for 4 bits it is the flat, low-nibble-first packed uint8 bytes."""

    scheme: QuantScheme
    shape: tuple[int, ...]
    payload: np.ndarray
    scales: ScaleSet

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        n = math.prod(self.shape)
        if self.scheme.bits == 8:
            payload = np.asarray(self.payload, dtype=np.int8).reshape(self.shape)
        else:
            payload = np.asarray(self.payload, dtype=np.uint8).reshape(-1)
            if payload.size != (n + 1) // 2:
                raise ConfigError(f"int4 payload has {payload.size} bytes, expected {(n + 1) // 2}")
        object.__setattr__(self, "payload", payload)

    @property
    def bits(self) -> int:
        return self.scheme.bits

    @property
    def nbytes(self) -> int:
        return int(self.payload.nbytes)

    def values(self) -> np.ndarray:
        """Integer values as an int8 array of ``shape`` (unpacks int4)."""
        if self.scheme.bits == 8:
            return self.payload
        return unpack_int4(self.payload, math.prod(self.shape)).reshape(self.shape)


@dataclass(frozen=True)
class QuantError:
    mse: float
    max_abs_err: float


def _as_matrix_shape(shape, granularity) -> tuple[int, int]:
    if len(shape) != 2:
        raise DimensionError(f"{granularity.value} quantization needs a 2-D tensor, got shape {tuple(shape)}")
    return int(shape[0]), int(shape[1])


def _region_absmax(x: np.ndarray, scheme: QuantScheme) -> np.ndarray:
    ax = np.abs(x)
    g = scheme.granularity
    if g is Granularity.PER_TENSOR:
        return np.array([ax.max()], dtype=np.float32)
    rows, cols = _as_matrix_shape(x.shape, g)
    if g is Granularity.PER_CHANNEL:
        return ax.max(axis=0)
    if g is Granularity.PER_TOKEN:
        return ax.max(axis=1)
    gs = scheme.group_size
    if rows % gs:
        raise ConfigError(f"group_size {gs} does not divide axis of length {rows}")
    return ax.reshape(rows // gs, gs, cols).max(axis=1)


def compute_scale(x: np.ndarray, scheme: QuantScheme) -> ScaleSet:
    """Per-region ``2 * absmax / (2**bits - 1)``, rounded up to float32.

    Regions whose scale is zero (all-zero, or underflowing) get 1e-10.
    """
    x = np.asarray(x, dtype=np.float32)
    if not np.all(np.isfinite(x)):
        raise RangeError("cannot compute scales of a non-finite tensor")
    absmax = _region_absmax(x, scheme).astype(np.float64)
    exact = 2.0 * absmax / ((1 << scheme.bits) - 1)
    scales = exact.astype(np.float32)
    # Narrow upward so |x| <= (2**n - 1)/2 * s holds in float32 and the clamp costs at most s/2.
    scales = np.where(scales.astype(np.float64) < exact, np.nextafter(scales, np.float32(np.inf)), scales)
    scales = np.where(scales > 0, scales, ZERO_SCALE).astype(np.float32)
    group_size = scheme.group_size if scheme.granularity is Granularity.PER_GROUP else 0
    return ScaleSet(scheme.granularity, scales, group_size)


def _round_half_away(v: np.ndarray) -> np.ndarray:
    return np.trunc(v + np.copysign(0.5, v))


def quantize(x: np.ndarray, scales: ScaleSet, scheme: QuantScheme) -> QuantizedTensor:
    x = np.asarray(x, dtype=np.float32)
    if scales.granularity is not scheme.granularity:
        raise ConfigError(f"scale set is {scales.granularity.value}, scheme is {scheme.granularity.value}")
    if scheme.granularity is Granularity.PER_GROUP and scales.group_size != scheme.group_size:
        raise ConfigError(f"scale group_size {scales.group_size} != scheme group_size {scheme.group_size}")
    ratio = (x / scales.expand(x.shape)).astype(np.float32)
    # Round in float64: adding 0.5 to a float32 ratio just below a half-way point can round up.
    q = np.clip(_round_half_away(ratio.astype(np.float64)), scheme.qmin, scheme.qmax).astype(np.int8)
    payload = q if scheme.bits == 8 else pack_int4(q.reshape(-1))
    return QuantizedTensor(scheme, x.shape, payload, scales)


def quantize_tensor(x: np.ndarray, scheme: QuantScheme) -> QuantizedTensor:
    """Calibrate scales on ``x`` itself and quantize it."""
    return quantize(x, compute_scale(x, scheme), scheme)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    s = q.scales.expand(q.shape)
    return (q.values().astype(np.float32) * s).astype(np.float32)


def pack_int4(values) -> np.ndarray:
    """Pack signed 4-bit values two per byte, element 2k in the low nibble.

    Odd lengths leave the final high nibble zero.
    """
    v = np.asarray(values).reshape(-1)
    if v.size and (v.min() < -8 or v.max() > 7):
        raise RangeError("int4 values must lie in [-8, 7]")
    nib = (v.astype(np.int16) & 0x0F).astype(np.uint8)
    if nib.size % 2:
        nib = np.concatenate([nib, np.zeros(1, dtype=np.uint8)])
    return (nib[0::2] | (nib[1::2] << 4)).astype(np.uint8)


def unpack_int4(packed, count: int) -> np.ndarray:
    """Inverse of :func:`pack_int4`: the first ``count`` values as int8."""
    if isinstance(packed, (bytes, bytearray, memoryview)):
        packed = np.frombuffer(packed, dtype=np.uint8)
    b = np.asarray(packed, dtype=np.uint8).reshape(-1)
    if count < 0 or count > 2 * b.size:
        raise RangeError(f"cannot unpack {count} values from {b.size} bytes")
    nib = np.empty(2 * b.size, dtype=np.int8)
    nib[0::2] = b & 0x0F
    nib[1::2] = b >> 4
    return ((nib ^ 8) - 8)[:count].astype(np.int8)


def quant_error(x: np.ndarray, q: QuantizedTensor) -> QuantError:
    x = np.asarray(x, dtype=np.float32)
    if x.shape != q.shape:
        raise DimensionError(f"shape mismatch: {x.shape} vs {q.shape}")
    diff = x.astype(np.float64) - dequantize(q).astype(np.float64)
    return QuantError(mse=float(np.mean(diff * diff)), max_abs_err=float(np.max(np.abs(diff))))


def to_entries(name: str, q: QuantizedTensor) -> dict[str, ContainerEntry]:
    """Container entries for ``q``: the payload and its ``<name>.scale`` companion."""
    gran = q.scheme.granularity.value
    gs = q.scales.group_size
    dtype = "i8" if q.bits == 8 else "i4p"
    return {
        name: ContainerEntry(dtype, q.shape, q.payload, gran, gs),
        f"{name}.scale": ContainerEntry("f32", q.scales.scales.shape, q.scales.scales, gran, gs),
    }


def from_entries(entries, name: str) -> QuantizedTensor:
    entry = entries[name]
    scale = entries[f"{name}.scale"]
    bits = {"i8": 8, "i4p": 4}.get(entry.dtype)
    if bits is None:
        raise ConfigError(f"entry {name!r} is {entry.dtype}, not a quantized payload")
    gran = Granularity(entry.granularity)
    gs = entry.group_size if gran is Granularity.PER_GROUP else DEFAULT_GROUP_SIZE
    scheme = QuantScheme(bits, gran, gs)
    scales = ScaleSet(gran, scale.data, entry.group_size)
    q = QuantizedTensor(scheme, entry.shape, entry.data, scales)
    q.scales.expand(q.shape)
    return q
