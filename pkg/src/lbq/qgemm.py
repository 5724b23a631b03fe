"""Integer GEMM kernels with a dequant epilogue, and the quantized linear layer.

All kernels accumulate exactly in int32 and only then convert to float32:
``y[i, j] = (float32(acc[i, j]) * sa[i]) * sw[j]``. Per-group W4A8 accumulates
each K-segment separately and sums the dequantized segments in ascending
group order.

The optimized W8A8 kernel tiles K and N and runs each tile product through
float32 BLAS on integer-valued operands. Tiles are at most ``OPT_TILE_K`` deep,
so every partial sum is bounded by ``128 * 128 * 512 = 2**23`` and is exact in
float32; the int32 accumulators therefore equal the reference bit for bit.

:func:`fp_buffer_meter` instruments the kernels: every floating-point buffer a
kernel or :func:`qlinear_forward` allocates is recorded by kind, which lets the
tests check that no weight matrix is ever expanded to floating point.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, InputError
from .quant import (
    Granularity,
    QuantizedTensor,
    QuantScheme,
    ScaleSet,
    compute_scale,
    quantize,
    unpack_int4,
)
from .transforms import HadamardTransform, SmoothingVector

__all__ = [
    "MAX_K",
    "FPBufferMeter",
    "fp_buffer_meter",
    "accumulate_w8a8_ref",
    "accumulate_w8a8_opt",
    "gemm_w8a8_ref",
    "gemm_w8a8_opt",
    "gemm_w4a8_ref",
    "QLinearLayer",
    "qlinear_forward",
]

# 128 * 128 * K must stay below 2**31.
MAX_K = 131071
OPT_TILE_K = 512
OPT_TILE_N = 256
W4_TILE_K = 256

_ACT_GRANULARITIES = (Granularity.PER_TOKEN, Granularity.PER_TENSOR)
_W8_GRANULARITIES = (Granularity.PER_CHANNEL, Granularity.PER_TENSOR)
_W4_GRANULARITIES = (Granularity.PER_CHANNEL, Granularity.PER_GROUP, Granularity.PER_TENSOR)


@dataclass
class FPBufferMeter:
    """Peak and total element counts of floating-point buffers, keyed by what they hold."""

    peak: dict[str, int] = field(default_factory=dict)
    total: dict[str, int] = field(default_factory=dict)

    def record(self, kind: str, elements: int) -> None:
        self.peak[kind] = max(self.peak.get(kind, 0), int(elements))
        self.total[kind] = self.total.get(kind, 0) + int(elements)

    def peak_of(self, kind: str) -> int:
        return self.peak.get(kind, 0)


_meters: list[FPBufferMeter] = []


@contextlib.contextmanager
def fp_buffer_meter():
    meter = FPBufferMeter()
    _meters.append(meter)
    try:
        yield meter
    finally:
        _meters.remove(meter)


def _record(kind: str, elements: int) -> None:
    for meter in _meters:
        meter.record(kind, elements)


def _check_pair(aq: QuantizedTensor, wq: QuantizedTensor, w_bits: int, w_grans) -> tuple[int, int, int]:
    if len(aq.shape) != 2 or len(wq.shape) != 2:
        raise DimensionError(f"kernels need 2-D operands, got {aq.shape} and {wq.shape}")
    m, k = aq.shape
    k2, n = wq.shape
    if k != k2:
        raise DimensionError(f"inner dimensions disagree: {aq.shape} x {wq.shape}")
    if k > MAX_K:
        raise ConfigError(f"K={k} exceeds the overflow-free bound {MAX_K}")
    if aq.bits != 8:
        raise ConfigError(f"activations must be int8, got {aq.bits}-bit")
    if aq.scheme.granularity not in _ACT_GRANULARITIES:
        raise ConfigError(f"activation scales must be per-token or per-tensor, got {aq.scheme.granularity.value}")
    if wq.bits != w_bits:
        raise ConfigError(f"kernel expects {w_bits}-bit weights, got {wq.bits}-bit")
    if wq.scheme.granularity not in w_grans:
        raise ConfigError(f"weight granularity {wq.scheme.granularity.value} not supported by this kernel")
    return m, k, n


def _row_scales(aq: QuantizedTensor, m: int) -> np.ndarray:
    return np.broadcast_to(aq.scales.scales.reshape(-1, 1), (m, 1)) if aq.scales.scales.size == 1 \
        else aq.scales.scales.reshape(m, 1)


def _col_scales(scales: np.ndarray, n: int) -> np.ndarray:
    return np.broadcast_to(scales.reshape(1, -1), (1, n)) if scales.size == 1 else scales.reshape(1, n)


def _epilogue(acc: np.ndarray, sa: np.ndarray, sw: np.ndarray) -> np.ndarray:
    _record("output", acc.size)
    return (acc.astype(np.float32) * sa) * sw


def accumulate_w8a8_ref(aq: QuantizedTensor, wq: QuantizedTensor) -> np.ndarray:
    """Exact int32 accumulators ``aq.values() @ wq.values()``."""
    _check_pair(aq, wq, 8, _W8_GRANULARITIES)
    return np.matmul(aq.values().astype(np.int32), wq.values().astype(np.int32))


def accumulate_w8a8_opt(aq: QuantizedTensor, wq: QuantizedTensor,
                        tile_k: int = OPT_TILE_K, tile_n: int = OPT_TILE_N) -> np.ndarray:
    m, k, n = _check_pair(aq, wq, 8, _W8_GRANULARITIES)
    if not 0 < tile_k <= OPT_TILE_K:
        raise ConfigError(f"tile_k must lie in (0, {OPT_TILE_K}] for exact float32 partial sums")
    a = aq.values().astype(np.float32)
    _record("activation", a.size)
    w = wq.values()
    acc = np.zeros((m, n), dtype=np.int32)
    for n0 in range(0, n, tile_n):
        n1 = min(n, n0 + tile_n)
        for k0 in range(0, k, tile_k):
            k1 = min(k, k0 + tile_k)
            w_tile = w[k0:k1, n0:n1].astype(np.float32)
            _record("weight", w_tile.size)
            acc[:, n0:n1] += (a[:, k0:k1] @ w_tile).astype(np.int32)
    return acc


def gemm_w8a8_ref(aq: QuantizedTensor, wq: QuantizedTensor) -> np.ndarray:
    acc = accumulate_w8a8_ref(aq, wq)
    m, n = acc.shape
    return _epilogue(acc, _row_scales(aq, m), _col_scales(wq.scales.scales, n))


def gemm_w8a8_opt(aq: QuantizedTensor, wq: QuantizedTensor) -> np.ndarray:
    acc = accumulate_w8a8_opt(aq, wq)
    m, n = acc.shape
    return _epilogue(acc, _row_scales(aq, m), _col_scales(wq.scales.scales, n))


def _unpack_rows(wq: QuantizedTensor, k0: int, k1: int) -> np.ndarray:
    """Sign-extend rows ``k0:k1`` of a packed int4 [K, N] weight straight from its bytes."""
    n = wq.shape[1]
    e0, e1 = k0 * n, k1 * n
    b0, b1 = e0 // 2, (e1 + 1) // 2
    vals = unpack_int4(wq.payload[b0:b1], 2 * (b1 - b0))
    return vals[e0 - 2 * b0 : e0 - 2 * b0 + (e1 - e0)].reshape(k1 - k0, n)


def gemm_w4a8_ref(aq: QuantizedTensor, wq: QuantizedTensor) -> np.ndarray:
    m, k, n = _check_pair(aq, wq, 4, _W4_GRANULARITIES)
    a = aq.values().astype(np.int32)
    sa = _row_scales(aq, m)
    if wq.scheme.granularity is Granularity.PER_GROUP:
        g = wq.scales.group_size
        if g <= 0 or k % g:
            raise ConfigError(f"group_size {g} does not align with K={k}")
        y = np.zeros((m, n), dtype=np.float32)
        for gi, k0 in enumerate(range(0, k, g)):
            w_blk = _unpack_rows(wq, k0, k0 + g).astype(np.int32)
            acc = np.matmul(a[:, k0 : k0 + g], w_blk)
            y = y + _epilogue(acc, sa, wq.scales.scales[gi].reshape(1, n))
        return y
    acc = np.zeros((m, n), dtype=np.int32)
    for k0 in range(0, k, W4_TILE_K):
        k1 = min(k, k0 + W4_TILE_K)
        acc += np.matmul(a[:, k0:k1], _unpack_rows(wq, k0, k1).astype(np.int32))
    return _epilogue(acc, sa, _col_scales(wq.scales.scales, n))


@dataclass(frozen=True)
class QLinearLayer:
    """A linear layer ``y = x @ W (+ bias)`` whose weight is stored quantized.

    ``weight`` is the already-transformed weight (``H^T S W`` when smoothing and
    rotation are configured). A float32 ``weight`` is the transform-only mode:
    the activation-side transforms are replayed but nothing is quantized.
    ``act_scale`` selects static per-tensor activation quantization; without it
    activations are quantized per token on every call.
    """

    weight: QuantizedTensor | np.ndarray
    smoothing: SmoothingVector | None = None
    hadamard: HadamardTransform | None = None
    act_scale: float | None = None
    bias: np.ndarray | None = None
    kernel: str = "ref"

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]

    @property
    def quantized(self) -> bool:
        return isinstance(self.weight, QuantizedTensor)


def _quantize_activations(x: np.ndarray, layer: QLinearLayer) -> QuantizedTensor:
    if layer.act_scale is None:
        scheme = QuantScheme(8, Granularity.PER_TOKEN)
        return quantize(x, compute_scale(x, scheme), scheme)
    scheme = QuantScheme(8, Granularity.PER_TENSOR)
    return quantize(x, ScaleSet(Granularity.PER_TENSOR, np.array([layer.act_scale], dtype=np.float32)), scheme)


def qlinear_forward(layer: QLinearLayer, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2:
        raise DimensionError(f"qlinear_forward expects [M, K] activations, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InputError("activations contain NaN or Inf")
    k = layer.in_features
    if x.shape[1] != k:
        raise DimensionError(f"activation width {x.shape[1]} does not match layer K={k}")
    if layer.smoothing is not None:
        if len(layer.smoothing) != k:
            raise ConfigError(f"smoothing length {len(layer.smoothing)} does not match K={k}")
        x = (x / layer.smoothing.s).astype(np.float32)
        _record("activation", x.size)
    if layer.hadamard is not None:
        if layer.hadamard.dim != k:
            raise ConfigError(f"Hadamard dim {layer.hadamard.dim} does not match K={k}")
        x = layer.hadamard.apply(x)
        _record("activation", x.size)

    if not layer.quantized:
        y = (x @ np.asarray(layer.weight, dtype=np.float32)).astype(np.float32)
    else:
        aq = _quantize_activations(x, layer)
        wq = layer.weight
        if wq.bits == 8:
            y = gemm_w8a8_opt(aq, wq) if layer.kernel == "opt" else gemm_w8a8_ref(aq, wq)
        else:
            y = gemm_w4a8_ref(aq, wq)
    if layer.bias is not None:
        y = y + np.asarray(layer.bias, dtype=np.float32)
    return y.astype(np.float32)


def payload_bytes(kernel: str, m: int, k: int, n: int, group_size: int = 0) -> dict[str, int]:
    """Bytes at rest for one GEMM: weights, activations and scales for ``kernel``."""
    if kernel == "f32":
        return {"weight_bytes": 4 * k * n, "act_bytes": 4 * m * k, "scale_bytes": 0}
    act = m * k
    act_scales = 4 * m
    if kernel in ("w8a8_ref", "w8a8_opt"):
        return {"weight_bytes": k * n, "act_bytes": act, "scale_bytes": 4 * n + act_scales}
    if kernel == "w4a8_ref":
        groups = k // group_size if group_size else 1
        return {"weight_bytes": math.ceil(k * n / 2), "act_bytes": act, "scale_bytes": 4 * n * groups + act_scales}
    raise ConfigError(f"unknown kernel {kernel!r}")
