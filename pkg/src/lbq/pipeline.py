"""Calibration and an end-to-end toy decoder whose linear layers run FP32 or quantized.

The toy model is a pre-norm decoder: RMS-normalized residual blocks with causal
multi-head attention and a GELU MLP, fixed sinusoidal positions, and a tied
embedding / output projection. Only the six projections per block
(``layer{i}.attn_q|attn_k|attn_v|attn_o|mlp_up|mlp_down``) are quantizable;
embeddings, norms and attention scores stay FP32.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .container import ContainerEntry, read_container, write_container
from .errors import ConfigError, FormatError, InputError
from .qgemm import QLinearLayer, qlinear_forward
from .quant import Granularity, QuantError, QuantScheme, from_entries, quant_error, quantize_tensor, to_entries
from .tensor import rand_tensor
from .transforms import DEFAULT_ALPHA, SmoothingVector, apply_smoothing, compute_smoothing, hadamard_matrix

__all__ = [
    "ToyModelConfig",
    "ToyModel",
    "QuantizedToyModel",
    "LayerStats",
    "CalibrationStats",
    "LINEAR_KINDS",
    "EOS_TOKEN",
    "init_toy_model",
    "calibrate",
    "calibration_batches",
    "text_batches",
    "quantize_model",
    "forward",
    "generate",
    "save_checkpoint",
    "load_checkpoint",
]

LINEAR_KINDS = ("attn_q", "attn_k", "attn_v", "attn_o", "mlp_up", "mlp_down")
EOS_TOKEN = 0
SCHEMES = ("w8a8", "w4a8", "none")
_NORM_EPS = 1e-6


@dataclass(frozen=True)
class ToyModelConfig:
    vocab: int = 256
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq: int = 128
    seed: int = 0
    # Input channels per linear layer whose weight rows get multiplied by outlier_factor.
    n_outliers: int = 0
    outlier_factor: float = 100.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        for name in ("d_model", "d_ff"):
            dim = getattr(self, name)
            if dim <= 0 or dim % 2:
                raise ConfigError(f"{name}={dim} must be even so a Hadamard block of size >= 2 applies")
        if self.vocab <= EOS_TOKEN + 1 or self.max_seq <= 0 or self.n_layers <= 0:
            raise ConfigError("vocab, max_seq and n_layers must be positive")

    def linear_shapes(self) -> dict[str, tuple[int, int]]:
        d, f = self.d_model, self.d_ff
        shapes = {"attn_q": (d, d), "attn_k": (d, d), "attn_v": (d, d), "attn_o": (d, d),
                  "mlp_up": (d, f), "mlp_down": (f, d)}
        return {f"layer{i}.{kind}": shapes[kind] for i in range(self.n_layers) for kind in LINEAR_KINDS}


def _sinusoid(max_seq: int, d: int) -> np.ndarray:
    pos = np.arange(max_seq)[:, None]
    freq = np.exp(-math.log(10000.0) * np.arange(0, d, 2) / d)
    table = np.zeros((max_seq, d))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return table.astype(np.float32)


@dataclass
class ToyModel:
    config: ToyModelConfig
    embed: np.ndarray
    norms: dict[str, np.ndarray]
    linears: dict[str, np.ndarray]

    def linear(self, name: str, x: np.ndarray) -> np.ndarray:
        return (x @ self.linears[name]).astype(np.float32)

    @property
    def linear_names(self) -> list[str]:
        return list(self.config.linear_shapes())


@dataclass
class QuantizedToyModel(ToyModel):
    qlinears: dict[str, QLinearLayer] = field(default_factory=dict)
    scheme: str = "w8a8"
    options: dict = field(default_factory=dict)

    def linear(self, name: str, x: np.ndarray) -> np.ndarray:
        return qlinear_forward(self.qlinears[name], x)


def init_toy_model(config: ToyModelConfig = ToyModelConfig()) -> ToyModel:
    """Seeded Gaussian weights (std 1/sqrt(fan_in)), unit norm gains, optional outlier rows."""
    seed = config.seed
    embed = np.asarray(rand_tensor((config.vocab, config.d_model), seed, "normal"))
    norms = {}
    for i in range(config.n_layers):
        norms[f"layer{i}.norm_attn"] = np.ones(config.d_model, dtype=np.float32)
        norms[f"layer{i}.norm_mlp"] = np.ones(config.d_model, dtype=np.float32)
    norms["final_norm"] = np.ones(config.d_model, dtype=np.float32)
    linears = {}
    for idx, (name, (k, n)) in enumerate(config.linear_shapes().items()):
        sub = (seed * 1_000_003 + 17 * (idx + 1)) % 2**64
        w = np.asarray(rand_tensor((k, n), sub, "normal"), dtype=np.float64) / math.sqrt(k)
        if config.n_outliers:
            picks = rand_tensor((config.n_outliers,), sub ^ 0x5EED, "uniform")
            channels = np.unique(((np.asarray(picks, dtype=np.float64) + 1.0) / 2.0 * k).astype(int) % k)
            w[channels, :] *= config.outlier_factor
        linears[name] = w.astype(np.float32)
    return ToyModel(config=config, embed=embed.astype(np.float32), norms=norms, linears=linears)


def _rmsnorm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    ms = np.mean(x.astype(np.float64) ** 2, axis=-1, keepdims=True)
    return (x / np.sqrt(ms + _NORM_EPS) * gain).astype(np.float32)


def _gelu(x: np.ndarray) -> np.ndarray:
    return (0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))).astype(np.float32)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


Observer = Callable[[str, np.ndarray], None]


def _check_tokens(model: ToyModel, tokens) -> np.ndarray:
    toks = np.asarray(tokens, dtype=np.int64).reshape(-1)
    cfg = model.config
    if toks.size == 0:
        raise InputError("token sequence is empty")
    if toks.size > cfg.max_seq:
        raise InputError(f"sequence length {toks.size} exceeds max_seq {cfg.max_seq}")
    if toks.min() < 0 or toks.max() >= cfg.vocab:
        raise InputError(f"token ids must lie in [0, {cfg.vocab})")
    return toks


def forward(model: ToyModel, tokens, observer: Observer | None = None) -> np.ndarray:
    """Logits [len, vocab]. ``observer(name, x)`` sees every linear layer's FP32 input."""
    toks = _check_tokens(model, tokens)
    cfg = model.config
    t = toks.size
    heads, dh = cfg.n_heads, cfg.d_model // cfg.n_heads

    def lin(name, x):
        if observer is not None:
            observer(name, x)
        return model.linear(name, x)

    h = model.embed[toks] + _sinusoid(cfg.max_seq, cfg.d_model)[:t]
    mask = np.triu(np.full((t, t), -np.inf, dtype=np.float32), k=1)
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        a = _rmsnorm(h, model.norms[p + "norm_attn"])
        q = lin(p + "attn_q", a).reshape(t, heads, dh).transpose(1, 0, 2)
        k = lin(p + "attn_k", a).reshape(t, heads, dh).transpose(1, 0, 2)
        v = lin(p + "attn_v", a).reshape(t, heads, dh).transpose(1, 0, 2)
        scores = q @ k.transpose(0, 2, 1) / np.float32(math.sqrt(dh)) + mask
        ctx = (_softmax(scores) @ v).transpose(1, 0, 2).reshape(t, cfg.d_model).astype(np.float32)
        h = h + lin(p + "attn_o", ctx)
        m = _rmsnorm(h, model.norms[p + "norm_mlp"])
        h = h + lin(p + "mlp_down", _gelu(lin(p + "mlp_up", m)))
    out = _rmsnorm(h, model.norms["final_norm"])
    return (out @ model.embed.T).astype(np.float32)


def generate(model: ToyModel, prompt, max_new: int, greedy: bool = True) -> list[int]:
    """Greedy decoding; stops after ``max_new`` tokens, at EOS (kept), or at ``max_seq``."""
    if not greedy:
        raise ConfigError("only greedy decoding is supported")
    seq = [int(t) for t in np.asarray(prompt, dtype=np.int64).reshape(-1)]
    if not seq:
        raise InputError("prompt is empty")
    _check_tokens(model, seq)
    for _ in range(max_new):
        if len(seq) >= model.config.max_seq:
            break
        nxt = int(np.argmax(forward(model, seq)[-1]))
        seq.append(nxt)
        if nxt == EOS_TOKEN:
            break
    return seq


@dataclass
class LayerStats:
    channel_absmax: np.ndarray
    tensor_absmax: float
    count: int

    def merge(self, other: "LayerStats") -> "LayerStats":
        if self.channel_absmax.shape != other.channel_absmax.shape:
            raise ConfigError("cannot merge stats of different widths")
        return LayerStats(np.maximum(self.channel_absmax, other.channel_absmax),
                          max(self.tensor_absmax, other.tensor_absmax), self.count + other.count)


@dataclass
class CalibrationStats:
    """Per-layer input-activation absmax ("count" is the number of rows observed)."""

    layers: dict[str, LayerStats] = field(default_factory=dict)

    def observe(self, name: str, x: np.ndarray) -> None:
        x = np.abs(np.asarray(x, dtype=np.float32).reshape(-1, x.shape[-1]))
        stats = LayerStats(x.max(axis=0), float(x.max()), x.shape[0])
        prev = self.layers.get(name)
        self.layers[name] = stats if prev is None else prev.merge(stats)

    def merge(self, other: "CalibrationStats") -> "CalibrationStats":
        out = dict(self.layers)
        for name, stats in other.layers.items():
            out[name] = out[name].merge(stats) if name in out else stats
        return CalibrationStats(out)

    def __getitem__(self, name: str) -> LayerStats:
        return self.layers[name]

    def __contains__(self, name: str) -> bool:
        return name in self.layers


def calibrate(model: ToyModel, batches: Iterable[Sequence[int]]) -> CalibrationStats:
    """Run the FP32 model over ``batches`` and record each linear layer's input absmax."""
    batches = list(batches)
    if not batches:
        raise InputError("calibration needs at least one batch")
    stats = CalibrationStats()
    for tokens in batches:
        forward(model, tokens, observer=stats.observe)
    return stats


def calibration_batches(config: ToyModelConfig, n: int = 16, length: int = 128, seed: int = 0) -> list[list[int]]:
    """Seeded random token sequences (ids 1..vocab-1, avoiding EOS)."""
    length = min(length, config.max_seq)
    u = np.asarray(rand_tensor((n, length), seed, "uniform"), dtype=np.float64)
    ids = 1 + ((u + 1.0) / 2.0 * (config.vocab - 1)).astype(np.int64) % (config.vocab - 1)
    return ids.tolist()


def text_batches(text: str, config: ToyModelConfig, length: int = 128) -> list[list[int]]:
    """Token sequences from UTF-8 bytes of ``text`` (folded into the vocabulary)."""
    data = [b % config.vocab for b in text.encode("utf-8")]
    length = min(length, config.max_seq)
    batches = [data[i : i + length] for i in range(0, len(data), length)]
    return [b for b in batches if b]


def _weight_scheme(scheme: str, group_size: int | None) -> QuantScheme:
    if scheme == "w8a8":
        if group_size:
            raise ConfigError("group-wise scales are only offered for w4a8")
        return QuantScheme(8, Granularity.PER_CHANNEL)
    if scheme == "w4a8":
        if group_size:
            return QuantScheme(4, Granularity.PER_GROUP, group_size)
        return QuantScheme(4, Granularity.PER_CHANNEL)
    raise ConfigError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")


def quantize_model(model: ToyModel, scheme: str, stats: CalibrationStats | None = None, *,
                   smooth_alpha: float | None = None, hadamard: bool = False,
                   group_size: int | None = None, layers: Iterable[str] | None = None,
                   kernel: str = "ref") -> QuantizedToyModel:
    """Smooth (using ``stats``), rotate, then quantize every linear layer.

    ``scheme="none"`` applies only the transforms and keeps FP32 weights. ``layers``
    restricts the transforms to the named layers; quantization always covers all.
    """
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    names = model.linear_names
    targets = set(names if layers is None else layers)
    unknown = targets - set(names)
    if unknown:
        raise ConfigError(f"unknown layer names {sorted(unknown)}")
    if smooth_alpha is not None:
        missing = [n for n in names if n in targets and (stats is None or n not in stats)]
        if missing:
            raise ConfigError(f"calibration stats missing for layers {missing}")
    wscheme = None if scheme == "none" else _weight_scheme(scheme, group_size)

    qlinears = {}
    for name in names:
        w = model.linears[name]
        sv = None
        rot = None
        if name in targets and smooth_alpha is not None:
            sv = compute_smoothing(stats[name].channel_absmax, w, smooth_alpha)
            _, w = apply_smoothing(np.zeros((1, w.shape[0]), np.float32), w, sv)
        if name in targets and hadamard:
            rot = hadamard_matrix(w.shape[0])
            w = rot.apply_transpose_left(w)
        weight = w if wscheme is None else quantize_tensor(w, wscheme)
        qlinears[name] = QLinearLayer(weight=weight, smoothing=sv, hadamard=rot, kernel=kernel)
    options = {"smooth_alpha": smooth_alpha, "hadamard": bool(hadamard), "group_size": group_size or 0,
               "layers": sorted(targets)}
    return QuantizedToyModel(config=model.config, embed=model.embed, norms=dict(model.norms),
                             linears={}, qlinears=qlinears, scheme=scheme, options=options)


def layer_errors(model: ToyModel, qmodel: QuantizedToyModel) -> dict[str, QuantError]:
    """Reconstruction error of each stored weight against the transformed FP32 weight it encodes."""
    out = {}
    for name, layer in qmodel.qlinears.items():
        if not layer.quantized:
            continue
        w = model.linears[name]
        if layer.smoothing is not None:
            w = (w * layer.smoothing.s[:, None]).astype(np.float32)
        if layer.hadamard is not None:
            w = layer.hadamard.apply_transpose_left(w)
        out[name] = quant_error(w, layer.weight)
    return out


def save_checkpoint(model: ToyModel, path) -> None:
    """Write an FP32 or quantized toy model into an LBQ1 container."""
    entries: dict[str, ContainerEntry] = {"embed": ContainerEntry("f32", model.embed.shape, model.embed)}
    for name, gain in model.norms.items():
        entries[name] = ContainerEntry("f32", gain.shape, gain)
    meta: dict = {"config": asdict(model.config), "kind": "fp32"}
    if isinstance(model, QuantizedToyModel):
        meta.update(kind="quantized", scheme=model.scheme, options=model.options, layers={})
        for name, layer in model.qlinears.items():
            info = {"smooth_alpha": None, "hadamard_block": 0}
            if layer.quantized:
                entries.update(to_entries(name, layer.weight))
            else:
                w = np.asarray(layer.weight, dtype=np.float32)
                entries[name] = ContainerEntry("f32", w.shape, w)
            if layer.smoothing is not None:
                entries[f"{name}.smooth"] = ContainerEntry("f32", (len(layer.smoothing),), layer.smoothing.s)
                info["smooth_alpha"] = layer.smoothing.alpha
            if layer.hadamard is not None:
                info["hadamard_block"] = layer.hadamard.block_size
            meta["layers"][name] = info
    else:
        for name, w in model.linears.items():
            entries[name] = ContainerEntry("f32", w.shape, w)
    write_container(path, entries, meta)


def load_checkpoint(path) -> ToyModel:
    container = read_container(path)
    meta = container.metadata
    entries = container.entries
    try:
        config = ToyModelConfig(**meta["config"])
        embed = entries["embed"].data
        norms = {name: entries[name].data for name in entries
                 if name == "final_norm" or name.endswith((".norm_attn", ".norm_mlp"))}
        names = list(config.linear_shapes())
        if meta.get("kind") != "quantized":
            return ToyModel(config, embed, norms, {n: entries[n].data for n in names})
        qlinears = {}
        for name in names:
            info = meta["layers"][name]
            entry = entries[name]
            weight = entry.data if entry.dtype == "f32" else from_entries(entries, name)
            sv = None
            if info.get("smooth_alpha") is not None:
                sv = SmoothingVector(info["smooth_alpha"], entries[f"{name}.smooth"].data)
            rot = None
            if info.get("hadamard_block"):
                rot = hadamard_matrix(entry.shape[0])
                if rot.block_size != info["hadamard_block"]:
                    raise FormatError(f"{name}: recorded Hadamard block {info['hadamard_block']} "
                                      f"does not match dim {entry.shape[0]}")
            qlinears[name] = QLinearLayer(weight=weight, smoothing=sv, hadamard=rot)
    except KeyError as exc:
        raise FormatError(f"checkpoint is missing {exc}") from exc
    return QuantizedToyModel(config, embed, norms, {}, qlinears=qlinears, scheme=meta["scheme"],
                             options=meta.get("options", {}))
