"""Diagnostics: channel absmax profiles, word-count statistics, terminal repetition."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Hashable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, InputError

__all__ = [
    "ChannelProfile",
    "WordCountStats",
    "RepetitionConfig",
    "RepetitionReport",
    "channel_profile",
    "tokenize",
    "word_count_stats",
    "detect_terminal_repetition",
    "repetition_ratio",
    "grouped_accuracy",
    "profile_csv",
    "word_count_csv",
    "repetition_csv",
]


@dataclass(frozen=True)
class ChannelProfile:
    absmax: np.ndarray
    max: float
    median: float
    ratio: float
    top_k: tuple[int, ...]


def channel_profile(w: np.ndarray, axis: int = 0, k: int = 5) -> ChannelProfile:
    """Absmax of each channel, where channels run along ``axis`` (0: one per row).

    ``ratio`` is max / median, ``inf`` when the median is zero.
    """
    w = np.asarray(w, dtype=np.float32)
    if w.ndim != 2:
        raise DimensionError(f"channel_profile needs a 2-D tensor, got shape {w.shape}")
    if axis not in (0, 1):
        raise ConfigError(f"axis must be 0 or 1, got {axis}")
    absmax = np.abs(w).max(axis=1 - axis)
    mx = float(absmax.max())
    med = float(np.median(absmax))
    if med > 0:
        ratio = mx / med
    else:
        ratio = math.inf if mx > 0 else 1.0
    top = tuple(int(i) for i in np.argsort(-absmax, kind="stable")[:k])
    return ChannelProfile(absmax=absmax, max=mx, median=med, ratio=ratio, top_k=top)


def tokenize(text: str) -> list[str]:
    return text.split()


@dataclass(frozen=True)
class WordCountStats:
    counts: tuple[int, ...]
    mean: float
    median: float
    p95: float

    @property
    def total(self) -> int:
        return sum(self.counts)


def word_count_stats(texts: Iterable[str]) -> WordCountStats:
    counts = tuple(len(tokenize(t)) for t in texts)
    if not counts:
        return WordCountStats((), 0.0, 0.0, 0.0)
    arr = np.asarray(counts, dtype=np.float64)
    return WordCountStats(counts, float(arr.mean()), float(np.median(arr)), float(np.percentile(arr, 95)))


@dataclass(frozen=True)
class RepetitionConfig:
    min_phrase: int = 1
    max_phrase: int = 32
    min_repeats: int = 3
    # False also accepts a run followed by unrelated trailing tokens.
    must_reach_end: bool = True

    def __post_init__(self):
        if not 1 <= self.min_phrase <= self.max_phrase:
            raise ConfigError("need 1 <= min_phrase <= max_phrase")
        if self.min_repeats < 2:
            raise ConfigError("min_repeats must be at least 2")


@dataclass(frozen=True)
class RepetitionReport:
    detected: bool
    phrase: tuple = ()
    repeats: int = 0
    tail_start: int = -1


def _copies(tokens: Sequence, end: int, p: int) -> int:
    """How many back-to-back copies of ``tokens[end-p:end]`` end at ``end``."""
    phrase = tokens[end - p : end]
    r = 1
    while (r + 1) * p <= end and tokens[end - (r + 1) * p : end - r * p] == phrase:
        r += 1
    return r


def detect_terminal_repetition(tokens: Sequence[Hashable], cfg: RepetitionConfig = RepetitionConfig()) -> RepetitionReport:
    """Find the shortest phrase repeated at least ``min_repeats`` times up to the last token.

    With ``must_reach_end=False`` the run may stop early; the run ending latest wins.
    """
    toks = list(tokens)
    n = len(toks)
    lowest = cfg.min_phrase * cfg.min_repeats
    ends = [n] if cfg.must_reach_end else range(n, lowest - 1, -1)
    for end in ends:
        for p in range(cfg.min_phrase, min(cfg.max_phrase, end // cfg.min_repeats) + 1):
            r = _copies(toks, end, p)
            if r >= cfg.min_repeats:
                return RepetitionReport(True, tuple(toks[end - p : end]), r, end - r * p)
    return RepetitionReport(False)


def repetition_ratio(corpus: Sequence[Sequence[Hashable]], cfg: RepetitionConfig = RepetitionConfig()) -> float:
    """Percentage of samples whose output ends in a repetitive tail."""
    if not corpus:
        raise InputError("repetition_ratio needs a nonempty corpus")
    hits = sum(detect_terminal_repetition(s, cfg).detected for s in corpus)
    return 100.0 * hits / len(corpus)


def grouped_accuracy(detected: Sequence[bool], passed: Sequence[bool]) -> dict[str, float | int]:
    """Mean pass rate (in percent) of repetitive vs non-repetitive samples."""
    if len(detected) != len(passed):
        raise InputError("detected and passed must have equal length")
    out: dict[str, float | int] = {}
    for label, flag in (("repetitive", True), ("non_repetitive", False)):
        group = [bool(p) for d, p in zip(detected, passed) if bool(d) == flag]
        out[f"{label}_count"] = len(group)
        out[f"{label}_accuracy"] = 100.0 * sum(group) / len(group) if group else math.nan
    return out


def _write(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def profile_csv(profile: ChannelProfile) -> str:
    rows = [("channel", "absmax")]
    rows += [(i, repr(float(v))) for i, v in enumerate(profile.absmax)]
    rows += [("summary_max", repr(profile.max)), ("summary_median", repr(profile.median)),
             ("summary_ratio", repr(profile.ratio))]
    return _write(rows)


def word_count_csv(stats: WordCountStats) -> str:
    rows = [("id", "count")] + list(enumerate(stats.counts))
    rows += [("summary_mean", repr(stats.mean)), ("summary_median", repr(stats.median)),
             ("summary_p95", repr(stats.p95))]
    return _write(rows)


def repetition_csv(reports: Sequence[RepetitionReport]) -> str:
    rows = [("id", "detected", "phrase_len", "repeats")]
    rows += [(i, int(r.detected), len(r.phrase), r.repeats) for i, r in enumerate(reports)]
    ratio = 100.0 * sum(r.detected for r in reports) / len(reports) if reports else 0.0
    rows.append(("summary_ratio", repr(ratio)))
    return _write(rows)
