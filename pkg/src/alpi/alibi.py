"""
ALiBi positional biases with linear position interpolation.

Each head j adds ``-m_j * (i - j)`` to the pre-softmax score of query ``i``
against key ``j``. When the inference length ``L'`` exceeds the trained
length ``L`` the slopes are multiplied by ``L / L'`` so that the largest
distance seen at inference maps back into the bias range seen in training.

Positions are 1-indexed in the public API (query ``i`` sees keys ``1..i``);
arrays are 0-indexed as usual.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "MODES",
    "SlopeSet",
    "PiConfig",
    "BiasTensor",
    "compute_slopes",
    "scale_factor",
    "scaled_slopes",
    "bias_row",
    "build_bias_matrix",
    "attention",
    "decode_bias_row",
]

MODES = ("baseline", "fixed", "per_position")

# masked (future) entries; softmax gives them exactly zero weight
MASKED = -math.inf


def _check_positive_int(name: str, value: int) -> None:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    if value < 1:
        raise ValueError(f"{name} must be >= 1, got {value}")


def normalize_mode(mode: str) -> str:
    """Accept ``per-position`` (CLI spelling) as well as ``per_position``."""
    m = mode.replace("-", "_")
    if m not in MODES:
        raise ValueError(f"unknown scaling mode {mode!r}; expected one of {MODES}")
    return m


@dataclass(frozen=True)
class SlopeSet:
    """Per-head ALiBi slopes, head 1 first."""

    slopes: tuple[float, ...]

    def __post_init__(self):
        s = tuple(float(x) for x in self.slopes)
        if not s:
            raise ValueError("a SlopeSet needs at least one head")
        if any(not (x > 0.0) or not math.isfinite(x) for x in s):
            raise ValueError("slopes must be finite and strictly positive")
        if any(b >= a for a, b in zip(s, s[1:])):
            raise ValueError("slopes must be strictly decreasing in head index")
        object.__setattr__(self, "slopes", s)

    @property
    def n_heads(self) -> int:
        return len(self.slopes)

    def __len__(self) -> int:
        return len(self.slopes)

    def __getitem__(self, idx):
        return self.slopes[idx]

    def as_array(self) -> np.ndarray:
        return np.array(self.slopes, dtype=np.float64)


def compute_slopes(n_heads: int) -> SlopeSet:
    """Geometric slopes ``m_j = r**j`` with ``r = 2**(-8/n_heads)``.

    For power-of-two head counts this is the usual ALiBi schedule, e.g.
    8 heads give ``1/2, 1/4, ..., 1/256``.
    """
    _check_positive_int("n_heads", n_heads)
    ratio = 2.0 ** (-8.0 / n_heads)
    return SlopeSet(tuple(ratio**j for j in range(1, n_heads + 1)))


def scale_factor(train_len: int, infer_len: int) -> float:
    """``train_len / infer_len`` when ``infer_len > train_len``, else 1."""
    _check_positive_int("train_len", train_len)
    _check_positive_int("infer_len", infer_len)
    if infer_len > train_len:
        return train_len / infer_len
    return 1.0


@dataclass(frozen=True)
class PiConfig:
    """Slope-rescaling configuration.

    ``fixed`` applies one factor ``L / L'`` to every query row of a sample
    whose (final) length ``L'`` is known up front. ``per_position`` uses
    ``min(1, L / i)`` for query row ``i``, which needs no target length and
    is what streaming generation uses. ``baseline`` never rescales.
    """

    train_len: int
    infer_len: int
    mode: str = "fixed"
    scale: float = field(init=False)

    def __post_init__(self):
        _check_positive_int("train_len", self.train_len)
        _check_positive_int("infer_len", self.infer_len)
        mode = normalize_mode(self.mode)
        object.__setattr__(self, "mode", mode)
        if mode == "baseline":
            scale = 1.0
        else:
            scale = scale_factor(self.train_len, self.infer_len)
        object.__setattr__(self, "scale", scale)

    @classmethod
    def baseline(cls, train_len: int, infer_len: int | None = None) -> "PiConfig":
        return cls(train_len, infer_len or train_len, "baseline")

    def row_scale(self, query_pos: int) -> float:
        """Scale applied to the slopes for 1-indexed query row ``query_pos``."""
        if self.mode == "per_position":
            return scale_factor(self.train_len, query_pos)
        return self.scale

    def row_scales(self, seq_len: int) -> np.ndarray:
        return np.array([self.row_scale(i) for i in range(1, seq_len + 1)], dtype=np.float64)


def scaled_slopes(slopes: SlopeSet, cfg: PiConfig) -> SlopeSet:
    """Slopes multiplied by ``cfg.scale`` (order and positivity preserved)."""
    return SlopeSet(tuple(m * cfg.scale for m in slopes.slopes))


def bias_row(query_pos: int, slope: float) -> np.ndarray:
    """Bias of query ``query_pos`` against keys ``1..query_pos``.

    >>> bias_row(3, 1.0).tolist()
    [-2.0, -1.0, 0.0]
    """
    _check_positive_int("query_pos", query_pos)
    dist = np.arange(query_pos - 1, -1, -1, dtype=np.float64)
    row = -(slope * dist)
    row[-1] = 0.0  # avoid -0.0
    return row


@dataclass(frozen=True, eq=False)
class BiasTensor:
    """Causal bias matrices, shape ``(n_heads, seq_len, seq_len)``.

    Entries above the diagonal are ``-inf``.
    """

    values: np.ndarray

    @property
    def n_heads(self) -> int:
        return self.values.shape[0]

    @property
    def seq_len(self) -> int:
        return self.values.shape[1]

    @property
    def allowed(self) -> np.ndarray:
        """Boolean ``(seq_len, seq_len)`` mask of attendable entries."""
        return np.tril(np.ones((self.seq_len, self.seq_len), dtype=bool))

    def head(self, h: int) -> np.ndarray:
        return self.values[h]

    def to_csv(self, directory: str | Path, prefix: str = "bias_head") -> list[Path]:
        """Dump one CSV per head; masked cells are written as empty fields."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for h in range(self.n_heads):
            path = directory / f"{prefix}{h + 1}.csv"
            with open(path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                for row in self.values[h]:
                    w.writerow(["" if np.isneginf(x) else repr(float(x)) for x in row])
            paths.append(path)
        return paths


def build_bias_matrix(seq_len: int, slopes: SlopeSet, cfg: PiConfig) -> BiasTensor:
    """Per-head causal bias with slopes rescaled according to ``cfg``.

    Entry ``(h, i, j)`` for ``j <= i`` is ``-(m_h * s_i) * (i - j)`` where
    ``s_i`` is the row scale (constant except in ``per_position`` mode).
    """
    _check_positive_int("seq_len", seq_len)
    pos = np.arange(seq_len)
    dist = (pos[:, None] - pos[None, :]).astype(np.float64)
    effective = slopes.as_array()[:, None] * cfg.row_scales(seq_len)[None, :]  # (H, T)
    values = -(effective[:, :, None] * dist[None, :, :])
    values[:, ~np.tril(np.ones((seq_len, seq_len), dtype=bool))] = MASKED
    values[:, pos, pos] = 0.0
    return BiasTensor(values)


def decode_bias_row(step: int, cache_len: int, slope: float, cfg: PiConfig) -> np.ndarray:
    """Bias row for the query at decoding step ``step`` (1-indexed).

    In ``fixed`` mode the scale stays pinned to ``cfg`` (``L / target_len``)
    for the whole generation; ``per_position`` recomputes ``min(1, L/t)``.
    """
    _check_positive_int("step", step)
    if cache_len != step:
        raise RuntimeError(
            f"KV cache holds {cache_len} keys but decoding step is {step}; "
            "the query must attend to exactly `step` keys"
        )
    return bias_row(step, slope * cfg.row_scale(step))


def _stable_softmax(scores: np.ndarray) -> np.ndarray:
    peak = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - peak)
    return e / e.sum(axis=-1, keepdims=True)


def attention(
    queries: np.ndarray,
    keys: np.ndarray,
    values: np.ndarray,
    bias: np.ndarray,
    *,
    scale_qk: bool = True,
    return_weights: bool = False,
):
    """Single-head biased attention.

    ``queries`` is ``(Tq, d)``, ``keys``/``values`` are ``(Tk, d)`` with
    ``Tk >= Tq`` and ``bias`` is ``(Tq, Tk)``. ``-inf`` bias entries are
    excluded from the normalisation. Each row needs at least one finite entry.
    """
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    k = np.atleast_2d(np.asarray(keys, dtype=np.float64))
    v = np.atleast_2d(np.asarray(values, dtype=np.float64))
    b = np.atleast_2d(np.asarray(bias, dtype=np.float64))
    if q.shape[1] < 1:
        raise ValueError("head_dim must be >= 1")
    if k.shape != v.shape or k.shape[1] != q.shape[1]:
        raise ValueError(f"shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    if k.shape[0] < q.shape[0]:
        raise ValueError("need at least as many keys as queries")
    if b.shape != (q.shape[0], k.shape[0]):
        raise ValueError(f"bias shape {b.shape} != ({q.shape[0]}, {k.shape[0]})")
    if not np.isfinite(b).any(axis=-1).all():
        raise ValueError("every bias row needs at least one unmasked entry")
    scores = q @ k.T
    if scale_qk:
        scores = scores / math.sqrt(q.shape[1])
    weights = _stable_softmax(scores + b)
    out = weights @ v
    if return_weights:
        return out, weights
    return out


def max_bias_magnitude(slope: float, cfg: PiConfig, seq_len: int | None = None) -> float:
    """Largest ``|bias|`` a head reaches at length ``seq_len`` (default ``cfg.infer_len``)."""
    n = cfg.infer_len if seq_len is None else seq_len
    return slope * cfg.row_scale(n) * (n - 1)


def slope_list(slopes: SlopeSet | Sequence[float]) -> SlopeSet:
    return slopes if isinstance(slopes, SlopeSet) else SlopeSet(tuple(slopes))
