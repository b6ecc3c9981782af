"""
Long-context evaluation for the toy ALiBi model.

* per-position NLL curves over a handful of equal-length documents,
* a synthetic key/value line-retrieval task scored by greedy decoding,
* bias (and optionally full score) profiles for one query position.

CSV writers emit UTF-8 with LF line endings and ``repr`` floats so the same
inputs always produce byte-identical files.
"""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .alibi import PiConfig, SlopeSet, bias_row, normalize_mode
from .model import TransformerLM, forward, greedy_generate

__all__ = [
    "EvalReport",
    "RetrievalCase",
    "RetrievalResult",
    "BiasProfile",
    "per_position_nll",
    "make_retrieval_case",
    "default_n_keys",
    "score_retrieval",
    "bias_profile",
    "model_qk_scores",
    "moving_average",
    "worker_count",
]

ANSWER_LEN = 4


def worker_count() -> int:
    """Worker threads from ``ALPI_THREADS`` (0 or unset: one per CPU)."""
    raw = os.environ.get("ALPI_THREADS", "0").strip() or "0"
    n = int(raw)
    if n < 0:
        raise ValueError("ALPI_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)


def _map_ordered(fn, items: Sequence) -> list:
    n = min(worker_count(), max(len(items), 1))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _write_csv(path: str | Path | None, header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8", newline="")
    return text


# ---------------------------------------------------------------------------
# per-position perplexity

@dataclass
class EvalReport:
    """Mean NLL per token position, averaged over documents first.

    ``mean_nll[t - 1]`` is the loss of predicting token ``t + 1`` from the
    first ``t`` tokens, for ``t = 1 .. max_len - 1``.
    """

    mean_nll: np.ndarray
    n_docs: int
    pi: PiConfig
    ranges: dict[str, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.mean_nll)) or np.any(self.mean_nll < 0):
            raise ValueError("per-position NLL must be finite and non-negative")
        for name, (lo, hi) in self.ranges.items():
            if not 1 <= lo <= hi <= self.t_max:
                raise ValueError(f"range {name}=({lo}, {hi}) outside 1..{self.t_max}")

    @property
    def t_max(self) -> int:
        return len(self.mean_nll)

    @property
    def positions(self) -> np.ndarray:
        return np.arange(1, self.t_max + 1)

    @property
    def mean_ppl(self) -> np.ndarray:
        return np.exp(self.mean_nll)

    def range_mean(self, lo: int, hi: int) -> float:
        """Mean NLL over positions ``lo..hi`` inclusive."""
        if not 1 <= lo <= hi <= self.t_max:
            raise ValueError(f"positions {lo}..{hi} outside 1..{self.t_max}")
        return float(self.mean_nll[lo - 1:hi].mean())

    def summary(self) -> dict[str, float]:
        return {name: self.range_mean(lo, hi) for name, (lo, hi) in self.ranges.items()}

    def to_csv(self, path: str | Path | None = None) -> str:
        rows = zip(self.positions, self.mean_nll, self.mean_ppl)
        return _write_csv(path, ("position", "mean_nll", "mean_ppl"), rows)


def _default_ranges(train_len: int, t_max: int) -> dict[str, tuple[int, int]]:
    ranges = {}
    lo = train_len // 2 + 1
    if lo <= t_max:
        ranges["interpolation"] = (lo, min(train_len, t_max))
    if train_len + 1 <= t_max:
        ranges["extrapolation"] = (train_len + 1, min(2 * train_len, t_max))
    return ranges


def _doc_nll(model: TransformerLM, doc: np.ndarray, pi: PiConfig) -> np.ndarray:
    logits = forward(model, doc[:-1], pi)
    peak = logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(logits - peak).sum(axis=-1)) + peak[:, 0]
    return logz - logits[np.arange(len(doc) - 1), doc[1:]]


def per_position_nll(model: TransformerLM, documents: Sequence[bytes], max_len: int,
                     mode: str = "fixed") -> EvalReport:
    """Average next-token NLL per position over ``documents``.

    Each document is truncated to ``max_len`` tokens and scored with one full
    forward under ``PiConfig(L, max_len, mode)``.
    """
    if not documents:
        raise ValueError("need at least one document")
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    docs = []
    for i, d in enumerate(documents):
        if len(d) < max_len:
            raise ValueError(f"document {i} has {len(d)} tokens, fewer than max_len={max_len}")
        docs.append(np.frombuffer(bytes(d[:max_len]), dtype=np.uint8).astype(np.int64))
    pi = PiConfig(model.config.train_len, max_len, mode)
    per_doc = _map_ordered(lambda d: _doc_nll(model, d, pi), docs)
    total = np.zeros(max_len - 1)
    for nll in per_doc:  # fixed order keyed by document index
        total += nll
    mean = np.maximum(total / len(docs), 0.0)
    return EvalReport(mean, len(docs), pi, _default_ranges(model.config.train_len, max_len - 1))


def moving_average(values: np.ndarray, window: int = 16) -> np.ndarray:
    """Trailing moving average for plotting; the first entries use what is available."""
    values = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(1, len(values) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


# ---------------------------------------------------------------------------
# synthetic line retrieval

_FILLER_WORDS = (
    "the grass is green and the sky is blue while the sun shines over a quiet town "
    "where people walk along the river and birds sing in tall trees near old stone walls"
).split()
_RECORD_LEN = len("key 0000: 0000\n")
_QUERY_LEN = len("query 0000: ")


@dataclass(frozen=True)
class RetrievalCase:
    """A document of ``key K: V`` lines ending in ``query K: ``; the answer is ``V``."""

    document: bytes
    answer: bytes
    answer_pos: int
    total_len: int
    target_index: int

    def __post_init__(self):
        if len(self.document) != self.total_len:
            raise ValueError("document length does not match total_len")
        if self.document.count(self.answer) != 1:
            raise ValueError("answer must occur exactly once in the document")


def min_case_len(n_keys: int) -> int:
    return n_keys * _RECORD_LEN + _QUERY_LEN


def default_n_keys(total_len: int) -> int:
    """Number of records used for a case of ``total_len`` bytes."""
    return max(1, (total_len - _QUERY_LEN) // 24)


def _filler(rng: np.random.Generator, n: int) -> str:
    if n == 0:
        return ""
    words = []
    size = 0
    while size < n:
        w = _FILLER_WORDS[int(rng.integers(len(_FILLER_WORDS)))]
        words.append(w)
        size += len(w) + 1
    return " ".join(words)[:n - 1] + "\n"


def make_retrieval_case(rng: np.random.Generator, total_len: int, n_keys: int | None = None) -> RetrievalCase:
    """Random key/value document of exactly ``total_len`` bytes.

    Keys and values are distinct 4-digit numbers, so the answer occurs once.
    Filler words (no digits) are spread randomly between the records.
    """
    if n_keys is None:
        n_keys = default_n_keys(total_len)
    if n_keys < 1:
        raise ValueError("n_keys must be >= 1")
    need = min_case_len(n_keys)
    if total_len < need:
        raise ValueError(f"total_len={total_len} cannot hold {n_keys} records (need {need})")
    numbers = rng.choice(np.arange(1000, 10000), size=2 * n_keys, replace=False)
    keys, vals = numbers[:n_keys], numbers[n_keys:]
    target = int(rng.integers(n_keys))
    gaps = rng.multinomial(total_len - need, [1.0 / (n_keys + 1)] * (n_keys + 1))
    parts = []
    answer_pos = -1
    for i in range(n_keys):
        parts.append(_filler(rng, int(gaps[i])))
        record = f"key {keys[i]}: {vals[i]}\n"
        if i == target:
            answer_pos = sum(map(len, parts)) + len(record) - 1 - ANSWER_LEN
        parts.append(record)
    parts.append(_filler(rng, int(gaps[-1])))
    parts.append(f"query {keys[target]}: ")
    doc = "".join(parts).encode("ascii")
    return RetrievalCase(doc, str(vals[target]).encode("ascii"), answer_pos, total_len, target)


@dataclass(frozen=True)
class RetrievalResult:
    bucket_len: int
    mode: str
    n_cases: int
    accuracy: float


def retrieval_pi(train_len: int, total_len: int, mode: str) -> PiConfig:
    """Fixed mode pins the scale to the full decode length (document + answer)."""
    return PiConfig(train_len, total_len + ANSWER_LEN, mode)


def decode_answer(model: TransformerLM, case: RetrievalCase, mode: str) -> bytes:
    pi = retrieval_pi(model.config.train_len, case.total_len, mode)
    out = greedy_generate(model, np.frombuffer(case.document, dtype=np.uint8), ANSWER_LEN, pi)
    return bytes(out)


def score_retrieval(model: TransformerLM, cases: Sequence[RetrievalCase], mode: str) -> list[RetrievalResult]:
    """Exact-match accuracy of greedy 4-byte answers, bucketed by document length."""
    mode = normalize_mode(mode)
    hits = _map_ordered(lambda c: decode_answer(model, c, mode) == c.answer, list(cases))
    buckets: dict[int, list[bool]] = {}
    for case, hit in zip(cases, hits):
        buckets.setdefault(case.total_len, []).append(hit)
    return [RetrievalResult(n, mode, len(h), sum(h) / len(h)) for n, h in sorted(buckets.items())]


def retrieval_csv(results: Iterable[RetrievalResult], path: str | Path | None = None) -> str:
    mode_names = {"per_position": "per-position"}
    rows = ((r.bucket_len, mode_names.get(r.mode, r.mode), r.n_cases, r.accuracy) for r in results)
    return _write_csv(path, ("bucket_len", "mode", "n_cases", "accuracy"), rows)


# ---------------------------------------------------------------------------
# bias / score profile for one query

@dataclass
class BiasProfile:
    query_pos: int
    key_pos: np.ndarray
    curves: dict[str, np.ndarray]
    labels: dict[str, str]

    def __post_init__(self):
        for name, c in self.curves.items():
            if len(c) != self.query_pos:
                raise ValueError(f"curve {name} has length {len(c)}, expected {self.query_pos}")

    def to_csv(self, path: str | Path | None = None) -> str:
        names = list(self.curves)
        rows = ([int(k)] + [self.curves[n][i] for n in names] for i, k in enumerate(self.key_pos))
        return _write_csv(path, ["key_pos"] + names, rows)


def bias_profile(query_pos: int, train_len: int, slopes: SlopeSet, head_index: int,
                 mode: str = "fixed", qk_scores: np.ndarray | None = None,
                 head_dim: int | None = None) -> BiasProfile:
    """Bias of one query against every key, without and with interpolation.

    ``head_index`` is 1-based. The interpolated curve uses the scale that a
    sample of length ``query_pos`` gets under ``mode``. With ``qk_scores``
    (raw ``q . k`` per key) two more curves ``qk / sqrt(head_dim) + bias``
    are added; ``head_dim=None`` leaves ``qk`` unscaled.
    """
    if not 1 <= head_index <= slopes.n_heads:
        raise ValueError(f"head_index {head_index} outside 1..{slopes.n_heads}")
    m = slopes[head_index - 1]
    pi = PiConfig(train_len, query_pos, mode)
    base = bias_row(query_pos, m)
    interp = bias_row(query_pos, m * pi.row_scale(query_pos))
    curves = {"baseline": base, "pi": interp}
    labels = {
        "baseline": f"ALiBi bias, slope {m!r}",
        "pi": f"interpolated bias ({pi.mode}, scale {pi.row_scale(query_pos)!r})",
    }
    if qk_scores is not None:
        qk = np.asarray(qk_scores, dtype=np.float64)
        if qk.shape != (query_pos,):
            raise ValueError(f"qk_scores must have shape ({query_pos},)")
        if head_dim is not None:
            qk = qk / math.sqrt(head_dim)
        curves["score_baseline"] = qk + base
        curves["score_pi"] = qk + interp
        labels["score_baseline"] = "q.k/sqrt(d) + ALiBi bias"
        labels["score_pi"] = "q.k/sqrt(d) + interpolated bias"
    return BiasProfile(query_pos, np.arange(1, query_pos + 1), curves, labels)


def model_qk_scores(model: TransformerLM, token_ids, layer: int, head_index: int,
                    mode: str = "baseline") -> np.ndarray:
    """Raw ``q . k`` of the last query against all keys in one layer/head (1-based head).

    The first layer's q/k do not depend on the biases; deeper layers do, so
    ``mode`` selects the scaling used for the layers below.
    """
    ids = np.asarray(token_ids)
    pi = PiConfig(model.config.train_len, len(ids), mode)
    _, qk = forward(model, ids, pi, return_qk=True)
    return qk[layer][0, head_index - 1, -1, :]
