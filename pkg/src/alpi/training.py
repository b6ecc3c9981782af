"""
Corpus handling, batching and the training loop for the toy byte-level LM.
"""

from __future__ import annotations

import ast
import csv
import logging
import math
import sysconfig
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .alibi import PiConfig
from .checkpoint import ModelCheckpoint, atomic_write, save_checkpoint
from .evaluation import ANSWER_LEN, default_n_keys, make_retrieval_case
from .model import AdamState, ModelConfig, TransformerLM, adam_step, loss_and_grads

__all__ = [
    "Corpus",
    "CorpusError",
    "TrainPlan",
    "TrainingDiverged",
    "load_corpus",
    "sample_batch",
    "validation_documents",
    "lr_at",
    "train",
    "retrieval_batches",
    "build_reference_corpus",
]

log = logging.getLogger(__name__)

VALIDATION_FRACTION = 0.05


class CorpusError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Corpus:
    data: bytes
    split: int

    @property
    def train(self) -> bytes:
        return self.data[:self.split]

    @property
    def validation(self) -> bytes:
        return self.data[self.split:]

    def __len__(self) -> int:
        return len(self.data)


def load_corpus(path: str | Path, context_len: int = 64) -> Corpus:
    """Read raw bytes; the last 5% (by offset) is held out for validation."""
    path = Path(path)
    if not path.is_file():
        raise CorpusError(f"corpus file not found: {path}")
    data = path.read_bytes()
    if len(data) < 10 * context_len:
        raise CorpusError(f"corpus has {len(data)} bytes; need at least {10 * context_len} (10 x context length)")
    return Corpus(data, math.floor((1.0 - VALIDATION_FRACTION) * len(data)))


def sample_batch(corpus: Corpus, batch_size: int, context_len: int, rng: np.random.Generator,
                 offsets=None) -> np.ndarray:
    """``(batch, context_len + 1)`` windows drawn uniformly from the training slice.

    Windows never cross into the validation slice. ``offsets`` pins the
    start positions instead of sampling them.
    """
    span = context_len + 1
    high = corpus.split - span  # last valid start
    if high < 0:
        raise CorpusError("training slice shorter than one window")
    if offsets is None:
        offsets = rng.integers(0, high + 1, size=batch_size)
    offsets = np.asarray(offsets, dtype=np.int64)
    if offsets.min() < 0 or offsets.max() > high:
        raise ValueError("window offset outside the training slice")
    buf = np.frombuffer(corpus.data, dtype=np.uint8)
    return np.stack([buf[o:o + span] for o in offsets]).astype(np.int64)


def validation_documents(corpus: Corpus, n_docs: int, length: int) -> list[bytes]:
    """``n_docs`` non-overlapping, evenly spaced windows of the validation slice."""
    val = corpus.validation
    if n_docs * length > len(val):
        raise CorpusError(f"validation slice ({len(val)} bytes) cannot hold {n_docs} documents of {length}")
    stride = (len(val) - length) // max(n_docs - 1, 1)
    return [val[i * stride:i * stride + length] for i in range(n_docs)]


@dataclass(frozen=True)
class TrainPlan:
    steps: int = 3000
    batch_size: int = 16
    context_len: int = 64
    warmup: int = 100
    peak_lr: float = 3e-3
    min_lr_frac: float = 0.1
    seed: int = 0
    checkpoint_interval: int = 0
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.context_len < 2:
            raise ValueError("steps >= 0, batch_size >= 1 and context_len >= 2 required")
        if self.steps > 0 and not 0 <= self.warmup < self.steps:
            raise ValueError(f"warmup ({self.warmup}) must be smaller than steps ({self.steps})")


def lr_at(plan: TrainPlan, step: int) -> float:
    """Learning rate for 1-indexed ``step``: linear warmup, then linear decay to the floor."""
    if step <= plan.warmup:
        return plan.peak_lr * step / plan.warmup
    frac = (step - plan.warmup) / max(plan.steps - plan.warmup, 1)
    return plan.peak_lr * (1.0 - (1.0 - plan.min_lr_frac) * frac)


BatchSource = Callable[[np.random.Generator], "tuple[np.ndarray, np.ndarray | None]"]


def corpus_batches(corpus: Corpus, plan: TrainPlan) -> BatchSource:
    def draw(rng):
        return sample_batch(corpus, plan.batch_size, plan.context_len, rng), None
    return draw


def retrieval_batches(batch_size: int, max_len: int, min_len: int | None = None) -> BatchSource:
    """Batches of retrieval cases followed by their answers.

    Every row in a batch has the same random document length in
    ``[min_len, max_len]``; only the answer bytes carry loss weight.
    """
    if min_len is None:
        min_len = max(max_len // 2, 27)
    if min_len > max_len:
        raise ValueError("min_len > max_len")

    def draw(rng):
        n = int(rng.integers(min_len, max_len + 1))
        rows = []
        for _ in range(batch_size):
            case = make_retrieval_case(rng, n, default_n_keys(n))
            rows.append(np.frombuffer(case.document + case.answer, dtype=np.uint8))
        ids = np.stack(rows).astype(np.int64)
        weights = np.zeros((batch_size, ids.shape[1] - 1))
        weights[:, n - 1:n - 1 + ANSWER_LEN] = 1.0
        return ids, weights
    return draw


def _clip(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        c = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= c
    return norm


def validation_loss(model: TransformerLM, corpus: Corpus, context_len: int, max_windows: int = 32) -> float:
    val = np.frombuffer(corpus.validation, dtype=np.uint8).astype(np.int64)
    span = context_len + 1
    n = min(max_windows, len(val) // span)
    if n == 0:
        return float("nan")
    ids = val[:n * span].reshape(n, span)
    loss, _ = loss_and_grads(model, ids, PiConfig.baseline(model.config.train_len))
    return loss


def write_loss_trace(trace, path: str | Path) -> None:
    rows = ["step,loss,lr"] + [f"{s},{loss!r},{lr!r}" for s, loss, lr in trace]
    atomic_write(path, ("\n".join(rows) + "\n").encode("utf-8"))


def train(model_config: ModelConfig, plan: TrainPlan, corpus: Corpus | None = None, *,
          init_params: dict | None = None, batches: BatchSource | None = None,
          checkpoint_dir: str | Path | None = None, loss_trace: str | Path | None = None,
          log_every: int = 0):
    """Adam on next-token cross-entropy; returns ``(checkpoint, trace)``.

    ``trace`` is a list of ``(step, loss, lr)``. ``batches`` overrides corpus
    sampling (used for retrieval fine-tuning). Raises :class:`TrainingDiverged`
    on a non-finite loss.
    """
    if plan.context_len != model_config.train_len:
        raise ValueError("plan.context_len must equal model_config.train_len")
    if batches is None:
        if corpus is None:
            raise ValueError("need a corpus or a batch source")
        batches = corpus_batches(corpus, plan)
    params = None if init_params is None else {k: v.copy() for k, v in init_params.items()}
    model = TransformerLM(model_config, params)
    pi = PiConfig.baseline(model_config.train_len)
    seeds = np.random.SeedSequence(plan.seed).spawn(2)
    batch_rng = np.random.Generator(np.random.PCG64(seeds[0]))
    drop_rng = np.random.Generator(np.random.PCG64(seeds[1])) if model_config.dropout > 0 else None
    state = AdamState()
    trace = []
    loss = float("nan")
    for step in range(1, plan.steps + 1):
        ids, weights = batches(batch_rng)
        loss, grads = loss_and_grads(model, ids, pi, weights=weights, rng=drop_rng)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        _clip(grads, plan.grad_clip)
        lr = lr_at(plan, step)
        adam_step(model.params, grads, state, lr)
        trace.append((step, loss, lr))
        if log_every and step % log_every == 0:
            log.info("step %d loss %.4f lr %.2e", step, loss, lr)
        if checkpoint_dir and plan.checkpoint_interval and step % plan.checkpoint_interval == 0:
            ck = ModelCheckpoint.from_model(model, step=step, loss=loss, seed=plan.seed)
            save_checkpoint(ck, Path(checkpoint_dir) / f"step{step:06d}.alpi")
    meta = {"step": plan.steps, "loss": loss if plan.steps else None, "seed": plan.seed,
            "plan": asdict(plan)}
    if corpus is not None:
        vl = validation_loss(model, corpus, plan.context_len)
        meta["val_loss"] = vl if math.isfinite(vl) else None
    if loss_trace is not None:
        write_loss_trace(trace, loss_trace)
    return ModelCheckpoint.from_model(model, **meta), trace


def build_reference_corpus(path: str | Path | None = None, min_bytes: int = 1 << 20) -> bytes:
    """English prose bundled with CPython: the pydoc topic help plus stdlib docstrings.

    Sources are read in sorted order (docstrings via ``ast``, nothing is
    imported), so the bytes depend only on the Python installation.
    """
    import pydoc_data.topics as topics

    parts = [topics.topics[k].strip() for k in sorted(topics.topics)]
    lib = Path(sysconfig.get_paths()["stdlib"])
    for f in sorted(lib.glob("*.py")):
        try:
            tree = ast.parse(f.read_text(encoding="utf-8"))
        except (SyntaxError, UnicodeDecodeError):
            continue
        for node in ast.walk(tree):
            if isinstance(node, (ast.Module, ast.ClassDef, ast.FunctionDef, ast.AsyncFunctionDef)):
                doc = ast.get_docstring(node)
                if doc and len(doc) > 40:
                    parts.append(doc.strip())
    data = "\n\n".join(parts).encode("utf-8")
    if len(data) < min_bytes:
        raise CorpusError(f"reference corpus only has {len(data)} bytes (< {min_bytes})")
    if path is not None:
        atomic_write(path, data)
    return data


def read_loss_trace(path: str | Path) -> list[tuple[int, float, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [(int(r["step"]), float(r["loss"]), float(r["lr"])) for r in csv.DictReader(fh)]
