"""
Byte-level decoder-only transformer with ALiBi attention.

Pre-norm blocks, tanh-GELU feed-forward, input/output embeddings tied, and
no position embedding besides the ALiBi bias. Parameters live in an ordered
``name -> float64 array`` mapping so the checkpoint manifest order is the
insertion order.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .alibi import PiConfig, SlopeSet, build_bias_matrix, compute_slopes, decode_bias_row
from .tensor import Tensor

__all__ = [
    "ModelConfig",
    "TransformerLM",
    "KVCache",
    "AdamState",
    "init_params",
    "forward",
    "loss_and_grads",
    "decode_step",
    "prefill",
    "greedy_generate",
    "adam_step",
]


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    train_len: int = 64
    dropout: float = 0.0
    seed: int = 0
    scale_qk: bool = True

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "d_ff"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.train_len < 2:
            raise ValueError("train_len must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    D, F = cfg.d_model, cfg.d_ff
    shapes = [("wte", (cfg.vocab_size, D))]
    for layer in range(cfg.n_layers):
        p = f"h{layer}."
        shapes += [
            (p + "ln1.g", (D,)),
            (p + "ln1.b", (D,)),
            (p + "attn.w_q", (D, D)),
            (p + "attn.b_q", (D,)),
            (p + "attn.w_k", (D, D)),
            (p + "attn.b_k", (D,)),
            (p + "attn.w_v", (D, D)),
            (p + "attn.b_v", (D,)),
            (p + "attn.w_o", (D, D)),
            (p + "attn.b_o", (D,)),
            (p + "ln2.g", (D,)),
            (p + "ln2.b", (D,)),
            (p + "mlp.w_in", (D, F)),
            (p + "mlp.b_in", (F,)),
            (p + "mlp.w_out", (F, D)),
            (p + "mlp.b_out", (D,)),
        ]
    shapes += [("ln_f.g", (D,)), ("ln_f.b", (D,))]
    return shapes


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    """N(0, 0.02) weights, zero biases/offsets, unit layer-norm gains.

    Draws come from numpy's PCG64 seeded with ``cfg.seed``, in manifest order.
    """
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    params = {}
    for name, shape in param_shapes(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            params[name] = np.ones(shape)
        elif leaf.startswith("b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, 0.02, size=shape)
    return params


class TransformerLM:
    """Config, parameters and ALiBi slopes bundled together."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.params = init_params(config) if params is None else params
        expected = param_shapes(config)
        if [n for n, _ in expected] != list(self.params):
            raise ValueError("parameter names do not match the architecture")
        for name, shape in expected:
            if self.params[name].shape != shape:
                raise ValueError(f"{name}: shape {self.params[name].shape} != {shape}")
        self.slopes: SlopeSet = compute_slopes(config.n_heads)

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def pi(self, infer_len: int | None = None, mode: str = "fixed") -> PiConfig:
        return PiConfig(self.config.train_len, infer_len or self.config.train_len, mode)


class KVCache:
    """Per-layer keys/values of shape ``(B, H, capacity, head_dim)``."""

    def __init__(self, config: ModelConfig, capacity: int, batch: int = 1):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        shape = (batch, config.n_heads, capacity, config.head_dim)
        self.keys = [np.zeros(shape) for _ in range(config.n_layers)]
        self.values = [np.zeros(shape) for _ in range(config.n_layers)]
        self.length = 0

    def _store(self, layer: int, k: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        t0, n = self.length, k.shape[2]
        self.keys[layer][:, :, t0:t0 + n] = k
        self.values[layer][:, :, t0:t0 + n] = v
        return self.keys[layer][:, :, :t0 + n], self.values[layer][:, :, :t0 + n]


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, L, D = x.shape
    return T.transpose(T.reshape(x, (B, L, n_heads, D // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, H, L, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, L, H * dh))


def _check_ids(ids: np.ndarray, vocab: int) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2 or ids.shape[1] < 1:
        raise ValueError("token ids must be a non-empty sequence or (batch, seq) array")
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("token ids must be integers")
    if ids.min() < 0 or ids.max() >= vocab:
        raise ValueError(f"token id out of range [0, {vocab})")
    return ids.astype(np.int64)


def _run(model: TransformerLM, ids, pi: PiConfig, *, leaves=None, cache: KVCache | None = None,
         bias_rows: np.ndarray | None = None, rng=None, attn_out: list | None = None,
         qk_out: list | None = None) -> Tensor:
    cfg = model.config
    ids = _check_ids(ids, cfg.vocab_size)
    B, L = ids.shape
    if leaves is None:
        leaves = {k: Tensor(v) for k, v in model.params.items()}
    t0 = 0 if cache is None else cache.length
    if cache is not None and t0 + L > cache.capacity:
        raise RuntimeError(f"KV cache full ({cache.capacity} positions)")
    if bias_rows is None:
        bias_rows = build_bias_matrix(t0 + L, model.slopes, pi).values[:, t0:, :]
    bias = Tensor(bias_rows)
    drop = cfg.dropout if rng is not None else 0.0

    x = T.embedding(leaves["wte"], ids)
    for layer in range(cfg.n_layers):
        p = f"h{layer}."
        h = T.layer_norm(x, leaves[p + "ln1.g"], leaves[p + "ln1.b"])
        q = _split_heads(T.add(h @ leaves[p + "attn.w_q"], leaves[p + "attn.b_q"]), cfg.n_heads)
        k = _split_heads(T.add(h @ leaves[p + "attn.w_k"], leaves[p + "attn.b_k"]), cfg.n_heads)
        v = _split_heads(T.add(h @ leaves[p + "attn.w_v"], leaves[p + "attn.b_v"]), cfg.n_heads)
        if cache is not None:
            kd, vd = cache._store(layer, k.data, v.data)
            k, v = Tensor(kd), Tensor(vd)
        scores = q @ T.transpose(k, (0, 1, 3, 2))
        if qk_out is not None:
            qk_out.append(scores.data)
        if cfg.scale_qk:
            scores = T.scale(scores, 1.0 / math.sqrt(cfg.head_dim))
        probs = T.masked_softmax(T.add(scores, bias))
        if attn_out is not None:
            attn_out.append(probs.data)
        ctx = _merge_heads(probs @ v)
        a = T.add(ctx @ leaves[p + "attn.w_o"], leaves[p + "attn.b_o"])
        x = T.add(x, T.dropout(a, drop, rng))
        h = T.layer_norm(x, leaves[p + "ln2.g"], leaves[p + "ln2.b"])
        h = T.gelu(T.add(h @ leaves[p + "mlp.w_in"], leaves[p + "mlp.b_in"]))
        m = T.add(h @ leaves[p + "mlp.w_out"], leaves[p + "mlp.b_out"])
        x = T.add(x, T.dropout(m, drop, rng))
    x = T.layer_norm(x, leaves["ln_f.g"], leaves["ln_f.b"])
    logits = x @ T.transpose(leaves["wte"], (1, 0))
    if cache is not None:
        cache.length = t0 + L
    return logits


def forward(model: TransformerLM, token_ids, pi: PiConfig | None = None, *,
            return_attention: bool = False, return_qk: bool = False):
    """Next-token logits for every position.

    A 1-D input gives ``(seq_len, vocab)``; a ``(batch, seq_len)`` input gives
    ``(batch, seq_len, vocab)``. ``return_attention`` adds the per-layer
    attention probabilities ``(B, H, T, T)``; ``return_qk`` adds the raw
    per-layer ``q . k`` products (before the 1/sqrt(d) factor and the bias).
    """
    pi = pi or model.pi()
    squeeze = np.ndim(token_ids) == 1
    attn: list | None = [] if return_attention else None
    qk: list | None = [] if return_qk else None
    out = _run(model, token_ids, pi, attn_out=attn, qk_out=qk).data
    if squeeze:
        out = out[0]
    extra = [x for x in (attn, qk) if x is not None]
    return (out, *extra) if extra else out


def loss_and_grads(model: TransformerLM, token_ids, pi: PiConfig | None = None, *,
                   weights: np.ndarray | None = None, rng=None):
    """Mean next-token cross-entropy and its gradient for every parameter.

    ``token_ids`` holds ``seq_len + 1`` tokens per row; position ``t`` is
    scored on token ``t + 1``. ``weights`` (one per target) restricts or
    reweights the mean.
    """
    ids = np.asarray(token_ids)
    if ids.ndim == 1:
        ids = ids[None, :]
        if weights is not None:
            weights = np.asarray(weights)[None, :]
    if ids.shape[1] < 2:
        raise ValueError("need at least two tokens for one prediction")
    pi = pi or model.pi()
    leaves = {k: Tensor(v, requires_grad=True) for k, v in model.params.items()}
    logits = _run(model, ids[:, :-1], pi, leaves=leaves, rng=rng)
    loss = T.cross_entropy(logits, ids[:, 1:], weights)
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
    return float(loss.data), grads


def prefill(model: TransformerLM, cache: KVCache, token_ids, pi: PiConfig) -> np.ndarray:
    """Run a prompt through the model, filling ``cache``; returns its logits ``(T, V)``."""
    ids = np.asarray(token_ids)[None, :] if np.ndim(token_ids) == 1 else token_ids
    return _run(model, ids, pi, cache=cache).data[0]


def decode_step(model: TransformerLM, cache: KVCache, token_id: int, pi: PiConfig):
    """Append one token; returns ``(logits over vocab, cache)``.

    The new query at step ``t`` sees ``t`` keys with ``decode_bias_row``.
    """
    if cache.length >= cache.capacity:
        raise RuntimeError(f"KV cache full ({cache.capacity} positions)")
    step = cache.length + 1
    rows = np.stack([decode_bias_row(step, step, m, pi) for m in model.slopes.slopes])
    logits = _run(model, np.array([[token_id]]), pi, cache=cache, bias_rows=rows[:, None, :])
    return logits.data[0, -1], cache


def greedy_generate(model: TransformerLM, prompt, max_new: int, pi: PiConfig,
                    return_logits: bool = False):
    """Greedy decoding through the KV cache. Returns generated ids (and step logits)."""
    prompt = list(int(t) for t in prompt)
    if max_new <= 0:
        return ([], []) if return_logits else []
    if not prompt:
        raise ValueError("empty prompt")
    cache = KVCache(model.config, len(prompt) + max_new)
    logits = prefill(model, cache, np.array(prompt), pi)[-1]
    out, trace = [], [logits]
    for i in range(max_new):
        tok = int(np.argmax(logits))
        out.append(tok)
        if i + 1 < max_new:
            logits, cache = decode_step(model, cache, tok, pi)
            trace.append(logits)
    return (out, trace) if return_logits else out


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """In-place bias-corrected Adam update; returns ``(params, state)``."""
    if params.keys() != grads.keys():
        raise ValueError("params and grads have different names")
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state
