"""
Command line entry point: ``alpi <command> ...``.

Exit codes: 0 ok, 2 usage/config error, 3 input error (corpus, checkpoint,
documents), 4 training diverged. Diagnostics go to stderr; generated text
goes to stdout, everything else to files.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .alibi import PiConfig, compute_slopes, normalize_mode
from .checkpoint import CheckpointError, atomic_write, file_sha256, load_checkpoint, save_checkpoint
from .evaluation import (
    bias_profile,
    default_n_keys,
    make_retrieval_case,
    model_qk_scores,
    per_position_nll,
    retrieval_csv,
    score_retrieval,
)
from .model import KVCache, ModelConfig, decode_step, prefill
from .training import (
    CorpusError,
    TrainingDiverged,
    TrainPlan,
    build_reference_corpus,
    load_corpus,
    retrieval_batches,
    train,
    validation_documents,
)

MODE_CHOICES = ("baseline", "fixed", "per-position")

log = logging.getLogger("alpi")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# config files and manifests

def read_config(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment, keys may use ``-`` or ``_``."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}", 2) from exc
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{n}: expected key=value", 2)
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _apply_config(parser: argparse.ArgumentParser, values: dict[str, str]) -> None:
    actions = {a.dest: a for a in parser._actions}
    defaults = {}
    for key, value in values.items():
        action = actions.get(key)
        if action is None or key in ("help", "config"):
            raise CliError(f"unknown config key {key!r}", 2)
        if isinstance(action, argparse._StoreTrueAction):
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise CliError(f"config key {key!r} expects a boolean", 2)
            defaults[key] = value.lower() in ("true", "1", "yes")
        else:
            try:
                defaults[key] = action.type(value) if action.type else value
            except (TypeError, ValueError) as exc:
                raise CliError(f"bad value for config key {key!r}: {value!r}", 2) from exc
            if action.choices is not None and defaults[key] not in action.choices:
                raise CliError(f"config key {key!r}: {value!r} not in {list(action.choices)}", 2)
        action.required = False
    parser.set_defaults(**defaults)


def _hash_input(path: str | Path) -> dict[str, str]:
    p = Path(path)
    if p.is_dir():
        return {str(f): file_sha256(f) for f in sorted(p.iterdir()) if f.is_file()}
    return {str(p): file_sha256(p)}


def write_manifest(args, inputs: list, outputs: list[str], manifest_path: Path) -> dict:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "parser")}
    hashes = {}
    for path in inputs:
        if path is not None:
            hashes.update(_hash_input(path))
    manifest = {
        "command": args.command,
        "config": config,
        "seed": getattr(args, "seed", None),
        "inputs": hashes,
        "outputs": outputs,
        "tool_version": __version__,
    }
    atomic_write(manifest_path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8"))
    return manifest


def _guard_outputs(args, outputs: list[str]) -> None:
    if args.force:
        return
    existing = [p for p in outputs if Path(p).exists()]
    if existing:
        raise CliError(f"refusing to overwrite {', '.join(existing)} (pass --force)", 2)


def _manifest_path(args, primary: str) -> Path:
    return Path(args.manifest) if args.manifest else Path(f"{primary}.manifest.json")


def _load_model(path: str):
    if not Path(path).is_file():
        raise CliError(f"checkpoint not found: {path}", 3)
    try:
        return load_checkpoint(path).to_model()
    except CheckpointError as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}", 3) from exc


# ---------------------------------------------------------------------------
# commands

def cmd_train(args) -> int:
    loss_csv = args.loss_csv or f"{args.out}.loss.csv"
    outputs = [args.out, loss_csv]
    _guard_outputs(args, outputs)
    if args.task == "lm" and not args.corpus:
        raise CliError("--corpus is required for --task lm", 2)
    try:
        plan = TrainPlan(
            steps=args.steps, batch_size=args.batch_size, context_len=args.context_len,
            warmup=args.warmup, peak_lr=args.lr, min_lr_frac=args.min_lr_frac, seed=args.seed,
            checkpoint_interval=args.checkpoint_interval, grad_clip=args.grad_clip,
        )
    except ValueError as exc:
        raise CliError(str(exc), 2) from exc
    init = None
    if args.init:
        base = load_checkpoint(args.init) if Path(args.init).is_file() else None
        if base is None:
            raise CliError(f"checkpoint not found: {args.init}", 3)
        config, init = base.config, base.params
        if config.train_len != args.context_len:
            raise CliError(f"--context-len {args.context_len} differs from the checkpoint's {config.train_len}", 2)
    else:
        try:
            config = ModelConfig(
                d_model=args.d_model, n_heads=args.n_heads, n_layers=args.n_layers, d_ff=args.d_ff,
                train_len=args.context_len, dropout=args.dropout, seed=args.seed,
            )
        except ValueError as exc:
            raise CliError(str(exc), 2) from exc
    batches = None
    if args.task == "retrieval":
        try:
            batches = retrieval_batches(args.batch_size, args.context_len - 3)
        except ValueError as exc:
            raise CliError(f"--context-len {args.context_len} is too short for retrieval cases", 2) from exc
    write_manifest(args, [args.corpus, args.init], outputs, _manifest_path(args, args.out))
    corpus = load_corpus(args.corpus, args.context_len) if args.corpus else None
    ck_dir = Path(args.out).parent if args.checkpoint_interval else None
    ckpt, trace = train(config, plan, corpus, init_params=init, batches=batches,
                        checkpoint_dir=ck_dir, loss_trace=loss_csv, log_every=args.log_every)
    save_checkpoint(ckpt, args.out)
    final = trace[-1][1] if trace else float("nan")
    print(f"trained {plan.steps} steps; final loss {final:.4f}; val loss {ckpt.metadata.get('val_loss')}",
          file=sys.stderr)
    return 0


def _read_documents(args) -> list[bytes]:
    path = Path(args.docs)
    if path.is_dir():
        return [f.read_bytes() for f in sorted(path.iterdir()) if f.is_file()]
    if not path.is_file():
        raise CliError(f"documents not found: {path}", 3)
    corpus = load_corpus(path, 2)
    return validation_documents(corpus, args.n_docs, args.max_len)


def cmd_eval_ppl(args) -> int:
    outputs = [args.out]
    _guard_outputs(args, outputs)
    model = _load_model(args.checkpoint)
    write_manifest(args, [args.checkpoint, args.docs], outputs, _manifest_path(args, args.out))
    docs = _read_documents(args)
    try:
        report = per_position_nll(model, docs, args.max_len, normalize_mode(args.mode))
    except ValueError as exc:
        raise CliError(str(exc), 3) from exc
    report.to_csv(args.out)
    for name, (lo, hi) in report.ranges.items():
        print(f"{name} [{lo},{hi}] mean_nll={report.range_mean(lo, hi):.6f}")
    return 0


def retrieval_cases(lengths: list[int], n_cases: int, seed: int):
    cases = []
    for n in lengths:
        rng = np.random.default_rng([seed, n])
        cases += [make_retrieval_case(rng, n, default_n_keys(n)) for _ in range(n_cases)]
    return cases


def cmd_retrieval(args) -> int:
    outputs = [args.out]
    _guard_outputs(args, outputs)
    try:
        lengths = [int(x) for x in args.lengths.split(",") if x.strip()]
    except ValueError as exc:
        raise CliError(f"bad --lengths {args.lengths!r}", 2) from exc
    model = _load_model(args.checkpoint)
    write_manifest(args, [args.checkpoint], outputs, _manifest_path(args, args.out))
    try:
        cases = retrieval_cases(lengths, args.cases, args.seed)
    except ValueError as exc:
        raise CliError(str(exc), 2) from exc
    results = score_retrieval(model, cases, args.mode) if cases else []
    retrieval_csv(results, args.out)
    for r in results:
        print(f"len={r.bucket_len} mode={args.mode} n={r.n_cases} accuracy={r.accuracy:.4f}")
    return 0


def cmd_profile(args) -> int:
    outputs = [args.out]
    _guard_outputs(args, outputs)
    qk, head_dim = None, None
    slopes = compute_slopes(args.heads)
    if args.checkpoint:
        model = _load_model(args.checkpoint)
        if model.config.n_heads != args.heads:
            raise CliError(f"--heads {args.heads} differs from the checkpoint's {model.config.n_heads}", 2)
        if not args.prompt_file:
            raise CliError("--checkpoint needs --prompt-file for score curves", 2)
        text = Path(args.prompt_file).read_bytes()
        if len(text) < args.query_pos:
            raise CliError(f"prompt file shorter than --query-pos {args.query_pos}", 3)
        ids = np.frombuffer(text[:args.query_pos], dtype=np.uint8).astype(np.int64)
        qk = model_qk_scores(model, ids, args.layer, args.head_index, normalize_mode(args.mode))
        head_dim = model.config.head_dim if model.config.scale_qk else None
    write_manifest(args, [args.checkpoint, args.prompt_file], outputs, _manifest_path(args, args.out))
    try:
        prof = bias_profile(args.query_pos, args.train_len, slopes, args.head_index,
                            normalize_mode(args.mode), qk, head_dim)
    except ValueError as exc:
        raise CliError(str(exc), 2) from exc
    prof.to_csv(args.out)
    return 0


def cmd_generate(args) -> int:
    mode = normalize_mode(args.mode)
    if mode == "fixed" and args.target_len is None:
        raise CliError("--mode fixed needs --target-len", 2)
    path = Path(args.prompt_file)
    if not path.is_file():
        raise CliError(f"prompt file not found: {path}", 3)
    prompt = path.read_bytes()
    if mode == "fixed" and args.target_len < len(prompt) + args.max_new:
        raise CliError("--target-len must be >= prompt length + --max-new", 2)
    model = _load_model(args.checkpoint)
    write_manifest(args, [args.checkpoint, args.prompt_file], [],
                   Path(args.manifest or f"{args.prompt_file}.generate.manifest.json"))
    if args.max_new <= 0:
        return 0
    if not prompt:
        raise CliError("empty prompt", 3)
    L = model.config.train_len
    pi = PiConfig(L, args.target_len or len(prompt) + args.max_new, mode)
    cache = KVCache(model.config, len(prompt) + args.max_new)
    logits = prefill(model, cache, np.frombuffer(prompt, dtype=np.uint8).astype(np.int64), pi)[-1]
    out = sys.stdout.buffer
    for i in range(args.max_new):
        tok = int(np.argmax(logits))
        out.write(bytes([tok]))
        out.flush()
        if i + 1 < args.max_new:
            logits, cache = decode_step(model, cache, tok, pi)
    return 0


def cmd_make_corpus(args) -> int:
    _guard_outputs(args, [args.out])
    write_manifest(args, [], [args.out], _manifest_path(args, args.out))
    data = build_reference_corpus(args.out)
    print(f"wrote {len(data)} bytes sha256={hashlib.sha256(data).hexdigest()}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# parser

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file; command-line flags win")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("--manifest", help="run manifest path (default: <output>.manifest.json)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="alpi", description="ALiBi with position interpolation, toy scale")
    parser.add_argument("--version", action="version", version=f"alpi {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train or fine-tune the toy LM")
    _common(p)
    p.add_argument("--corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--loss-csv")
    p.add_argument("--task", choices=("lm", "retrieval"), default="lm")
    p.add_argument("--init", help="start from this checkpoint (architecture flags ignored)")
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--context-len", type=int, default=64)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--n-layers", type=int, default=2)
    p.add_argument("--d-ff", type=int, default=256)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--min-lr-frac", type=float, default=0.1)
    p.add_argument("--grad-clip", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint-interval", type=int, default=0)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-ppl", help="per-position perplexity report")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--docs", required=True, help="directory of documents, or a corpus file")
    p.add_argument("--n-docs", type=int, default=10, help="documents drawn when --docs is a corpus file")
    p.add_argument("--max-len", type=int, required=True)
    p.add_argument("--mode", choices=MODE_CHOICES, default="fixed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_ppl)

    p = sub.add_parser("retrieval", help="synthetic line-retrieval accuracy")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--lengths", default="48,96")
    p.add_argument("--cases", type=int, default=200)
    p.add_argument("--mode", choices=MODE_CHOICES, default="fixed")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_retrieval)

    p = sub.add_parser("profile", help="bias profile of one query position")
    _common(p)
    p.add_argument("--query-pos", type=int, required=True)
    p.add_argument("--train-len", type=int, required=True)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--head-index", type=int, default=None, help="1-based; default last head")
    p.add_argument("--mode", choices=MODE_CHOICES, default="fixed")
    p.add_argument("--checkpoint", help="add q.k score curves from this model")
    p.add_argument("--prompt-file", help="text whose first --query-pos bytes feed the model")
    p.add_argument("--layer", type=int, default=0, help="0-based layer for score curves")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("generate", help="greedy generation through the KV cache")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt-file", required=True)
    p.add_argument("--max-new", type=int, default=64)
    p.add_argument("--mode", choices=MODE_CHOICES, default="per-position")
    p.add_argument("--target-len", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("make-corpus", help="write the reference corpus built from CPython's bundled docs")
    _common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_corpus)
    return parser


def _parse(argv) -> argparse.Namespace:
    parser = build_parser()
    args, _ = parser.parse_known_args(argv)
    config_path = getattr(args, "config", None)
    if config_path:
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        _apply_config(subparser, read_config(config_path))
    args = parser.parse_args(argv)
    if args.command == "profile" and args.head_index is None:
        args.head_index = args.heads
    return args


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = _parse(argv)
    except CliError as exc:
        print(f"alpi: error: {exc}", file=sys.stderr)
        return exc.code
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"alpi: error: {exc}", file=sys.stderr)
        return exc.code
    except (CorpusError, CheckpointError, FileNotFoundError) as exc:
        print(f"alpi: error: {exc}", file=sys.stderr)
        return 3
    except TrainingDiverged as exc:
        print(f"alpi: error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
