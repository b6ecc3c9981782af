"""
A small byte-level model
========================

Train a tiny model for a few hundred steps on the bundled reference corpus,
then look at loss by position past the trained length.  The full reference
plan (3000 steps) takes about five minutes on one core; this one is short.
"""

# %%
import tempfile
from pathlib import Path

from alpi.evaluation import moving_average, per_position_nll
from alpi.model import ModelConfig
from alpi.training import TrainPlan, build_reference_corpus, load_corpus, train, validation_documents

workdir = Path(tempfile.mkdtemp())
build_reference_corpus(workdir / "corpus.txt")
corpus = load_corpus(workdir / "corpus.txt", 32)
print(len(corpus), "bytes,", corpus.split, "for training")

# %%
config = ModelConfig(d_model=32, n_heads=4, n_layers=1, d_ff=128, train_len=32)
plan = TrainPlan(steps=300, batch_size=8, context_len=32, warmup=30, peak_lr=3e-3)
ckpt, trace = train(config, plan, corpus)
print("first / last loss:", round(trace[0][1], 3), round(trace[-1][1], 3))

# %%
# Mean NLL per position on 64-byte validation windows, twice the trained length.
model = ckpt.to_model()
docs = validation_documents(corpus, 10, 64)
for mode in ("baseline", "fixed", "per_position"):
    rep = per_position_nll(model, docs, 64, mode)
    smooth = moving_average(rep.mean_nll, 8)
    print(f"{mode:>12}", rep.summary(), "smoothed tail", round(float(smooth[-1]), 3))
