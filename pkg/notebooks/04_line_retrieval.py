"""
Line retrieval cases
====================

A document lists ``key NNNN: VVVV`` records among filler text and ends with a
query for one key.  The model must produce the four value digits.
"""

# %%
import numpy as np

from alpi.evaluation import default_n_keys, make_retrieval_case, min_case_len, score_retrieval
from alpi.model import ModelConfig, TransformerLM

rng = np.random.default_rng(0)
case = make_retrieval_case(rng, 96)
print(case.document.decode())
print("answer:", case.answer.decode(), "at byte", case.answer_pos)

# %%
# Keys per document grow with length; the shortest feasible case is one record.
print({n: default_n_keys(n) for n in (27, 48, 96, 192)}, min_case_len(1))

# %%
# An untrained model is at chance, roughly one in ten thousand.
model = TransformerLM(ModelConfig(train_len=64))
cases = [make_retrieval_case(rng, 96) for _ in range(20)]
print(score_retrieval(model, cases, "fixed"))
