"""
ALiBi bias matrices
===================

Each head adds a linear penalty to its attention scores, steeper for the
early heads and gentler for the late ones.
"""

# %%
import numpy as np

from alpi import PiConfig, build_bias_matrix, compute_slopes

np.set_printoptions(precision=3, suppress=True, linewidth=110)

# %%
# Slopes form a geometric sequence starting at 2^(-8/n).
slopes = compute_slopes(8)
print(slopes.as_array())

# %%
# The first head of a six-token sequence. Masked (future) keys are -inf.
bias = build_bias_matrix(6, compute_slopes(2), PiConfig.baseline(64))
print(bias.head(0))

# %%
# Rows never exceed zero, and the diagonal is exactly zero.
print(bias.values.max(), np.diagonal(bias.values, axis1=1, axis2=2))
