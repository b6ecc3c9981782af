"""
Interpolating the slopes
========================

A model trained on L tokens has seen biases down to -m * (L - 1).  Reading
L' > L tokens pushes baseline biases past that range; multiplying every slope
by L / L' pulls them back in.
"""

# %%
import numpy as np

from alpi import PiConfig, build_bias_matrix, compute_slopes
from alpi.evaluation import bias_profile

slopes = compute_slopes(8)

# %%
# Last row of a 96-token sequence, last head, trained length 64.
prof = bias_profile(96, 64, slopes, 8)
for name, curve in prof.curves.items():
    print(f"{name:>8}: min {curve.min():+.4f}")
# PI lands at -m * (L/L') * (L' - 1), just inside -m * L.
print("bound:", -slopes[7] * 64)

# %%
# Fixed mode scales every row by L/L'; per-position mode only rows past L.
fixed = PiConfig(64, 96, "fixed")
per_pos = PiConfig(64, 96, "per_position")
print(fixed.scale, per_pos.row_scales(96)[[0, 63, 64, 95]])

# %%
# Within the trained length nothing changes, bit for bit.
a = build_bias_matrix(40, slopes, PiConfig.baseline(64)).values
b = build_bias_matrix(40, slopes, PiConfig(64, 40, "fixed")).values
print("identical:", np.array_equal(a, b))
