import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alpi.alibi import (
    PiConfig,
    SlopeSet,
    attention,
    bias_row,
    build_bias_matrix,
    compute_slopes,
    decode_bias_row,
    max_bias_magnitude,
    scale_factor,
    scaled_slopes,
)


def brute_force_bias(seq_len, slopes, cfg):
    """Double loop, one entry at a time: -(slope * scale) * (i - j)."""
    out = np.full((len(slopes), seq_len, seq_len), -math.inf)
    for h, m in enumerate(slopes):
        for i in range(1, seq_len + 1):
            s = cfg.row_scale(i)
            for j in range(1, i + 1):
                out[h, i - 1, j - 1] = -(m * s) * (i - j)
    return out


# -- slopes -----------------------------------------------------------------

def test_slopes_eight_heads():
    # r = 2**(-8/8) = 1/2
    assert compute_slopes(8).slopes == tuple(2.0**-k for k in range(1, 9))


def test_slopes_one_and_two_heads():
    assert compute_slopes(1).slopes == (2.0**-8,)
    assert compute_slopes(2).slopes == (2.0**-4, 2.0**-8)


@pytest.mark.parametrize("n", [0, -3])
def test_slopes_reject_non_positive(n):
    with pytest.raises(ValueError):
        compute_slopes(n)


@given(st.integers(1, 64))
def test_slope_invariants(n):
    s = compute_slopes(n)
    assert s.n_heads == n == len(s.slopes)
    assert all(x > 0 for x in s.slopes)
    assert all(b < a for a, b in zip(s.slopes, s.slopes[1:]))
    assert s.slopes[-1] == pytest.approx(2.0**-8, rel=1e-12)


def test_slopeset_rejects_unordered():
    with pytest.raises(ValueError):
        SlopeSet((0.25, 0.5))
    with pytest.raises(ValueError):
        SlopeSet((0.5, 0.0))


# -- scale factor / PiConfig ---------------------------------------------------

@pytest.mark.parametrize(
    "L, Lp, expected",
    [(2048, 4096, 0.5), (2048, 2048, 1.0), (2048, 1024, 1.0), (64, 96, 64 / 96)],
)
def test_scale_factor(L, Lp, expected):
    assert scale_factor(L, Lp) == expected


@pytest.mark.parametrize("L, Lp", [(0, 10), (10, 0), (-1, 5)])
def test_scale_factor_rejects_non_positive(L, Lp):
    with pytest.raises(ValueError):
        scale_factor(L, Lp)


def test_piconfig_invariants():
    assert PiConfig(64, 128, "fixed").scale == 0.5
    assert PiConfig(64, 128, "baseline").scale == 1.0
    assert PiConfig(64, 32, "fixed").scale == 1.0
    assert PiConfig(64, 128, "per-position").mode == "per_position"
    with pytest.raises(ValueError):
        PiConfig(64, 128, "rope")


def test_per_position_row_scales():
    cfg = PiConfig(64, 128, "per_position")
    rs = cfg.row_scales(128)
    assert np.all(rs[:64] == 1.0)
    assert rs[95] == 64 / 96
    assert rs[127] == 0.5


def test_scaled_slopes():
    assert scaled_slopes(SlopeSet((0.5,)), PiConfig(8, 16)).slopes == (0.25,)
    assert scaled_slopes(SlopeSet((0.5, 0.25)), PiConfig(8, 16, "baseline")).slopes == (0.5, 0.25)
    s8 = compute_slopes(8)
    got = scaled_slopes(s8, PiConfig(64, 96)).slopes
    assert got == tuple(m * (64 / 96) for m in s8.slopes)
    assert all(b < a for a, b in zip(got, got[1:]))


# -- bias rows and matrices --------------------------------------------------

def test_bias_row_examples():
    assert bias_row(3, 1.0).tolist() == [-2.0, -1.0, 0.0]
    assert bias_row(1, 0.5).tolist() == [0.0]
    assert bias_row(4, 0.25 * 0.5).tolist() == [-0.375, -0.25, -0.125, 0.0]
    with pytest.raises(ValueError):
        bias_row(0, 1.0)


def test_bias_matrix_two_positions():
    b = build_bias_matrix(2, SlopeSet((1.0,)), PiConfig.baseline(8))
    assert b.values[0, 0, 0] == 0.0 and np.isneginf(b.values[0, 0, 1])
    assert b.values[0, 1].tolist() == [-1.0, 0.0]


def test_bias_matrix_single_position():
    b = build_bias_matrix(1, compute_slopes(4), PiConfig(2, 4))
    assert b.values.shape == (4, 1, 1)
    assert np.all(b.values == 0.0)


def test_bias_matrix_fixed_mode_row():
    b = build_bias_matrix(4, SlopeSet((0.5,)), PiConfig(2, 4, "fixed"))
    assert b.values[0, 3].tolist() == [-0.75, -0.5, -0.25, 0.0]


def test_bias_matrix_rejects_empty():
    with pytest.raises(ValueError):
        build_bias_matrix(0, compute_slopes(2), PiConfig.baseline(8))


@pytest.mark.parametrize("mode", ["baseline", "fixed", "per_position"])
@pytest.mark.parametrize("n_heads", [1, 2, 4, 8])
def test_bias_matrix_matches_double_loop(mode, n_heads):
    slopes = compute_slopes(n_heads)
    for seq_len in (1, 2, 7, 33, 64):
        cfg = PiConfig(16, seq_len, mode)
        np.testing.assert_array_equal(
            build_bias_matrix(seq_len, slopes, cfg).values, brute_force_bias(seq_len, slopes.slopes, cfg)
        )


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 48), st.integers(1, 8), st.integers(2, 64), st.sampled_from(["fixed", "per_position"]))
def test_bias_structure(seq_len, n_heads, train_len, mode):
    slopes = compute_slopes(n_heads)
    cfg = PiConfig(train_len, seq_len, mode)
    v = build_bias_matrix(seq_len, slopes, cfg).values
    idx = np.arange(seq_len)
    assert np.all(v[:, idx, idx] == 0.0)
    upper = np.triu(np.ones((seq_len, seq_len), bool), 1)
    assert np.all(np.isneginf(v[:, upper]))
    low = np.where(upper, 0.0, v)  # masked cells replaced by 0 for the monotonicity check
    for i in range(seq_len):
        assert np.all(np.diff(low[:, i, : i + 1], axis=-1) >= 0)
    if seq_len <= train_len:
        np.testing.assert_array_equal(v, build_bias_matrix(seq_len, slopes, PiConfig.baseline(train_len)).values)


def test_scale_law_fixed_mode():
    slopes = compute_slopes(8)
    base = build_bias_matrix(96, slopes, PiConfig.baseline(64)).values
    pi = build_bias_matrix(96, slopes, PiConfig(64, 96, "fixed")).values
    allowed = np.tril(np.ones((96, 96), bool))
    np.testing.assert_allclose(pi[:, allowed], base[:, allowed] * (64 / 96), rtol=0, atol=1e-12)


def test_bounded_bias_under_interpolation():
    slopes = compute_slopes(8)
    for L, Lp in [(64, 96), (64, 128), (16, 64)]:
        for m in slopes.slopes:
            fixed = max_bias_magnitude(m, PiConfig(L, Lp, "fixed"))
            base = max_bias_magnitude(m, PiConfig(L, Lp, "baseline"))
            assert fixed == pytest.approx(m * (L / Lp) * (Lp - 1), rel=1e-14)
            assert fixed < m * L
            assert base == m * (Lp - 1)


def test_csv_dump(tmp_path):
    b = build_bias_matrix(3, compute_slopes(2), PiConfig.baseline(8))
    paths = b.to_csv(tmp_path)
    assert [p.name for p in paths] == ["bias_head1.csv", "bias_head2.csv"]
    lines = paths[0].read_text().splitlines()
    assert lines[0] == "0.0,,"
    assert lines[2] == "-0.125,-0.0625,0.0"


# -- attention ---------------------------------------------------------------

def test_attention_singleton_returns_value():
    v = np.array([[1.5, -2.0, 3.0]])
    out = attention(np.ones((1, 3)), np.ones((1, 3)), v, np.array([[-7.0]]))
    np.testing.assert_array_equal(out, v)


def test_attention_two_keys_scalar_oracle():
    m = 0.7
    q = np.array([[1.0, 0.0]])
    k = np.array([[2.0, 1.0], [2.0, -1.0]])  # same q.k for both keys
    v = np.array([[1.0, 0.0], [0.0, 1.0]])
    out, w = attention(q, k, v, np.array([[-m, 0.0]]), return_weights=True)
    expected = [math.exp(-m) / (1 + math.exp(-m)), 1 / (1 + math.exp(-m))]
    np.testing.assert_allclose(w[0], expected, rtol=0, atol=1e-15)
    np.testing.assert_allclose(out[0], expected, rtol=0, atol=1e-15)


def test_attention_masked_keys_get_zero_weight():
    rng = np.random.default_rng(1)
    q, k, v = rng.normal(size=(3, 5, 4))
    bias = build_bias_matrix(5, SlopeSet((0.3,)), PiConfig.baseline(8)).head(0)
    _, w = attention(q, k, v, bias, return_weights=True)
    assert np.all(w[np.triu_indices(5, 1)] == 0.0)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20), st.integers(1, 8), st.floats(-50, 50), st.integers(0, 2**32 - 1))
def test_attention_shift_invariance_and_normalisation(T, d, c, seed):
    rng = np.random.default_rng(seed)
    q, k, v = rng.normal(size=(3, T, d))
    bias = build_bias_matrix(T, SlopeSet((0.5,)), PiConfig(4, T)).head(0)
    out, w = attention(q, k, v, bias, return_weights=True)
    shifted = attention(q, k, v, bias + c)
    np.testing.assert_allclose(shifted, out, rtol=0, atol=1e-9)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, rtol=0, atol=1e-9)


def test_attention_scale_flag():
    q = np.array([[2.0, 0.0, 0.0, 0.0]])
    k = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]])
    v = np.eye(2, 4)
    _, w_scaled = attention(q, k, v, np.zeros((1, 2)), return_weights=True)
    _, w_raw = attention(q, k, v, np.zeros((1, 2)), scale_qk=False, return_weights=True)
    assert w_scaled[0, 0] == pytest.approx(1 / (1 + math.exp(-1.0)))
    assert w_raw[0, 0] == pytest.approx(1 / (1 + math.exp(-2.0)))


def test_attention_dimension_mismatch():
    with pytest.raises(ValueError):
        attention(np.ones((2, 3)), np.ones((2, 4)), np.ones((2, 4)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        attention(np.ones((2, 3)), np.ones((2, 3)), np.ones((2, 3)), np.zeros((2, 3)))


# -- decode rows ---------------------------------------------------------------

@pytest.mark.parametrize("mode", ["baseline", "fixed", "per_position"])
def test_decode_row_first_step(mode):
    assert decode_bias_row(1, 1, 0.5, PiConfig(64, 128, mode)).tolist() == [0.0]


def test_decode_row_per_position():
    row = decode_bias_row(96, 96, 0.5, PiConfig(64, 96, "per_position"))
    np.testing.assert_array_equal(row, bias_row(96, 0.5 * (64 / 96)))
    assert row[-2] == pytest.approx(-1 / 3, rel=1e-15)
    row = decode_bias_row(32, 32, 0.5, PiConfig(64, 96, "per_position"))
    np.testing.assert_array_equal(row, bias_row(32, 0.5))


def test_decode_row_fixed_is_pinned():
    cfg = PiConfig(8, 16, "fixed")
    for t in (1, 5, 16):
        np.testing.assert_array_equal(decode_bias_row(t, t, 0.5, cfg), bias_row(t, 0.25))


def test_decode_row_cache_mismatch():
    with pytest.raises(RuntimeError):
        decode_bias_row(5, 4, 0.5, PiConfig(8, 16))


def test_decode_rows_match_full_matrix():
    slopes = compute_slopes(4)
    for mode in ("fixed", "per_position", "baseline"):
        cfg = PiConfig(16, 40, mode)
        full = build_bias_matrix(40, slopes, cfg).values
        for t in range(1, 41):
            for h, m in enumerate(slopes.slopes):
                np.testing.assert_array_equal(decode_bias_row(t, t, m, cfg), full[h, t - 1, :t])
