"""Quantizer tests: rounding, absmean scaling, activation codes, and oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ternlm.errors import DimensionError, ValidationError
from ternlm.quantizer import (
    QuantizerParams,
    absmean_scale,
    dequantize_output,
    dequantize_weights,
    quantize_activations,
    quantize_weights,
    round_clip,
    round_half_away,
)


# ---------------------------------------------------------------------------
# independent scalar oracles
# ---------------------------------------------------------------------------

def oracle_round_half_away(x: float) -> int:
    """Pick the nearer of floor/ceil; on an exact tie go away from zero."""
    f, c = math.floor(x), math.ceil(x)
    if f == c:
        return f
    df, dc = x - f, c - x
    if df < dc:
        return f
    if dc < df:
        return c
    return c if x > 0 else f


def oracle_quantize(w, epsilon: float):
    rows = [[float(v) for v in row] for row in w]
    n = len(rows) * len(rows[0])
    gamma = math.fsum(abs(v) for row in rows for v in row) / n
    denom = gamma + epsilon
    codes = []
    for row in rows:
        if denom == 0.0:
            codes.append([0] * len(row))
        else:
            codes.append([max(-1, min(1, oracle_round_half_away(v / denom))) for v in row])
    return codes, gamma


# ---------------------------------------------------------------------------
# round_clip
# ---------------------------------------------------------------------------

def test_round_clip_examples():
    assert round_clip(0.4, -1, 1) == 0
    assert round_clip(2.4, -1, 1) == 1
    assert round_clip(-0.5, -1, 1) == -1


def test_round_half_away_ties_match_oracle():
    ties = [k + 0.5 for k in range(-6, 6)] + [-(k + 0.5) for k in range(6)]
    for x in ties:
        assert round_half_away(x) == oracle_round_half_away(x), x


def test_round_half_away_near_tie_edge_cases():
    # largest double below 0.5 must not round up
    x = np.nextafter(0.5, 0.0)
    assert round_half_away(x) == 0.0
    assert round_half_away(-x) == 0.0
    assert round_half_away(np.nextafter(0.5, 1.0)) == 1.0


@settings(max_examples=100, deadline=None)
@given(
    st.floats(min_value=-1e6, max_value=1e6),
    st.integers(min_value=-10, max_value=10),
    st.integers(min_value=0, max_value=10),
)
def test_round_clip_bounds_property(x, a, width):
    b = a + width
    r = round_clip(x, a, b)
    assert a <= r <= b
    assert r == float(np.clip(oracle_round_half_away(x), a, b))


def test_round_clip_rejects_inverted_bounds():
    with pytest.raises(ValidationError):
        round_clip(0.0, 2, 1)


# ---------------------------------------------------------------------------
# absmean + weight quantization
# ---------------------------------------------------------------------------

def test_absmean_examples():
    assert absmean_scale([[1, -1], [1, -1]]) == 1.0
    assert absmean_scale([[0, 0], [0, 0]]) == 0.0
    assert abs(absmean_scale([[0.3, -2.0], [0.05, 1.2]]) - 0.8875) < 1e-15


def test_absmean_rejects_empty():
    with pytest.raises(DimensionError):
        absmean_scale(np.zeros((0, 3)))


def test_quantize_weights_examples():
    codes, gamma = quantize_weights([[0.3, -2.0], [0.05, 1.2]])
    assert codes.tolist() == [[0, -1], [0, 1]]
    assert abs(gamma - 0.8875) < 1e-15

    codes, gamma = quantize_weights(np.zeros((3, 3)))
    assert not codes.any()
    assert gamma == 0.0

    codes, gamma = quantize_weights([[10.0, -10.0]])
    assert codes.tolist() == [[1, -1]]
    assert gamma == 10.0


def test_quantize_weights_rejects_nonfinite():
    with pytest.raises(ValidationError):
        quantize_weights([[1.0, np.nan]])
    with pytest.raises(ValidationError):
        quantize_weights([[np.inf, 0.0]])


def test_quantize_weights_matches_scalar_oracle():
    rng = np.random.default_rng(7)
    params = QuantizerParams()
    for _ in range(300):
        n, m = rng.integers(1, 17, size=2)
        w = rng.uniform(-4, 4, size=(n, m))
        codes, gamma = quantize_weights(w, params)
        ref_codes, ref_gamma = oracle_quantize(w, params.epsilon)
        assert codes.tolist() == ref_codes
        assert abs(gamma - ref_gamma) < 1e-12


@settings(max_examples=80, deadline=None)
@given(
    hnp.arrays(
        np.float64,
        hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=12),
        elements=st.floats(min_value=-100, max_value=100),
    )
)
def test_quantize_weights_alphabet_property(w):
    codes, gamma = quantize_weights(w)
    assert np.isin(codes, (-1, 0, 1)).all()
    assert gamma >= 0.0
    assert (gamma == 0.0) == (not np.abs(w).any())


def test_scale_invariance_power_of_two_exact():
    # multiplying by 2**k scales every float exactly, so gamma scales exactly
    # and the codes are bit-identical (epsilon 0 keeps the divisor exact too)
    rng = np.random.default_rng(11)
    params = QuantizerParams(epsilon=0.0)
    for k in (-8, -3, 1, 4, 9):
        c = 2.0**k
        w = rng.uniform(-4, 4, size=(9, 7))
        codes, gamma = quantize_weights(w, params)
        codes_c, gamma_c = quantize_weights(c * w, params)
        assert gamma_c == c * gamma
        assert np.array_equal(codes, codes_c)


def test_scale_invariance_generic_factor_away_from_boundaries():
    # arbitrary positive factors preserve the codes whenever no entry sits
    # within 1e-9 of the rounding boundary 0.5
    rng = np.random.default_rng(13)
    params = QuantizerParams(epsilon=0.0)
    checked = 0
    while checked < 50:
        w = rng.uniform(-4, 4, size=(8, 8))
        gamma = absmean_scale(w)
        if gamma == 0.0:
            continue
        y = np.abs(w) / gamma
        if np.any(np.abs(y - 0.5) < 1e-6):
            continue
        c = float(rng.uniform(0.1, 10.0))
        codes, _ = quantize_weights(w, params)
        codes_c, _ = quantize_weights(c * w, params)
        assert np.array_equal(codes, codes_c)
        checked += 1


def test_quantizer_params_validation():
    with pytest.raises(ValidationError):
        QuantizerParams(epsilon=-1e-9)
    with pytest.raises(ValidationError):
        QuantizerParams(q_b=0)
    with pytest.raises(ValidationError):
        QuantizerParams(q_b=128)
    QuantizerParams(epsilon=0.0)  # permitted for exactness experiments


# ---------------------------------------------------------------------------
# activation quantization
# ---------------------------------------------------------------------------

def test_quantize_activations_examples():
    qa = quantize_activations([[0.5, -1.0, 0.25]])
    assert qa.betas.tolist() == [1.0]
    assert qa.codes.tolist() == [[64, -127, 32]]  # round(63.5) goes away from zero

    qa = quantize_activations([[0.0, 0.0, 0.0]])
    assert qa.betas.tolist() == [1.0]
    assert qa.codes.tolist() == [[0, 0, 0]]

    for c in (3.7, -0.002, 1e6):
        qa = quantize_activations([[c]])
        assert abs(int(qa.codes[0, 0])) == 127


def test_quantize_activations_rejects_nonfinite():
    with pytest.raises(ValidationError):
        quantize_activations([[np.nan]])


def test_activation_reconstruction_error_bound():
    rng = np.random.default_rng(3)
    params = QuantizerParams()
    for _ in range(200):
        x = rng.uniform(-7, 7, size=(rng.integers(1, 9), rng.integers(1, 65)))
        qa = quantize_activations(x, params)
        recon = qa.codes.astype(np.float64) * qa.betas[:, None] / params.q_b
        bound = qa.betas[:, None] / (2 * params.q_b) + 1e-12
        assert (np.abs(x - recon) <= bound).all()


def test_activation_codes_within_qb():
    rng = np.random.default_rng(5)
    for q_b in (1, 7, 127):
        x = rng.normal(size=(6, 40)) * 10
        qa = quantize_activations(x, QuantizerParams(q_b=q_b))
        assert np.abs(qa.codes).max() <= q_b


def test_determinism_bit_identical():
    rng = np.random.default_rng(17)
    w = rng.normal(size=(20, 20))
    c1, g1 = quantize_weights(w)
    c2, g2 = quantize_weights(w.copy())
    assert np.array_equal(c1, c2) and g1 == g2
    x = rng.normal(size=(5, 30))
    a1, a2 = quantize_activations(x), quantize_activations(x.copy())
    assert np.array_equal(a1.codes, a2.codes) and np.array_equal(a1.betas, a2.betas)


# ---------------------------------------------------------------------------
# dequantization
# ---------------------------------------------------------------------------

def test_dequantize_output_examples():
    out = dequantize_output([[1]], gamma=2.0, betas=[3.0], q_b=127)
    assert np.allclose(out, [[6.0 / 127.0]], rtol=1e-14)
    assert not dequantize_output([[5, -3]], gamma=0.0, betas=[2.0]).any()
    assert not dequantize_output(np.zeros((2, 2), int), gamma=1.5, betas=[1.0, 2.0]).any()


def test_dequantize_output_length_mismatch():
    with pytest.raises(DimensionError):
        dequantize_output(np.zeros((3, 2), int), 1.0, betas=[1.0, 2.0])


def test_dequantize_weights_is_gamma_times_codes():
    codes = np.array([[1, -1, 0]], dtype=np.int8)
    assert dequantize_weights(codes, 0.25).tolist() == [[0.25, -0.25, 0.0]]
