import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rangeguard.numerics import (
    FIXED16,
    FIXED32,
    FLOAT32,
    CorrectionPolicy,
    NumericFormat,
    NumericsError,
    Tensor,
    clip,
    decode,
    encode,
    flip_bits,
    quantize_array,
)

Q16_2 = NumericFormat.fixed(16, 2)
Q16_0 = NumericFormat.fixed(16, 0)


# -- encode / decode --------------------------------------------------


def test_encode_fixed_example():
    assert encode(2.75, Q16_2) == 11  # 2.75 * 4


def test_encode_saturates_at_range_end():
    raw = encode(1e9, Q16_2)
    assert raw == Q16_2.qmax
    assert decode(raw, Q16_2) == 8191.75


def test_encode_zero_is_raw_zero():
    for fmt in (FLOAT32, FIXED16, FIXED32, Q16_0):
        assert encode(0.0, fmt) == 0


def test_encode_rounds_half_away_from_zero():
    assert encode(0.125, Q16_2) == 1  # 0.5 raw rounds up
    assert encode(-0.125, Q16_2) == -1
    assert encode(0.124, Q16_2) == 0


def test_fixed16_default_split():
    # 14 integer bits and 2 fractional bits
    assert FIXED16.frac_bits == 2
    assert FIXED16.min_value == -8192.0
    assert FIXED16.max_value == 8191.75


def test_negative_saturation():
    assert decode(encode(-1e9, Q16_2), Q16_2) == -8192.0


@given(st.integers())
def test_encode_decode_identity_on_representable(raw):
    raw = raw % (Q16_2.qmax - Q16_2.qmin + 1) + Q16_2.qmin
    assert encode(decode(raw, Q16_2), Q16_2) == raw


def test_float32_roundtrip():
    for v in (0.0, 1.0, -2.5, 3.14159, 1e30):
        assert decode(encode(v, FLOAT32), FLOAT32) == np.float32(v)


def test_quantize_array_matches_scalar_encode():
    values = np.array([2.75, -0.125, 1e9, -1e9, 0.0, 7.3])
    raws = quantize_array(values, Q16_2)
    assert raws.tolist() == [encode(v, Q16_2) for v in values]


# -- flip_bits ---------------------------------------------------------


def test_flip_bit10_of_two_gives_1026():
    # the high-order flip that turns a pool output of 2 into 1024 + 2
    assert flip_bits(2, [10], Q16_0) == 1026


def test_flip_involution_examples():
    for raw in (0, 2, -5, 1234):
        for bits in ([0], [3, 7], [15]):
            assert flip_bits(flip_bits(raw, bits, Q16_0), bits, Q16_0) == raw


def test_float32_sign_bit_flip():
    raw = encode(1.0, FLOAT32)
    assert decode(flip_bits(raw, [31], FLOAT32), FLOAT32) == -1.0


def test_flip_position_out_of_width():
    with pytest.raises(NumericsError):
        flip_bits(1, [16], Q16_0)
    with pytest.raises(NumericsError):
        flip_bits(1, [32], FLOAT32)


def test_flip_duplicate_positions_rejected():
    with pytest.raises(NumericsError):
        flip_bits(1, [3, 3], Q16_0)


@given(
    st.integers(min_value=-(1 << 15), max_value=(1 << 15) - 1),
    st.sets(st.integers(min_value=0, max_value=15), min_size=1, max_size=5),
)
def test_flip_touches_exactly_the_stated_bits(raw, positions):
    flipped = flip_bits(raw, positions, Q16_0)
    xor = (raw ^ flipped) & 0xFFFF
    assert bin(xor).count("1") == len(positions)
    assert flip_bits(flipped, positions, Q16_0) == raw


def test_flip_value_delta_exhaustive_16bit():
    # flipping non-sign bit k changes the decoded value by exactly +/- 2^(k-f)
    fmt = Q16_2
    raws = np.arange(fmt.qmin, fmt.qmax + 1, dtype=np.int64)
    u = raws & 0xFFFF
    for k in range(15):  # sign bit excluded
        flipped_u = u ^ (1 << k)
        flipped = np.where(flipped_u >= 1 << 15, flipped_u - (1 << 16), flipped_u)
        delta = (flipped - raws) / fmt.scale
        assert set(np.unique(np.abs(delta))) == {2 ** (k - fmt.frac_bits)}


def test_sign_bit_flip_reinterprets_twos_complement():
    assert flip_bits(0, [15], Q16_0) == -(1 << 15)
    assert flip_bits(-1, [15], Q16_0) == (1 << 15) - 1


# -- clip --------------------------------------------------------------


def test_clip_restores_fault_to_bound():
    assert clip(1026, 0, 10, CorrectionPolicy.TO_BOUND) == 10


def test_clip_identity_inside_range():
    assert clip(5, 0, 10, CorrectionPolicy.TO_BOUND) == 5


def test_clip_to_zero_policy():
    assert clip(1026, 0, 10, CorrectionPolicy.TO_ZERO) == 0
    assert clip(5, 0, 10, CorrectionPolicy.TO_ZERO) == 5


def test_clip_random_policy_draws_in_range():
    rng = np.random.default_rng(3)
    for _ in range(100):
        v = clip(1026, 0, 10, CorrectionPolicy.RANDOM_IN_RANGE, rng)
        assert 0 <= v <= 10
    assert clip(5, 0, 10, CorrectionPolicy.RANDOM_IN_RANGE, rng) == 5


def test_clip_rejects_inverted_range():
    with pytest.raises(NumericsError):
        clip(1, 10, 0)


def test_clip_nan_propagates_under_to_bound():
    assert math.isnan(clip(float("nan"), 0, 10, CorrectionPolicy.TO_BOUND))


@given(
    st.floats(allow_nan=False, allow_infinity=False, width=32),
    st.floats(min_value=-100, max_value=0),
    st.floats(min_value=0, max_value=100),
)
def test_clip_to_bound_properties(value, low, up):
    out = clip(value, low, up)
    assert low <= out <= up
    assert clip(out, low, up) == out  # idempotent


@settings(max_examples=200)
@given(
    st.floats(min_value=-1e6, max_value=1e6),
    st.floats(min_value=-1e6, max_value=1e6),
)
def test_clip_to_bound_monotone(a, b):
    lo, hi = -3.0, 7.0
    if a <= b:
        assert clip(a, lo, hi) <= clip(b, lo, hi)


# -- Tensor ------------------------------------------------------------


def test_tensor_saturates_on_write():
    t = Tensor.from_values([1e9, -1e9, 2.5], Q16_2)
    assert t.data.tolist() == [Q16_2.qmax, Q16_2.qmin, 10]


def test_tensor_shape_mismatch():
    with pytest.raises(NumericsError):
        Tensor.from_values([1.0, 2.0], FLOAT32, shape=(3,))


def test_tensor_float_roundtrip():
    vals = np.array([[0.5, -1.25]], dtype=np.float32)
    t = Tensor.from_values(vals, FLOAT32)
    assert np.array_equal(t.to_floats(), vals)
