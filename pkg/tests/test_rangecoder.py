"""Range coder: lossless round trips and size behavior."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tokenwire.context import Pmf, quantize_weights, uniform_pmf
from tokenwire.errors import DecodeError
from tokenwire.rangecoder import CodedSlice, decode_symbols, encode_symbols, ideal_bits


def random_pmf(rng, vocab):
    w = rng.uniform(0.0, 1.0, size=vocab) ** 4 + 1e-9
    return Pmf(quantize_weights(w))


@given(st.integers(0, 2**32 - 1), st.integers(2, 64), st.integers(0, 400))
@settings(max_examples=120, deadline=None)
def test_round_trip_is_lossless(seed, vocab, n):
    rng = np.random.default_rng(seed)
    pmfs = [random_pmf(rng, vocab) for _ in range(min(n, 8))]
    pmfs = [pmfs[i % len(pmfs)] for i in range(n)] if pmfs else []
    symbols = [int(rng.integers(0, vocab)) for _ in range(n)]
    coded = encode_symbols(symbols, pmfs)
    assert coded.n_symbols == n
    assert decode_symbols(coded, pmfs) == symbols


@given(st.integers(0, 2**32 - 1), st.integers(2, 32), st.integers(1, 300))
@settings(max_examples=60, deadline=None)
def test_size_close_to_ideal(seed, vocab, n):
    rng = np.random.default_rng(seed)
    pmf = random_pmf(rng, vocab)
    # Draw symbols from the pmf itself so ideal_bits reflects the true cost.
    p = pmf.freq / pmf.freq.sum()
    symbols = rng.choice(vocab, size=n, p=p).tolist()
    coded = encode_symbols(symbols, [pmf] * n)
    bound = math.ceil(ideal_bits(symbols, [pmf] * n) / 8) + 8
    assert len(coded.payload) <= bound


def test_empty_slice():
    coded = encode_symbols([], [])
    assert decode_symbols(coded, []) == []


def test_determinism():
    pmf = uniform_pmf(10)
    a = encode_symbols([1, 2, 3], [pmf] * 3)
    b = encode_symbols([1, 2, 3], [pmf] * 3)
    assert a.payload == b.payload


def test_skewed_pmf_compresses():
    w = np.full(16, 1e-6)
    w[3] = 1.0
    pmf = Pmf(quantize_weights(w))
    n = 2000
    coded = encode_symbols([3] * n, [pmf] * n)
    # Near-certain symbols cost well under a bit each.
    assert len(coded.payload) * 8 < 0.1 * n


def test_encode_validation():
    pmf = uniform_pmf(4)
    with pytest.raises(ValueError):
        encode_symbols([0, 1], [pmf])
    with pytest.raises(ValueError):
        encode_symbols([4], [pmf])
    with pytest.raises(ValueError):
        encode_symbols([-1], [pmf])


def test_truncated_payload_raises():
    pmf = uniform_pmf(256)
    symbols = list(range(200))
    coded = encode_symbols(symbols, [pmf] * 200)
    clipped = CodedSlice(coded.payload[: len(coded.payload) // 2], 200)
    with pytest.raises(DecodeError, match="truncated"):
        decode_symbols(clipped, [pmf] * 200)


def test_pmf_count_mismatch_raises():
    pmf = uniform_pmf(4)
    coded = encode_symbols([1, 2], [pmf] * 2)
    with pytest.raises(DecodeError):
        decode_symbols(coded, [pmf] * 3)


def test_ideal_bits_uniform_is_log2():
    pmf = uniform_pmf(1024)
    assert ideal_bits([5] * 7, [pmf] * 7) == pytest.approx(70.0)
