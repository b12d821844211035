import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scalecodec import rangecoder
from scalecodec.rangecoder import (TOTAL_FREQ, TruncatedPayloadError, cumulative, decode_symbols,
                                   encode_symbols, quantize_pmf)


def test_quantize_pmf_sums_to_total_and_keeps_support():
    rng = np.random.default_rng(0)
    for _ in range(50):
        p = rng.dirichlet(np.full(129, 0.05))
        f = quantize_pmf(p)
        assert f.sum() == TOTAL_FREQ
        assert f.min() >= 1


def test_quantize_pmf_uniform_is_exact():
    f = quantize_pmf(np.full(4, 0.25))
    assert f.tolist() == [16384] * 4


def test_uniform_four_symbols_cost():
    # 1000 symbols x 2 bits = 250 bytes of information; the flush adds at most 5 bytes
    cum = cumulative([16384] * 4)
    syms = np.random.default_rng(1).integers(0, 4, size=1000).tolist()
    data = encode_symbols(syms, [cum] * 1000)
    assert 250 <= len(data) <= 255
    assert decode_symbols(data, [cum] * 1000) == syms


def test_empty_message_is_flush_only():
    data = encode_symbols([], [])
    assert len(data) <= 4
    assert decode_symbols(data, []) == []


def test_deterministic_output():
    cum = cumulative([100, 30000, 35000, 436])
    syms = [1, 2, 2, 0, 3, 1] * 50
    assert encode_symbols(syms, [cum] * len(syms)) == encode_symbols(syms, [cum] * len(syms))


def test_truncated_payload_raises():
    cum = cumulative([16384] * 4)
    syms = [0, 1, 2, 3] * 40
    data = encode_symbols(syms, [cum] * len(syms))
    with pytest.raises((TruncatedPayloadError, ValueError)):
        decode_symbols(data[:-1], [cum] * len(syms))


def test_trailing_bytes_rejected():
    cum = cumulative([16384] * 4)
    data = encode_symbols([1, 2], [cum, cum])
    with pytest.raises(ValueError):
        decode_symbols(data + b"\x00", [cum, cum])


def test_carry_propagation_with_skewed_tables():
    # near-certain symbols interleaved with rare ones push `low` across byte boundaries
    cum = cumulative([65535, 1])
    rng = np.random.default_rng(3)
    syms = (rng.random(20000) < 0.02).astype(int).tolist()
    data = encode_symbols(syms, [cum] * len(syms))
    assert decode_symbols(data, [cum] * len(syms)) == syms


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 2000), min_size=2, max_size=40), st.data())
def test_roundtrip_random_tables(weights, data):
    p = np.asarray(weights, dtype=float)
    cum = cumulative(quantize_pmf(p / p.sum()))
    syms = data.draw(st.lists(st.integers(0, len(weights) - 1), max_size=300))
    enc = encode_symbols(syms, [cum] * len(syms))
    assert decode_symbols(enc, [cum] * len(syms)) == syms


def test_cost_tracks_information_content():
    rng = np.random.default_rng(7)
    p = rng.dirichlet(np.ones(16))
    freq = quantize_pmf(p)
    cum = cumulative(freq)
    syms = rng.choice(16, size=5000, p=p)
    info = -sum(math.log2(freq[s] / TOTAL_FREQ) for s in syms)
    data = encode_symbols(syms.tolist(), [cum] * len(syms))
    assert info - 8 <= 8 * len(data) <= info + 64
