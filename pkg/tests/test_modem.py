import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dsrdm.modem import (
    SUPPORTED_ORDERS,
    alphabet_moments,
    analytic_qam_ber,
    approx_qam_ber,
    bit_patterns,
    bits_per_symbol,
    constellation,
    demodulate,
    modulate,
    pad_bits,
    qfunc,
    signal_to_symbols,
    symbols_to_signal,
)


def brute_force_ber(M, snr):
    """Exact Gray-QAM BER by enumerating every symbol and axis decision region.

    Each axis is an independent PAM with noise std sqrt(Es/(2 snr)); the
    probability of deciding level j given level i is a difference of Q terms
    at the region edges.
    """
    pts = constellation(M)
    pats = bit_patterns(M)
    k = bits_per_symbol(M)
    sd = math.sqrt(1.0 / (2.0 * snr))
    levels = np.unique(pts.real)
    edges = np.concatenate([[-np.inf], (levels[1:] + levels[:-1]) / 2, [np.inf]])
    # probability that an axis value `a` lands in each level's region
    def axis_probs(a):
        upper = np.array([qfunc((e - a) / sd) if np.isfinite(e) else 0.0 for e in edges[1:]])
        lower = np.array([qfunc((e - a) / sd) if np.isfinite(e) else 1.0 for e in edges[:-1]])
        return lower - upper

    lookup = {complex(p): pats[i] for i, p in enumerate(pts)}
    total = 0.0
    for i, p in enumerate(pts):
        pi, pq = axis_probs(p.real), axis_probs(p.imag)
        for a, b in itertools.product(range(len(levels)), repeat=2):
            w = pi[a] * pq[b]
            if w == 0:
                continue
            got = lookup[complex(levels[a] + 1j * levels[b])]
            total += w * np.count_nonzero(got != pats[i])
    return total / (M * k)


class TestConstellation:
    @pytest.mark.parametrize("M", SUPPORTED_ORDERS)
    def test_bijection(self, M):
        pts = constellation(M)
        pats = bit_patterns(M)
        assert len(set(np.round(pts, 12))) == M
        assert len({tuple(p) for p in pats}) == M
        back = demodulate(modulate(pats.ravel(), M), M).reshape(M, -1)
        np.testing.assert_array_equal(back, pats)

    @pytest.mark.parametrize("M", SUPPORTED_ORDERS)
    def test_unit_average_energy(self, M):
        assert np.mean(np.abs(constellation(M)) ** 2) == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("M", SUPPORTED_ORDERS)
    def test_gray_adjacency(self, M):
        pts, pats = constellation(M), bit_patterns(M)
        dmin = min(abs(a - b) for a, b in itertools.combinations(pts, 2))
        for i, j in itertools.combinations(range(M), 2):
            if abs(abs(pts[i] - pts[j]) - dmin) < 1e-9:
                assert np.count_nonzero(pats[i] != pats[j]) == 1

    def test_qpsk_first_point(self):
        assert modulate([0, 0], 4)[0] == pytest.approx((1 + 1j) / math.sqrt(2))

    def test_16qam_power_example(self):
        assert np.mean(np.abs(constellation(16)) ** 2) == pytest.approx(1.0)

    def test_unsupported_order(self):
        with pytest.raises(ValueError):
            constellation(32)


class TestModulate:
    def test_bits_must_fill_symbols(self):
        with pytest.raises(ValueError):
            modulate([0, 1, 1], 16)

    def test_rejects_non_binary(self):
        with pytest.raises(ValueError):
            modulate([0, 2, 1, 1], 16)

    def test_pad_bits(self):
        padded, n = pad_bits(np.ones(5, np.uint8), 16)
        assert padded.size == 8 and n == 3
        assert padded[5:].sum() == 0

    def test_tie_breaks_to_smallest_pattern(self):
        # the origin is equidistant from all four QPSK points
        np.testing.assert_array_equal(demodulate(np.array([0j]), 4), [0, 0])

    @settings(max_examples=30, deadline=None)
    @given(st.sampled_from(SUPPORTED_ORDERS), st.integers(0, 40), st.integers(0, 2**31 - 1))
    def test_roundtrip(self, M, n, seed):
        k = bits_per_symbol(M)
        bits = np.random.default_rng(seed).integers(0, 2, n * k, dtype=np.uint8)
        np.testing.assert_array_equal(demodulate(modulate(bits, M), M), bits)

    @settings(max_examples=30, deadline=None)
    @given(st.sampled_from(SUPPORTED_ORDERS), st.integers(0, 2**31 - 1))
    def test_small_perturbation_keeps_decision(self, M, seed):
        rng = np.random.default_rng(seed)
        syms = rng.choice(constellation(M), 64)
        dmin = min(abs(a - b) for a, b in itertools.combinations(constellation(M), 2))
        jitter = 0.49 * dmin / math.sqrt(2) * (rng.uniform(-1, 1, 64) + 1j * rng.uniform(-1, 1, 64))
        np.testing.assert_array_equal(demodulate(syms + jitter, M), demodulate(syms, M))


class TestSignal:
    def test_empty_payload_is_all_padding(self):
        rng = np.random.default_rng(0)
        blk = symbols_to_signal(np.zeros(0, complex), (2, 2, 3), 16, rng)
        assert blk.length == 0
        assert blk.values.size == 12
        assert bool(np.all(blk.padding))

    @pytest.mark.parametrize("M", SUPPORTED_ORDERS)
    def test_standardized_moments(self, M):
        mu, sigma = alphabet_moments(M)
        assert mu == pytest.approx(0.0, abs=1e-15)
        assert sigma == pytest.approx(1 / math.sqrt(2))
        syms = np.random.default_rng(1).choice(constellation(M), 20_000)
        blk = symbols_to_signal(syms, (200, 200), M)
        assert blk.values.mean() == pytest.approx(0.0, abs=0.02)
        assert blk.values.var() == pytest.approx(1.0, rel=0.03)

    def test_roundtrip_through_signal(self):
        syms = modulate(np.random.default_rng(2).integers(0, 2, 384, dtype=np.uint8), 16)
        blk = symbols_to_signal(syms, (8, 8, 3), 16, np.random.default_rng(3))
        np.testing.assert_allclose(signal_to_symbols(blk), syms, atol=1e-12)

    def test_too_many_symbols(self):
        with pytest.raises(ValueError):
            symbols_to_signal(np.ones(97, complex), (8, 8, 3), 16)


class TestAnalyticBer:
    @pytest.mark.parametrize("M", SUPPORTED_ORDERS)
    @pytest.mark.parametrize("snr_db", [0, 5, 10, 15])
    def test_matches_enumeration(self, M, snr_db):
        snr = 10 ** (snr_db / 10)
        assert analytic_qam_ber(M, snr) == pytest.approx(brute_force_ber(M, snr), rel=1e-9, abs=1e-15)

    def test_qpsk_is_q_of_sqrt_snr(self):
        for snr in (0.5, 1.0, 10.0):
            assert analytic_qam_ber(4, snr) == pytest.approx(qfunc(math.sqrt(snr)))

    def test_high_snr_agrees_with_nearest_neighbour_form(self):
        snr = 10 ** 2.2
        assert approx_qam_ber(16, snr) == pytest.approx(analytic_qam_ber(16, snr), rel=0.01)

    def test_low_snr_approaches_half(self):
        assert analytic_qam_ber(4, 1e-9) == pytest.approx(0.5, abs=1e-4)
        with pytest.raises(ValueError):
            analytic_qam_ber(16, 0.0)

    def test_monte_carlo_16qam_10db(self):
        rng = np.random.default_rng(4)
        n = 10**6
        bits = rng.integers(0, 2, 4 * n, dtype=np.uint8)
        syms = modulate(bits, 16)
        snr = 10.0
        sd = math.sqrt(1 / (2 * snr))
        rx = syms + sd * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
        ber = np.mean(demodulate(rx, 16) != bits)
        p = analytic_qam_ber(16, snr)
        assert abs(ber - p) < 3 * math.sqrt(p * (1 - p) / bits.size)
