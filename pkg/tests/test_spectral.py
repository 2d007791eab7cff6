"""Transforms, band partitioning and the radial energy spectrum."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from freqmoe import pde, spectral
from freqmoe.errors import ConfigurationError, DataError, ShapeError
from freqmoe.spectral import BandBlock, BandLayout, SpectrumGrid


def naive_rfft2(x):
    """Direct DFT sum, used as an independent oracle for small grids."""
    S = x.shape[-1]
    n = np.arange(S)
    E = np.exp(-2j * np.pi * np.outer(n, n) / S)
    return (E @ x @ E.T)[..., : S // 2 + 1]


class TestTransforms:
    def test_constant_field_dc_only(self):
        spec = spectral.forward_rfft2(np.full((1, 8, 8), 3.0))
        assert spec.coeffs[0, 0, 0] == 192 + 0j
        rest = spec.coeffs.copy()
        rest[0, 0, 0] = 0
        assert np.abs(rest).max() < 1e-12

    def test_single_cosine_two_conjugate_coefficients(self):
        S = 16
        X, _ = np.meshgrid(np.arange(S), np.arange(S), indexing="ij")
        c = spectral.rfft2(np.cos(2 * np.pi * X / S))
        nz = np.argwhere(np.abs(c) > 1e-9)
        assert sorted(map(tuple, nz)) == [(1, 0), (S - 1, 0)]
        assert np.isclose(c[1, 0], S * S / 2)
        assert np.isclose(c[S - 1, 0], np.conj(c[1, 0]))

    def test_matches_naive_dft(self, rng):
        x = rng.standard_normal((2, 8, 8))
        np.testing.assert_allclose(spectral.rfft2(x), naive_rfft2(x), atol=1e-10)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**31), log_s=st.integers(1, 6))
    def test_round_trip(self, seed, log_s):
        S = 2**log_s
        x = np.random.default_rng(seed).standard_normal((3, S, S))
        back = spectral.inverse_rfft2(spectral.forward_rfft2(x))
        assert np.abs(back - x).max() <= 1e-10 * max(1.0, np.abs(x).max())

    def test_inverse_of_zero_and_dc(self):
        S = 8
        zero = SpectrumGrid(np.zeros((1, S, S // 2 + 1), complex), S)
        assert not spectral.inverse_rfft2(zero).any()
        dc = zero.coeffs.copy()
        dc[0, 0, 0] = S * S
        np.testing.assert_allclose(spectral.inverse_rfft2(SpectrumGrid(dc, S)), 1.0, atol=1e-14)

    def test_linearity(self, rng):
        x, y = rng.standard_normal((2, 2, 16, 16))
        a, b = 1.7, -0.3
        lhs = spectral.rfft2(a * x + b * y)
        rhs = a * spectral.rfft2(x) + b * spectral.rfft2(y)
        assert np.abs(lhs - rhs).max() < 1e-10

    def test_rejects_bad_sizes_and_values(self):
        with pytest.raises(ConfigurationError):
            spectral.forward_rfft2(np.zeros((1, 12, 12)))
        bad = np.zeros((1, 8, 8))
        bad[0, 3, 3] = np.nan
        with pytest.raises(DataError):
            spectral.forward_rfft2(bad)
        with pytest.raises(ShapeError):
            SpectrumGrid(np.zeros((1, 8, 8), complex), 8)

    def test_power_of_two(self):
        assert [n for n in range(70) if spectral.is_power_of_two(n)] == [2, 4, 8, 16, 32, 64]


class TestTransformGradients:
    """The backward helpers against central differences of a linear functional."""

    def test_rfft2_backward(self, rng):
        S = 8
        x = rng.standard_normal((S, S))
        G = rng.standard_normal((S, S // 2 + 1)) + 1j * rng.standard_normal((S, S // 2 + 1))
        loss = lambda v: np.real(np.sum(np.conj(G) * spectral.rfft2(v)))
        g = spectral.rfft2_backward(G, S)
        fd = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            e = np.zeros_like(x)
            e[idx] = 1e-6
            fd[idx] = (loss(x + e) - loss(x - e)) / 2e-6
        np.testing.assert_allclose(g, fd, atol=1e-6)

    def test_irfft2_backward(self, rng):
        S = 8
        X = rng.standard_normal((S, S // 2 + 1)) + 1j * rng.standard_normal((S, S // 2 + 1))
        w = rng.standard_normal((S, S))
        loss = lambda V: np.sum(w * spectral.irfft2(V, S))
        g = spectral.irfft2_backward(w)
        for idx in np.ndindex(X.shape):
            for unit in (1.0, 1j):
                e = np.zeros_like(X)
                e[idx] = 1e-6 * unit
                fd = (loss(X + e) - loss(X - e)) / 2e-6
                an = g[idx].real if unit == 1.0 else g[idx].imag
                assert abs(fd - an) < 1e-7


def _index_spectrum(S):
    """Half spectrum whose entries encode their own flat index."""
    return np.arange(S * (S // 2 + 1), dtype=float).reshape(S, S // 2 + 1).astype(complex)


class TestBandLayout:
    def test_counts(self):
        layout = BandLayout((4, 4), (8, 8))
        assert layout.n_bands == 64
        assert layout.n_expert_bands == 63
        assert layout.retained_modes == (32, 32)
        assert list(layout.band_ids())[0] == (0, 0)
        assert (0, 0) not in layout.expert_band_ids()

    def test_base_band_indices(self):
        layout = BandLayout((4, 4), (2, 2))
        top, bottom = layout.band_rows((0, 0), 64)
        assert list(top) == [0, 1, 2, 3]
        assert list(bottom) == [60, 61, 62, 63]
        assert list(layout.band_cols((0, 0))) == [0, 1, 2, 3]

    def test_last_band_of_8x8_layout(self):
        layout = BandLayout((4, 4), (8, 8))
        top, bottom = layout.band_rows((7, 7), 64)
        assert list(layout.band_cols((7, 7))) == [28, 29, 30, 31]
        assert list(top) == [28, 29, 30, 31]
        # mirrored rows S-(i1+1)P1 .. S-i1*P1-1
        assert list(bottom) == [32, 33, 34, 35]

    @pytest.mark.parametrize("P", [2, 4])
    @pytest.mark.parametrize("J", [2, 4, 8])
    def test_partition_is_disjoint_and_complete(self, P, J):
        S = 2 * J * P
        layout = BandLayout((P, P), (J, J))
        spec = SpectrumGrid(_index_spectrum(S), S)
        seen = []
        for band in layout.band_ids():
            seen.extend(spectral.extract_band(spec, band, layout).values.real.ravel().astype(int))
        assert len(seen) == len(set(seen))
        retained = spectral.truncate_modes(spec, layout.retained_modes).coeffs.real
        region = {int(v) for v in retained.ravel() if v != 0}
        region.add(0)  # DC entry has index value 0
        assert set(seen) == region

    def test_out_of_range_band(self):
        layout = BandLayout((2, 2), (2, 2))
        spec = SpectrumGrid(np.zeros((8, 5), complex), 8)
        with pytest.raises(ConfigurationError):
            spectral.extract_band(spec, (2, 0), layout)
        with pytest.raises(ConfigurationError):
            layout.check_grid(4)

    def test_round_trip_dict(self):
        layout = BandLayout((4, 2), (3, 5))
        assert BandLayout.from_dict(layout.to_dict()) == layout


class TestExtractScatter:
    def test_scatter_extract_into_zeros_touches_only_the_band(self, rng):
        S = 32
        layout = BandLayout((4, 4), (4, 4))
        coeffs = rng.standard_normal((2, S, S // 2 + 1)) + 1j * rng.standard_normal((2, S, S // 2 + 1))
        spec = SpectrumGrid(coeffs, S)
        block = spectral.extract_band(spec, (2, 1), layout)
        assert block.values.shape == (2, 2, 4, 4)
        out = spectral.scatter_band(block, SpectrumGrid(np.zeros_like(coeffs), S), layout).coeffs
        mask = out != 0
        top, bottom = layout.band_rows((2, 1), S)
        cols = layout.band_cols((2, 1))
        expect = np.zeros_like(mask)
        for r in [*top, *bottom]:
            expect[:, r, cols.start:cols.stop] = True
        assert np.array_equal(mask, expect)
        assert np.array_equal(out[mask], coeffs[mask])

    def test_sum_of_bands_equals_truncation(self, rng):
        S = 32
        layout = BandLayout((2, 4), (4, 2))
        coeffs = rng.standard_normal((3, S, S // 2 + 1)) + 1j * rng.standard_normal((3, S, S // 2 + 1))
        spec = SpectrumGrid(coeffs, S)
        acc = np.zeros_like(coeffs)
        for band in layout.band_ids():
            block = spectral.extract_band(spec, band, layout)
            acc += spectral.scatter_band(block, SpectrumGrid(np.zeros_like(coeffs), S), layout).coeffs
        assert np.array_equal(acc, spectral.truncate_modes(spec, layout.retained_modes).coeffs)

    def test_scatter_rejects_wrong_block_shape(self):
        layout = BandLayout((2, 2), (2, 2))
        spec = SpectrumGrid(np.zeros((1, 8, 5), complex), 8)
        with pytest.raises(ShapeError):
            spectral.scatter_band(BandBlock((0, 1), np.zeros((1, 2, 3, 2), complex)), spec, layout)

    def test_gather_matches_extract_and_scatter_inverts(self, rng):
        S = 32
        layout = BandLayout((4, 2), (3, 4))
        coeffs = rng.standard_normal((2, 3, S, S // 2 + 1)) + 1j * rng.standard_normal((2, 3, S, S // 2 + 1))
        G = spectral.gather_bands(coeffs, layout)
        assert G.shape == (2, 3, 4, 2, 3, 4, 2)
        for b in range(2):
            spec = SpectrumGrid(coeffs[b], S)
            for band in layout.band_ids():
                block = spectral.extract_band(spec, band, layout).values  # (C, 2, P1, P2)
                assert np.array_equal(G[b, band[0], band[1]].swapaxes(0, 1), block)
        back = spectral.scatter_bands(G, layout, S)
        assert np.array_equal(back, spectral.truncate_modes(SpectrumGrid(coeffs, S), layout.retained_modes).coeffs)


class TestRadialSpectrum:
    def test_constant_field_all_in_bin_zero(self):
        _, e = spectral.radial_energy_spectrum(np.full((16, 16), 2.0))
        assert np.isclose(e[0], 4.0 * 256)
        assert np.abs(e[1:]).max() < 1e-9

    def test_sine_at_wavenumber_three(self):
        S = 32
        X, _ = pde.grid(S)
        f = np.sin(3 * X)
        _, e = spectral.radial_energy_spectrum(f)
        assert np.isclose(e[3], np.sum(f * f))
        assert np.abs(np.delete(e, 3)).max() < 1e-9

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_parseval(self, seed):
        f = np.random.default_rng(seed).standard_normal((2, 32, 32))
        _, e = spectral.radial_energy_spectrum(f)
        assert abs(e.sum() - np.sum(f * f)) <= 1e-8 * np.sum(f * f)
