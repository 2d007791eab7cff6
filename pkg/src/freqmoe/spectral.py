"""Real 2D Fourier transforms, mode truncation and frequency-band partitioning.

Conventions used throughout the package:

* forward transform is unnormalized, the inverse carries the ``1/S**2`` factor
  (numpy's ``norm="backward"``);
* spectra use the half-spectrum layout ``(..., S, S//2 + 1)``: axis 0 holds all
  frequencies in FFT order, axis 1 only the non-negative ones;
* retained modes live in two corner blocks: rows ``[0, M1)`` and the mirrored
  rows ``[S - M1, S)``, columns ``[0, M2)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ConfigurationError, DataError, ShapeError

Band = tuple[int, int]


def is_power_of_two(n: int) -> bool:
    return n >= 2 and (n & (n - 1)) == 0


def check_grid_size(S: int) -> int:
    if not is_power_of_two(int(S)):
        raise ConfigurationError(f"grid size must be a power of two >= 2, got {S}")
    return int(S)


@dataclass(frozen=True)
class SpectrumGrid:
    """Half-spectrum Fourier coefficients of a real field of size ``S x S``."""

    coeffs: np.ndarray
    grid_size: int

    def __post_init__(self):
        S = self.grid_size
        if self.coeffs.shape[-2:] != (S, S // 2 + 1):
            raise ShapeError(
                f"spectrum shape {self.coeffs.shape} inconsistent with grid size {S}"
            )


def rfft2(x: np.ndarray) -> np.ndarray:
    """Unnormalized real FFT over the last two axes."""
    return np.fft.rfft2(x, axes=(-2, -1))


def irfft2(X: np.ndarray, S: int) -> np.ndarray:
    """Inverse of :func:`rfft2` for an ``S x S`` grid."""
    return np.fft.irfft2(X, s=(S, S), axes=(-2, -1))


def _half_spectrum_weights(S: int) -> np.ndarray:
    # multiplicity of each stored column in the full Hermitian spectrum
    c = np.full(S // 2 + 1, 2.0)
    c[0] = 1.0
    c[-1] = 1.0
    return c


def rfft2_backward(grad_X: np.ndarray, S: int) -> np.ndarray:
    """Pull a gradient on ``rfft2(x)`` back to ``x``.

    Complex gradients follow the ``dL/dRe + i dL/dIm`` convention.
    """
    weights = 1.0 / _half_spectrum_weights(S)
    return (S * S) * irfft2(grad_X * weights, S)


def irfft2_backward(grad_x: np.ndarray) -> np.ndarray:
    """Pull a gradient on ``irfft2(X)`` back to the half spectrum ``X``."""
    S = grad_x.shape[-1]
    return rfft2(grad_x) * (_half_spectrum_weights(S) / (S * S))


def forward_rfft2(field: np.ndarray) -> SpectrumGrid:
    field = np.asarray(field, dtype=np.float64)
    if field.ndim < 2 or field.shape[-1] != field.shape[-2]:
        raise ShapeError(f"expected square field (..., S, S), got {field.shape}")
    S = check_grid_size(field.shape[-1])
    if not np.all(np.isfinite(field)):
        raise DataError("field contains NaN or infinite values")
    return SpectrumGrid(rfft2(field), S)


def inverse_rfft2(spec: SpectrumGrid) -> np.ndarray:
    S = spec.grid_size
    if spec.coeffs.shape[-2:] != (S, S // 2 + 1):
        raise ShapeError(f"spectrum shape {spec.coeffs.shape} does not match S={S}")
    return irfft2(spec.coeffs, S)


def wavenumbers(S: int) -> tuple[np.ndarray, np.ndarray]:
    """Integer wavenumbers ``(k0, k1)`` broadcastable to the half spectrum."""
    k0 = np.fft.fftfreq(S, d=1.0 / S)[:, None]
    k1 = np.arange(S // 2 + 1, dtype=np.float64)[None, :]
    return k0, k1


def truncate_modes(spec: SpectrumGrid, modes: tuple[int, int]) -> SpectrumGrid:
    """Zero every coefficient outside the two retained corner blocks."""
    m1, m2 = modes
    S = spec.grid_size
    if m1 > S // 2 or m2 > S // 2 + 1:
        raise ConfigurationError(f"modes {modes} exceed grid size {S}")
    out = np.zeros_like(spec.coeffs)
    out[..., :m1, :m2] = spec.coeffs[..., :m1, :m2]
    out[..., S - m1:, :m2] = spec.coeffs[..., S - m1:, :m2]
    return SpectrumGrid(out, S)


@dataclass(frozen=True)
class BandLayout:
    """A ``J1 x J2`` grid of ``P1 x P2`` mode chunks in each corner block.

    Band ``(i1, i2)`` covers columns ``[i2*P2, (i2+1)*P2)`` and rows
    ``[i1*P1, (i1+1)*P1)`` of the non-negative block plus rows
    ``[S-(i1+1)*P1, S-i1*P1)`` of the mirrored block. Band ``(0, 0)`` is the
    base band; all others are expert bands.
    """

    chunk_modes: tuple[int, int]
    grid_chunks: tuple[int, int]

    def __post_init__(self):
        object.__setattr__(self, "chunk_modes", tuple(int(v) for v in self.chunk_modes))
        object.__setattr__(self, "grid_chunks", tuple(int(v) for v in self.grid_chunks))
        if min(self.chunk_modes) < 1 or min(self.grid_chunks) < 1:
            raise ConfigurationError(f"invalid band layout {self}")

    @property
    def retained_modes(self) -> tuple[int, int]:
        (p1, p2), (j1, j2) = self.chunk_modes, self.grid_chunks
        return j1 * p1, j2 * p2

    @property
    def n_bands(self) -> int:
        return self.grid_chunks[0] * self.grid_chunks[1]

    @property
    def n_expert_bands(self) -> int:
        return self.n_bands - 1

    def band_ids(self) -> Iterator[Band]:
        """All bands in row-major order, base band first."""
        j1, j2 = self.grid_chunks
        for i1 in range(j1):
            for i2 in range(j2):
                yield (i1, i2)

    def expert_band_ids(self) -> list[Band]:
        return [b for b in self.band_ids() if b != (0, 0)]

    def flat_index(self, band: Band) -> int:
        self.check_band(band)
        return band[0] * self.grid_chunks[1] + band[1]

    def check_band(self, band: Band) -> None:
        i1, i2 = band
        j1, j2 = self.grid_chunks
        if not (0 <= i1 < j1 and 0 <= i2 < j2):
            raise ConfigurationError(f"band {band} outside layout {self.grid_chunks}")

    def check_grid(self, S: int) -> None:
        check_grid_size(S)
        r1, r2 = self.retained_modes
        if r1 > S // 2 or r2 > S // 2 + 1:
            raise ConfigurationError(
                f"layout retains {self.retained_modes} modes, too many for grid size {S}"
            )

    def band_rows(self, band: Band, S: int) -> tuple[range, range]:
        """Row index ranges of the non-negative and mirrored blocks."""
        self.check_band(band)
        i1 = band[0]
        p1 = self.chunk_modes[0]
        return range(i1 * p1, (i1 + 1) * p1), range(S - (i1 + 1) * p1, S - i1 * p1)

    def band_cols(self, band: Band) -> range:
        self.check_band(band)
        p2 = self.chunk_modes[1]
        return range(band[1] * p2, (band[1] + 1) * p2)

    def to_dict(self) -> dict:
        return {"chunk_modes": list(self.chunk_modes), "grid_chunks": list(self.grid_chunks)}

    @classmethod
    def from_dict(cls, d: dict) -> "BandLayout":
        return cls(tuple(d["chunk_modes"]), tuple(d["grid_chunks"]))


@dataclass(frozen=True)
class BandBlock:
    band_id: Band
    values: np.ndarray  # (C, 2, P1, P2)


def _block_slices(layout: BandLayout, band: Band, S: int):
    top, bottom = layout.band_rows(band, S)
    cols = layout.band_cols(band)
    cs = slice(cols.start, cols.stop)
    return slice(top.start, top.stop), slice(bottom.start, bottom.stop), cs


def extract_band(spec: SpectrumGrid, band: Band, layout: BandLayout) -> BandBlock:
    layout.check_grid(spec.grid_size)
    rt, rb, cs = _block_slices(layout, band, spec.grid_size)
    values = np.stack([spec.coeffs[..., rt, cs], spec.coeffs[..., rb, cs]], axis=-3)
    return BandBlock(tuple(band), values.copy())


def scatter_band(block: BandBlock, spec: SpectrumGrid, layout: BandLayout) -> SpectrumGrid:
    """Write a band block into a copy of ``spec`` (all other values untouched)."""
    layout.check_grid(spec.grid_size)
    p1, p2 = layout.chunk_modes
    if block.values.shape[-3:] != (2, p1, p2):
        raise ShapeError(f"block shape {block.values.shape} does not match layout {layout}")
    rt, rb, cs = _block_slices(layout, block.band_id, spec.grid_size)
    out = spec.coeffs.copy()
    out[..., rt, cs] = block.values[..., 0, :, :]
    out[..., rb, cs] = block.values[..., 1, :, :]
    return SpectrumGrid(out, spec.grid_size)


def gather_bands(coeffs: np.ndarray, layout: BandLayout) -> np.ndarray:
    """Vectorized extraction of every band.

    ``coeffs`` has shape ``(*lead, C, S, S//2+1)``; the result has shape
    ``(*lead, J1, J2, 2, C, P1, P2)``.
    """
    S = coeffs.shape[-2]
    (p1, p2), (j1, j2) = layout.chunk_modes, layout.grid_chunks
    r1, r2 = layout.retained_modes
    lead = coeffs.shape[:-3]
    n = len(lead)
    order = [*range(n), n + 1, n + 3, n, n + 2, n + 4]

    def split(region):
        a = region.reshape(*lead, coeffs.shape[-3], j1, p1, j2, p2)
        return a.transpose(order)

    top = split(coeffs[..., :r1, :r2])
    bottom = split(coeffs[..., S - r1:, :r2])[..., ::-1, :, :, :, :]
    return np.stack([top, bottom], axis=-4)


def scatter_bands(values: np.ndarray, layout: BandLayout, S: int) -> np.ndarray:
    """Inverse of :func:`gather_bands` into a zero half spectrum."""
    (p1, p2), (j1, j2) = layout.chunk_modes, layout.grid_chunks
    r1, r2 = layout.retained_modes
    # values: (*rest, J1, J2, 2, C, P1, P2)
    rest = values.shape[:-6]
    C = values.shape[-3]
    out = np.zeros(rest + (C, S, S // 2 + 1), dtype=np.complex128)

    def join(v):
        # (*rest, J1, J2, C, P1, P2) -> (*rest, C, J1*P1, J2*P2)
        n = len(rest)
        v = v.transpose(*range(n), n + 2, n, n + 3, n + 1, n + 4)
        return v.reshape(rest + (C, r1, r2))

    out[..., :r1, :r2] = join(values[..., 0, :, :, :])
    out[..., S - r1:, :r2] = join(values[..., ::-1, :, 1, :, :, :])
    return out


def radial_energy_spectrum(field: np.ndarray, normalize: bool = False):
    """Energy of a real field binned by rounded wavenumber magnitude.

    Returns ``(bins, energy)`` with ``energy.sum() == (field**2).sum()``
    (Parseval). Leading axes are summed. With ``normalize`` the energies are
    divided by ``S**2`` so grids of different size are comparable.
    """
    field = np.asarray(field, dtype=np.float64)
    if field.ndim < 2 or field.shape[-1] != field.shape[-2]:
        raise ShapeError(f"expected square field (..., S, S), got {field.shape}")
    S = check_grid_size(field.shape[-1])
    if not np.all(np.isfinite(field)):
        raise DataError("field contains NaN or infinite values")
    X = rfft2(field)
    power = (np.abs(X) ** 2 * _half_spectrum_weights(S) / (S * S)).reshape(-1, S, S // 2 + 1)
    power = power.sum(axis=0)
    k0, k1 = wavenumbers(S)
    kbin = np.rint(np.sqrt(k0**2 + k1**2)).astype(np.int64)
    energy = np.bincount(kbin.ravel(), weights=power.ravel())
    if normalize:
        energy = energy / (S * S)
    return np.arange(energy.size), energy
