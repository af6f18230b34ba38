"""Ensemble verification: moment and cumulant estimation, calibrated
power-spectrum and bispectrum estimators, and bicoherence.

All estimators are calibrated against the discrete synthesis conventions,
so their expectations equal the prescribed quantities at every lattice bin,
including DC, axis-plane, and Nyquist-fold bins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .decomposition import enumerate_pairs
from .simulator import FieldSample
from .spectral_model import (
    GridSpec,
    SpectrumError,
    TargetMoments,
    _bin_flat,
    _mode_bins,
)

__all__ = [
    "MomentAccumulator",
    "MomentReport",
    "SpectrumEstimate",
    "BispectrumEstimate",
    "ensemble_moments",
    "cumulants_from_moments",
    "estimate_power_spectrum",
    "estimate_bispectrum",
    "bicoherence",
    "bin_weights",
]

BISPECTRUM_SLICE_LIMIT = 10 ** 6


def cumulants_from_moments(m1: float, m2: float, m3: float, m4: float
                           ) -> tuple[float, float, float, float]:
    """First four cumulants from raw moments.

    c1 = m1
    c2 = m2 - m1^2
    c3 = m3 - 3 m1 m2 + 2 m1^3
    c4 = m4 - 4 m1 m3 - 3 m2^2 + 12 m1^2 m2 - 6 m1^4
    """
    c1 = m1
    c2 = m2 - m1 ** 2
    c3 = m3 - 3.0 * m1 * m2 + 2.0 * m1 ** 3
    c4 = (m4 - 4.0 * m1 * m3 - 3.0 * m2 ** 2 + 12.0 * m1 ** 2 * m2
          - 6.0 * m1 ** 4)
    return c1, c2, c3, c4


@dataclass(frozen=True)
class MomentReport:
    """Pooled ensemble moments with per-sample scatter and target deltas."""

    n_samples: int
    n_points: int
    mean: float
    variance: float
    third_central: float
    skewness: float
    cumulants: tuple[float, float, float, float]
    se_mean: float | None
    se_variance: float | None
    se_skewness: float | None
    targets: TargetMoments | None

    @property
    def variance_rel_error(self) -> float | None:
        if self.targets is None or self.targets.variance == 0.0:
            return None
        return abs(self.variance - self.targets.variance) / self.targets.variance

    @property
    def skewness_abs_error(self) -> float | None:
        if self.targets is None:
            return None
        return abs(self.skewness - self.targets.skewness)

    def within(self, variance_rtol: float, skewness_atol: float) -> bool:
        dev_var = self.variance_rel_error
        dev_skew = self.skewness_abs_error
        ok = True
        if dev_var is not None:
            ok = ok and dev_var <= variance_rtol
        if dev_skew is not None:
            ok = ok and dev_skew <= skewness_atol
        return ok


class MomentAccumulator:
    """Streaming raw-moment accumulation over samples; no field storage."""

    def __init__(self):
        self.n_samples = 0
        self.n_points = 0
        self._sums = np.zeros(4, dtype=np.float64)
        self._per_sample_mean: list[float] = []
        self._per_sample_var: list[float] = []
        self._per_sample_skew: list[float] = []

    def add(self, sample) -> None:
        values = sample.values if isinstance(sample, FieldSample) else \
            np.asarray(sample, dtype=np.float64)
        flat = values.ravel()
        if self.n_points == 0:
            self.n_points = flat.size
        elif flat.size != self.n_points:
            raise SpectrumError("samples have inconsistent lattice sizes")
        p1 = float(flat.sum())
        sq = flat * flat
        p2 = float(sq.sum())
        p3 = float((sq * flat).sum())
        p4 = float((sq * sq).sum())
        self._sums += (p1, p2, p3, p4)
        self.n_samples += 1
        n = flat.size
        mean = p1 / n
        var = p2 / n - mean ** 2
        m3c = p3 / n - 3.0 * mean * (p2 / n) + 2.0 * mean ** 3
        self._per_sample_mean.append(mean)
        self._per_sample_var.append(var)
        self._per_sample_skew.append(
            m3c / var ** 1.5 if var > 0.0 else 0.0)

    def finalize(self, targets: TargetMoments | None = None) -> MomentReport:
        if self.n_samples == 0:
            raise SpectrumError("no samples accumulated")
        total = self.n_samples * self.n_points
        m1, m2, m3, m4 = (self._sums / total).tolist()
        c1, c2, c3, c4 = cumulants_from_moments(m1, m2, m3, m4)
        skew = c3 / c2 ** 1.5 if c2 > 0.0 else 0.0

        def scatter(values: list[float]) -> float | None:
            if self.n_samples < 2:
                return None
            arr = np.asarray(values)
            return float(arr.std(ddof=1) / math.sqrt(self.n_samples))

        return MomentReport(
            n_samples=self.n_samples,
            n_points=self.n_points,
            mean=m1,
            variance=c2,
            third_central=c3,
            skewness=skew,
            cumulants=(c1, c2, c3, c4),
            se_mean=scatter(self._per_sample_mean),
            se_variance=scatter(self._per_sample_var),
            se_skewness=scatter(self._per_sample_skew),
            targets=targets,
        )


def ensemble_moments(samples, targets: TargetMoments | None = None
                     ) -> MomentReport:
    """Pooled moments of an ensemble of samples against optional targets."""
    acc = MomentAccumulator()
    for sample in samples:
        acc.add(sample)
    return acc.finalize(targets)


# ---------------------------------------------------------------------------
# Power spectrum estimation
# ---------------------------------------------------------------------------


def bin_weights(grid: GridSpec) -> np.ndarray:
    """Expected periodogram fold weight w(s) per storage index.

    Counts the synthesis modes (direct and conjugate, over all sign
    patterns of |s|) landing in s's DFT bin.  Independent phases add
    incoherently (weight = landing count); shared quadrant phases add
    coherently (weight = direct count squared plus conjugate count
    squared).  With these weights E[S_hat] = S at every bin.
    """
    idx = grid.storage_indices
    own_bin = _bin_flat(grid, _mode_bins(grid, idx))
    patterns = grid.sign_patterns
    base = np.abs(idx)
    direct = np.zeros(idx.shape[0], dtype=np.float64)
    conj = np.zeros(idx.shape[0], dtype=np.float64)
    for pattern in patterns:
        signed = base * pattern[None, :]
        direct += _bin_flat(grid, _mode_bins(grid, signed)) == own_bin
        conj += _bin_flat(grid, _mode_bins(grid, -signed)) == own_bin
    if grid.quadrant:
        return direct ** 2 + conj ** 2
    return direct + conj


@dataclass(frozen=True)
class SpectrumEstimate:
    """Calibrated periodogram average on the storage lattice."""

    grid: GridSpec
    values: np.ndarray
    weights: np.ndarray
    n_samples: int

    def value_at(self, n) -> np.ndarray:
        return self.values[self.grid.storage_pos(np.asarray(n, np.int64))]


def estimate_power_spectrum(samples, grid: GridSpec) -> SpectrumEstimate:
    """Average periodogram mapped back to the storage lattice.

    S_hat(s) = mean_k |A_hat_k[bin(s)]|^2 / (M^{2d} dk w(s)).
    """
    m_total = None
    power = None
    count = 0
    for sample in samples:
        values = sample.values if isinstance(sample, FieldSample) else \
            np.asarray(sample, dtype=np.float64)
        if values.shape != grid.M:
            raise SpectrumError("sample shape does not match grid.M")
        spec = np.fft.fftn(values)
        mag = spec.real ** 2 + spec.imag ** 2
        if power is None:
            m_total = float(np.prod(grid.M))
            power = mag
        else:
            power += mag
        count += 1
    if count == 0:
        raise SpectrumError("no samples given")
    power /= count
    weights = bin_weights(grid)
    bins = _bin_flat(grid, _mode_bins(grid, grid.storage_indices))
    est = power.ravel()[bins] / (m_total ** 2 * grid.cell * weights)
    return SpectrumEstimate(grid=grid,
                            values=est.reshape(grid.storage_shape),
                            weights=weights.reshape(grid.storage_shape),
                            n_samples=count)


# ---------------------------------------------------------------------------
# Bispectrum estimation and bicoherence
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BispectrumEstimate:
    """Triple-product bispectrum estimate over an explicit pair slice."""

    grid: GridSpec
    i: np.ndarray
    j: np.ndarray
    values: np.ndarray
    triple_mean: np.ndarray
    pair_second_moment: np.ndarray
    n_samples: int

    def row_of(self, i, j) -> int:
        match = (np.all(self.i == np.asarray(i), axis=-1)
                 & np.all(self.j == np.asarray(j), axis=-1))
        rows = np.nonzero(match)[0]
        if rows.size == 0:
            raise SpectrumError(f"pair ({tuple(i)}, {tuple(j)}) not in the slice")
        return int(rows[0])


def _default_pair_slice(grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    if grid.d != 1:
        raise SpectrumError(
            "estimate_bispectrum needs an explicit pair slice for d >= 2")
    i_rows = []
    j_rows = []
    for n in range(2, grid.N[0] + 1):
        pairs = enumerate_pairs((n,), grid.N)
        interior = np.all(pairs.i != 0, axis=-1) & np.all(pairs.j != 0, axis=-1)
        i_rows.append(pairs.i[interior])
        j_rows.append(pairs.j[interior])
    i = np.concatenate(i_rows) if i_rows else np.empty((0, 1), np.int64)
    j = np.concatenate(j_rows) if j_rows else np.empty((0, 1), np.int64)
    return i, j


def estimate_bispectrum(samples, grid: GridSpec, pair_slice=None
                        ) -> BispectrumEstimate:
    """Average triple products over a pair slice.

    B_hat(i, j) = conj(mean_k c_i c_j conj(c_{i+j})) / (2^{3/2} dk^2) with
    c_n = sqrt(2) A_hat[bin(n)] / M^d; the conjugation matches the synthesis
    convention so the estimator recovers the prescribed B.  For d = 1 the
    default slice is every interior box pair; higher dimensions need an
    explicit (i, j) slice.
    """
    if pair_slice is None:
        i_idx, j_idx = _default_pair_slice(grid)
    else:
        i_idx, j_idx = pair_slice
        i_idx = np.asarray(i_idx, dtype=np.int64).reshape(-1, grid.d)
        j_idx = np.asarray(j_idx, dtype=np.int64).reshape(-1, grid.d)
    if i_idx.shape[0] > BISPECTRUM_SLICE_LIMIT:
        raise SpectrumError(
            f"pair slice of {i_idx.shape[0]} rows exceeds the memory guard "
            f"({BISPECTRUM_SLICE_LIMIT})")
    tgt_idx = i_idx + j_idx
    for name, arr in (("i", i_idx), ("j", j_idx), ("i+j", tgt_idx)):
        ok = np.all(np.abs(arr) <= np.asarray(grid.N))
        if not ok:
            raise SpectrumError(f"pair slice component {name} exceeds the grid")

    bins_i = _bin_flat(grid, _mode_bins(grid, i_idx))
    bins_j = _bin_flat(grid, _mode_bins(grid, j_idx))
    bins_t = _bin_flat(grid, _mode_bins(grid, tgt_idx))
    m_total = float(np.prod(grid.M))
    scale = math.sqrt(2.0) / m_total

    triple = np.zeros(i_idx.shape[0], dtype=np.complex128)
    second = np.zeros(i_idx.shape[0], dtype=np.float64)
    count = 0
    for sample in samples:
        values = sample.values if isinstance(sample, FieldSample) else \
            np.asarray(sample, dtype=np.float64)
        if values.shape != grid.M:
            raise SpectrumError("sample shape does not match grid.M")
        spec = np.fft.fftn(values).ravel()
        c_i = spec[bins_i] * scale
        c_j = spec[bins_j] * scale
        c_t = spec[bins_t] * scale
        pair = c_i * c_j
        triple += pair * np.conj(c_t)
        second += pair.real ** 2 + pair.imag ** 2
        count += 1
    if count == 0:
        raise SpectrumError("no samples given")
    triple /= count
    second /= count
    values = np.conj(triple) / (2.0 ** 1.5 * grid.cell ** 2)
    return BispectrumEstimate(grid=grid, i=i_idx, j=j_idx, values=values,
                              triple_mean=triple, pair_second_moment=second,
                              n_samples=count)


def bicoherence(B_hat: BispectrumEstimate, S_hat: SpectrumEstimate,
                i, j) -> float:
    """Squared bicoherence of one pair, clipped to [0, 1].

    b_hat^2 = |triple mean|^2 / (mean |c_i c_j|^2 * 2 dk * S_hat(i+j)),
    whose population value is |B|^2 dk / (S_i S_j S_{i+j}).  Out-of-range
    estimates arise only from sampling noise and are clipped.
    """
    row = B_hat.row_of(i, j)
    second = float(B_hat.pair_second_moment[row])
    target = np.asarray(i) + np.asarray(j)
    s_n = float(S_hat.value_at(target))
    denom = second * 2.0 * B_hat.grid.cell * s_n
    if denom <= 0.0:
        raise SpectrumError(
            f"bicoherence undefined for pair ({tuple(np.asarray(i))}, "
            f"{tuple(np.asarray(j))}): zero denominator")
    value = float(np.abs(B_hat.triple_mean[row]) ** 2 / denom)
    return min(max(value, 0.0), 1.0)
