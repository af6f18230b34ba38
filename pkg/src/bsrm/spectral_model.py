"""Wavenumber grids, prescribed spectra, exact synthesis targets, and
discrete correlation transforms.

Conventions used throughout the package:

* Index arrays hold per-axis integer wavenumber indices ``n``; the physical
  wavenumber is ``kappa = n * dkappa``.
* General fields store spectra on the signed half-space: axis 1 runs
  ``0..N_1``, every further axis runs ``-N_k..N_k``.  Quadrant fields store
  the positive orthant only and fold signs on access.
* Axis-plane power (any ``n_k = 0``) is sampled like interior power.  The
  synthesis keeps those modes, and the shipped target variances are only
  reproduced with them included, so the grid retains them.  Bispectrum
  values are zero whenever any index component is zero.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = [
    "GridSpec",
    "PowerSpectrumGrid",
    "BispectrumGrid",
    "CorrelationGrid",
    "TargetMoments",
    "SymmetryReport",
    "CutoffReport",
    "SpectrumError",
    "NegativeSpectrumError",
    "PRESET_IDS",
    "preset_spectrum",
    "build_power_grid",
    "build_bispectrum_grid",
    "validate_symmetries",
    "check_cutoff",
    "target_moments",
    "correlation_from_spectrum",
    "spectrum_from_correlation",
    "write_spectrum_file",
    "read_spectrum_file",
]

DENSE_CACHE_LIMIT = 2 ** 24
SPECTRUM_MAGIC = b"BSRMSPEC"
SPECTRUM_VERSION = 1


class SpectrumError(ValueError):
    """Invalid spectrum input or grid mismatch."""


class NegativeSpectrumError(SpectrumError):
    """A power spectrum value is negative."""


def _as_axis_tuple(value, d, cast):
    if np.isscalar(value):
        return tuple(cast(value) for _ in range(d))
    items = tuple(cast(v) for v in value)
    if len(items) != d:
        raise SpectrumError(f"expected {d} per-axis values, got {len(items)}")
    return items


@dataclass(frozen=True)
class GridSpec:
    """Discretization of wavenumber and physical space.

    Parameters
    ----------
    d : int
        Dimension count, 1 through 4.
    N : int or sequence of int
        Per-axis wavenumber point count; the cutoff is ``kappa_u = N * dkappa``.
    dkappa : float or sequence of float
        Per-axis wavenumber increment (rad/length).
    M : int or sequence of int, optional
        Per-axis spatial point count, default ``2 * N`` (minimal anti-aliasing).
    quadrant : bool
        Select quadrant-field symmetry (spectra invariant under per-axis
        sign flips).
    epsilon : float
        Cutoff energy tolerance used by cutoff adequacy checks.
    """

    d: int
    N: tuple[int, ...]
    dkappa: tuple[float, ...]
    M: tuple[int, ...] | None = None
    quadrant: bool = False
    epsilon: float = 0.01

    def __post_init__(self):
        if not 1 <= self.d <= 4:
            raise SpectrumError(f"d must be in 1..4, got {self.d}")
        object.__setattr__(self, "N", _as_axis_tuple(self.N, self.d, int))
        object.__setattr__(self, "dkappa", _as_axis_tuple(self.dkappa, self.d, float))
        if self.M is None:
            object.__setattr__(self, "M", tuple(2 * n for n in self.N))
        else:
            object.__setattr__(self, "M", _as_axis_tuple(self.M, self.d, int))
        if any(n < 1 for n in self.N):
            raise SpectrumError("every N_k must be >= 1")
        if any(dk <= 0 for dk in self.dkappa):
            raise SpectrumError("every dkappa_k must be > 0")
        if any(m < 2 * n for m, n in zip(self.M, self.N)):
            raise SpectrumError(
                "every M_k must satisfy M_k >= 2*N_k (anti-aliasing requirement)"
            )
        if not 0 < self.epsilon < 1:
            raise SpectrumError("epsilon must be in (0, 1)")

    @property
    def dx(self) -> tuple[float, ...]:
        return tuple(2.0 * math.pi / (m * dk) for m, dk in zip(self.M, self.dkappa))

    @property
    def kappa_u(self) -> tuple[float, ...]:
        return tuple(n * dk for n, dk in zip(self.N, self.dkappa))

    @property
    def period(self) -> tuple[float, ...]:
        return tuple(2.0 * math.pi / dk for dk in self.dkappa)

    @property
    def cell(self) -> float:
        """Wavenumber cell volume, the product of all dkappa_k."""
        return float(np.prod(self.dkappa))

    @property
    def signed_axes(self) -> tuple[bool, ...]:
        if self.quadrant:
            return (False,) * self.d
        return (False,) + (True,) * (self.d - 1)

    @property
    def orthant_shape(self) -> tuple[int, ...]:
        return tuple(n + 1 for n in self.N)

    @property
    def storage_shape(self) -> tuple[int, ...]:
        return tuple(
            2 * n + 1 if signed else n + 1
            for n, signed in zip(self.N, self.signed_axes)
        )

    @property
    def storage_offset(self) -> tuple[int, ...]:
        return tuple(
            n if signed else 0 for n, signed in zip(self.N, self.signed_axes)
        )

    @cached_property
    def sign_patterns(self) -> np.ndarray:
        """All sign patterns (T, d) with I_1 = +1, T = 2^(d-1)."""
        t = 2 ** (self.d - 1)
        patterns = np.ones((t, self.d), dtype=np.int64)
        for k in range(1, self.d):
            bit = (np.arange(t) >> (k - 1)) & 1
            patterns[:, k] = np.where(bit == 0, 1, -1)
        return patterns

    @property
    def n_phase_tensors(self) -> int:
        return 1 if self.quadrant else 2 ** (self.d - 1)

    @cached_property
    def storage_indices(self) -> np.ndarray:
        """Signed index vectors (P, d) in C storage order."""
        axes = [
            np.arange(-n, n + 1) if signed else np.arange(n + 1)
            for n, signed in zip(self.N, self.signed_axes)
        ]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def storage_pos(self, n: np.ndarray):
        """Convert signed index vectors (..., d) into a storage indexing tuple."""
        n = np.asarray(n, dtype=np.int64)
        if self.quadrant:
            n = np.abs(n)
        pos = n + np.asarray(self.storage_offset, dtype=np.int64)
        return tuple(np.moveaxis(pos, -1, 0))

    def contains(self, n: np.ndarray) -> np.ndarray:
        """Boundedness mask for signed index vectors (..., d)."""
        n = np.asarray(n, dtype=np.int64)
        bounds = np.asarray(self.N, dtype=np.int64)
        ok = np.all(np.abs(n) <= bounds, axis=-1)
        if not self.quadrant:
            ok &= n[..., 0] >= 0
        return ok

    def compatible(self, other: "GridSpec") -> bool:
        return other is self or (
            self.d == other.d
            and self.N == other.N
            and self.M == other.M
            and self.quadrant == other.quadrant
            and self.dkappa == other.dkappa
        )


# ---------------------------------------------------------------------------
# Analytic presets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _PowerPreset:
    d: int
    coef: float

    kind = "power"

    def __call__(self, kappa: np.ndarray) -> np.ndarray:
        kappa = np.asarray(kappa, dtype=np.float64)
        return self.coef * np.exp(-0.5 * np.sum(kappa * kappa, axis=-1))


@dataclass(frozen=True)
class _BispectrumPreset:
    d: int
    coef: float
    ci: tuple[float, ...]
    cj: tuple[float, ...]
    symmetrize: bool

    kind = "bispectrum"

    @property
    def separable(self) -> bool:
        return not self.symmetrize

    def _one_sided(self, ki, kj, ci, cj):
        expo = np.sum(ci * ki * ki, axis=-1) + np.sum(cj * kj * kj, axis=-1)
        return self.coef * (1.0 + 1.0j) * np.exp(-expo)

    def __call__(self, kappa_i: np.ndarray, kappa_j: np.ndarray) -> np.ndarray:
        ki = np.asarray(kappa_i, dtype=np.float64)
        kj = np.asarray(kappa_j, dtype=np.float64)
        ci = np.asarray(self.ci)
        cj = np.asarray(self.cj)
        value = self._one_sided(ki, kj, ci, cj)
        if self.symmetrize:
            value = 0.5 * (value + self._one_sided(ki, kj, cj, ci))
        return value


_SQRT_PI = math.sqrt(math.pi)
_SQRT_2PI = math.sqrt(2.0 * math.pi)

_PRESETS = {
    "ex1_power": _PowerPreset(d=2, coef=20.0 / _SQRT_PI),
    "ex1_bispectrum": _BispectrumPreset(
        d=2, coef=58.0 / math.pi, ci=(1.0, 1.0), cj=(1.0, 1.0), symmetrize=False
    ),
    "ex2_B1": _BispectrumPreset(
        d=2, coef=140.0 / math.pi, ci=(1.0, 10.0), cj=(1.0, 10.0), symmetrize=False
    ),
    "ex2_B2": _BispectrumPreset(
        d=2, coef=140.0 / math.pi, ci=(10.0, 1.0), cj=(10.0, 1.0), symmetrize=False
    ),
    "ex3_power": _PowerPreset(d=3, coef=20.0 / _SQRT_2PI),
    "ex3_bispectrum": _BispectrumPreset(
        d=3,
        coef=22.0 / (2.0 * math.pi),
        ci=(1.0, 1.0, 1.0),
        cj=(1.0, 1.0, 1.0),
        symmetrize=False,
    ),
    "ex4_B1": _BispectrumPreset(
        d=3,
        coef=300.0 / (2.0 * math.pi),
        ci=(10.0, 1.0, 1.0),
        cj=(1.0, 10.0, 1.0),
        symmetrize=True,
    ),
    "ex4_B2": _BispectrumPreset(
        d=3,
        coef=300.0 / (2.0 * math.pi),
        ci=(1.0, 1.0, 10.0),
        cj=(10.0, 1.0, 1.0),
        symmetrize=True,
    ),
    "ex4_B3": _BispectrumPreset(
        d=3,
        coef=300.0 / (2.0 * math.pi),
        ci=(1.0, 10.0, 1.0),
        cj=(1.0, 1.0, 10.0),
        symmetrize=True,
    ),
}

PRESET_IDS = tuple(sorted(_PRESETS))


def preset_spectrum(name: str, kappa) -> float | complex | np.ndarray:
    """Evaluate an analytic preset at physical wavenumbers.

    Power presets take a d-vector; bispectrum presets take the concatenated
    2d-vector ``(kappa_i, kappa_j)``.  No boundary zeroing is applied here;
    grid building applies the zero-index bispectrum rule.
    """
    try:
        preset = _PRESETS[name]
    except KeyError:
        raise SpectrumError(f"unknown preset id {name!r}") from None
    kappa = np.asarray(kappa, dtype=np.float64)
    if preset.kind == "power":
        if kappa.shape[-1] != preset.d:
            raise SpectrumError(
                f"preset {name!r} expects {preset.d}-vectors, got shape {kappa.shape}"
            )
        out = preset(kappa)
    else:
        if kappa.shape[-1] != 2 * preset.d:
            raise SpectrumError(
                f"preset {name!r} expects {2 * preset.d}-vectors "
                f"(kappa_i then kappa_j), got shape {kappa.shape}"
            )
        out = preset(kappa[..., : preset.d], kappa[..., preset.d :])
    out = np.asarray(out)
    if out.ndim == 0:
        return out[()]
    return out


# ---------------------------------------------------------------------------
# Power spectrum grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PowerSpectrumGrid:
    """Power spectrum sampled on a GridSpec storage lattice."""

    grid: GridSpec
    values: np.ndarray
    source: str
    analytic: object | None = None

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.shape != self.grid.storage_shape:
            raise SpectrumError(
                f"power values shape {values.shape} does not match "
                f"grid storage shape {self.grid.storage_shape}"
            )
        if not np.all(np.isfinite(values)):
            raise SpectrumError("power spectrum contains non-finite values")
        if np.any(values < 0.0):
            raise NegativeSpectrumError("power spectrum contains negative values")
        object.__setattr__(self, "values", values)
        self.values.flags.writeable = False

    def value_at(self, n: np.ndarray) -> np.ndarray:
        """S at signed index vectors (..., d); quadrant grids fold signs."""
        return self.values[self.grid.storage_pos(n)]

    @property
    def peak(self) -> float:
        return float(self.values.max(initial=0.0))


def _sample_power(fn, grid: GridSpec) -> np.ndarray:
    kappa = grid.storage_indices * np.asarray(grid.dkappa)
    values = np.asarray(fn(kappa), dtype=np.float64)
    if values.shape != kappa.shape[:-1]:
        raise SpectrumError(
            f"power spectrum callable returned shape {values.shape} for a "
            f"wavevector array of shape {kappa.shape}; expected "
            f"{kappa.shape[:-1]} (one value per wavevector)"
        )
    return values.reshape(grid.storage_shape)


def build_power_grid(source, grid: GridSpec) -> PowerSpectrumGrid:
    """Build a PowerSpectrumGrid from a preset id, file path, or callable.

    Values are sampled at ``kappa_n = n * dkappa`` over the full storage
    lattice, axis planes included.
    """
    if callable(source):
        return PowerSpectrumGrid(
            grid=grid,
            values=_sample_power(source, grid),
            source="callable",
            analytic=source,
        )
    name = str(source)
    if name in _PRESETS:
        preset = _PRESETS[name]
        if preset.kind != "power":
            raise SpectrumError(f"preset {name!r} is not a power spectrum")
        if preset.d != grid.d:
            raise SpectrumError(
                f"preset {name!r} is {preset.d}-dimensional, grid has d={grid.d}"
            )
        return PowerSpectrumGrid(
            grid=grid,
            values=_sample_power(preset, grid),
            source=name,
            analytic=preset,
        )
    path = name[5:] if name.startswith("file:") else name
    kind, file_grid, values = read_spectrum_file(path)
    if kind != "power":
        raise SpectrumError(f"{path}: expected a power spectrum file, got {kind}")
    if not file_grid.compatible(grid):
        raise SpectrumError(f"{path}: file grid does not match the requested grid")
    return PowerSpectrumGrid(grid=grid, values=values, source=f"file:{path}")


# ---------------------------------------------------------------------------
# Bispectrum grid
# ---------------------------------------------------------------------------


class BispectrumGrid:
    """Complex bispectrum accessor over index pairs.

    ``eval`` returns the canonical value used by the synthesis: symmetrized
    in (i, j), zero whenever any index component is zero, sign-folded for
    quadrant grids.  ``raw`` returns the source form without symmetrization
    or boundary zeroing (used by symmetry validation).
    """

    def __init__(self, grid: GridSpec, fn=None, dense=None, source="callable",
                 analytic=None):
        self.grid = grid
        self.source = source
        self.analytic = analytic
        self._fn = fn
        self._dense = dense
        if fn is None and dense is None:
            raise SpectrumError("bispectrum grid needs an accessor or dense values")
        if (
            self._dense is None
            and int(np.prod(grid.storage_shape)) ** 2 <= DENSE_CACHE_LIMIT
        ):
            self._dense = self._build_dense()
        if self._dense is not None:
            self._dense = np.ascontiguousarray(self._dense, dtype=np.complex128)
            shape = grid.storage_shape + grid.storage_shape
            if self._dense.shape != shape:
                raise SpectrumError(
                    f"dense bispectrum shape {self._dense.shape} does not match "
                    f"expected {shape}"
                )
            self._dense.flags.writeable = False

    def _canonical(self, i: np.ndarray, j: np.ndarray) -> np.ndarray:
        if self.quadrant_folds:
            i = np.abs(i)
            j = np.abs(j)
        ki = i * np.asarray(self.grid.dkappa)
        kj = j * np.asarray(self.grid.dkappa)
        value = np.asarray(0.5 * (self._fn(ki, kj) + self._fn(kj, ki)),
                           dtype=np.complex128)
        if value.shape != i.shape[:-1]:
            raise SpectrumError(
                f"bispectrum callable returned shape {value.shape} for "
                f"wavevector arrays of shape {ki.shape}; expected "
                f"{i.shape[:-1]} (one value per wavevector pair)"
            )
        zero = np.any(i == 0, axis=-1) | np.any(j == 0, axis=-1)
        return np.where(zero, 0.0 + 0.0j, value)

    def _build_dense(self) -> np.ndarray:
        idx = self.grid.storage_indices
        p = idx.shape[0]
        dense = np.empty((p, p), dtype=np.complex128)
        for row in range(p):
            dense[row] = self._canonical(np.broadcast_to(idx[row], idx.shape), idx)
        return dense.reshape(self.grid.storage_shape + self.grid.storage_shape)

    @property
    def quadrant_folds(self) -> bool:
        return self.grid.quadrant

    def eval(self, i: np.ndarray, j: np.ndarray) -> np.ndarray:
        """Canonical B at signed index pairs (..., d)."""
        i = np.asarray(i, dtype=np.int64)
        j = np.asarray(j, dtype=np.int64)
        if self._dense is not None:
            pos = self.grid.storage_pos(i) + self.grid.storage_pos(j)
            return self._dense[pos]
        return self._canonical(i, j)

    def raw(self, i: np.ndarray, j: np.ndarray) -> np.ndarray:
        """Source-form B at signed index pairs, no symmetrization or zeroing."""
        i = np.asarray(i, dtype=np.int64)
        j = np.asarray(j, dtype=np.int64)
        if self._fn is None:
            pos = self.grid.storage_pos(i) + self.grid.storage_pos(j)
            return self._dense[pos]
        ki = i * np.asarray(self.grid.dkappa)
        kj = j * np.asarray(self.grid.dkappa)
        value = np.asarray(self._fn(ki, kj), dtype=np.complex128)
        if value.shape != i.shape[:-1]:
            raise SpectrumError(
                f"bispectrum callable returned shape {value.shape} for "
                f"wavevector arrays of shape {ki.shape}; expected "
                f"{i.shape[:-1]} (one value per wavevector pair)"
            )
        return value

    @property
    def raw_in_storage_only(self) -> bool:
        """True when raw values exist only on the storage lattice (file source)."""
        return self._fn is None


def build_bispectrum_grid(source, grid: GridSpec) -> BispectrumGrid:
    """Build a BispectrumGrid from a preset id, file path, or callable."""
    if callable(source):
        return BispectrumGrid(grid, fn=source, source="callable", analytic=source)
    name = str(source)
    if name in _PRESETS:
        preset = _PRESETS[name]
        if preset.kind != "bispectrum":
            raise SpectrumError(f"preset {name!r} is not a bispectrum")
        if preset.d != grid.d:
            raise SpectrumError(
                f"preset {name!r} is {preset.d}-dimensional, grid has d={grid.d}"
            )
        return BispectrumGrid(grid, fn=preset, source=name, analytic=preset)
    path = name[5:] if name.startswith("file:") else name
    kind, file_grid, values = read_spectrum_file(path)
    if kind != "bispectrum":
        raise SpectrumError(f"{path}: expected a bispectrum file, got {kind}")
    if not file_grid.compatible(grid):
        raise SpectrumError(f"{path}: file grid does not match the requested grid")
    return BispectrumGrid(grid, dense=values, source=f"file:{path}")


# ---------------------------------------------------------------------------
# Symmetry validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SymmetryReport:
    mode: str
    n_checked: int
    scale: float
    max_permutation: float
    max_signflip_real: float | None
    max_signflip_imag: float | None
    max_quadrant_flip: float | None
    tol: float = 1e-12

    @property
    def passes(self) -> bool:
        checks = [self.max_permutation, self.max_signflip_real,
                  self.max_quadrant_flip]
        scale = self.scale if self.scale > 0.0 else 1.0
        return all(v is None or v <= self.tol * scale for v in checks)


def _symmetry_probe_pairs(grid: GridSpec, exhaustive_limit=8192, n_samples=2048):
    idx = grid.storage_indices
    p = idx.shape[0]
    if p * p <= exhaustive_limit:
        ii, jj = np.divmod(np.arange(p * p), p)
        return idx[ii], idx[jj]
    rng = np.random.default_rng(20240814)
    ii = rng.integers(0, p, size=n_samples)
    jj = rng.integers(0, p, size=n_samples)
    return idx[ii], idx[jj]


def validate_symmetries(B: BispectrumGrid, mode: str = "general") -> SymmetryReport:
    """Check bispectrum symmetry relations on a deterministic index sample.

    Checks, on the raw (source) form: permutation B(i,j) = B(j,i); the
    sign-flip relation B(-i,-j) = B(i,j) exactly as stated, with the
    imaginary-part violation recorded separately; and, in quadrant mode,
    invariance under every single-argument sign flip.
    """
    if mode not in ("general", "quadrant"):
        raise SpectrumError(f"unknown symmetry mode {mode!r}")
    i, j = _symmetry_probe_pairs(B.grid)
    vij = B.raw(i, j)
    vji = B.raw(j, i)
    scale = float(np.max(np.abs(vij), initial=0.0))
    max_perm = float(np.max(np.abs(vij - vji), initial=0.0))

    max_flip_re = max_flip_im = None
    if not B.raw_in_storage_only:
        vneg = B.raw(-i, -j)
        max_flip_re = float(np.max(np.abs(vneg.real - vij.real), initial=0.0))
        max_flip_im = float(np.max(np.abs(vneg.imag - vij.imag), initial=0.0))

    max_quad = None
    if mode == "quadrant":
        if B.raw_in_storage_only:
            max_quad = 0.0
        else:
            worst = 0.0
            both = np.concatenate([i, j], axis=-1)
            for axis in range(2 * B.grid.d):
                flipped = both.copy()
                flipped[:, axis] = -flipped[:, axis]
                v2 = B.raw(flipped[:, : B.grid.d], flipped[:, B.grid.d :])
                worst = max(worst, float(np.max(np.abs(v2 - vij), initial=0.0)))
            max_quad = worst

    return SymmetryReport(
        mode=mode,
        n_checked=int(i.shape[0]),
        scale=scale,
        max_permutation=max_perm,
        max_signflip_real=max_flip_re,
        max_signflip_imag=max_flip_im,
        max_quadrant_flip=max_quad,
    )


# ---------------------------------------------------------------------------
# Cutoff adequacy
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CutoffReport:
    epsilon: float
    power_fraction: float
    bispectrum_fraction: float | None
    method: str

    @property
    def passes(self) -> bool:
        ok = self.power_fraction >= 1.0 - self.epsilon
        if self.bispectrum_fraction is not None:
            ok = ok and self.bispectrum_fraction >= 1.0 - self.epsilon
        return ok


def _extended_grid(grid: GridSpec) -> GridSpec:
    return GridSpec(
        d=grid.d,
        N=tuple(2 * n for n in grid.N),
        dkappa=grid.dkappa,
        M=tuple(4 * n for n in grid.N),
        quadrant=grid.quadrant,
        epsilon=grid.epsilon,
    )


def _power_energy(S: PowerSpectrumGrid) -> float:
    return target_moments(S, None, S.grid).variance


def _separable_pair_mass(preset, grid: GridSpec) -> float:
    # Ordered sign-compatible interior pairs with in-range targets factorize
    # per axis for unsymmetrized Gaussian forms.
    total = 1.0
    for k in range(grid.d):
        n_k = grid.N[k]
        dk = grid.dkappa[k]
        a = np.arange(1, n_k + 1)
        fa = np.exp(-preset.ci[k] * (a * dk) ** 2)
        fb = np.exp(-preset.cj[k] * (a * dk) ** 2)
        axis_sum = 0.0
        for av, fav in zip(a, fa):
            limit = n_k - av
            if limit >= 1:
                axis_sum += fav * fb[:limit].sum()
        if grid.signed_axes[k]:
            axis_sum *= 2.0
        total *= axis_sum
    return total


def _chunked_pair_mass(B: BispectrumGrid, grid: GridSpec, budget=10 ** 8):
    idx = grid.storage_indices
    interior = idx[np.all(idx != 0, axis=-1)]
    p = interior.shape[0]
    if p * p > budget:
        return None
    mass = 0.0
    bounds = np.asarray(grid.N)
    chunk = max(1, 2 * 10 ** 6 // p)
    for start in range(0, p, chunk):
        block = interior[start : start + chunk]
        i = block[:, None, :]
        j = interior[None, :, :]
        target = i + j
        ok = np.all(i * j > 0, axis=-1) & np.all(np.abs(target) <= bounds, axis=-1)
        if grid.d > 1 and not grid.quadrant:
            ok &= target[..., 0] >= 0
        if not ok.any():
            continue
        ii = np.broadcast_to(i, target.shape)[ok]
        jj = np.broadcast_to(j, target.shape)[ok]
        mass += float(np.abs(B.eval(ii, jj)).sum())
    return mass


def check_cutoff(S: PowerSpectrumGrid, B: BispectrumGrid | None,
                 grid: GridSpec) -> CutoffReport:
    """Report the spectral mass captured inside kappa_u.

    For analytic sources the captured power is compared against a reference
    grid with doubled per-axis cutoff; bispectrum mass is measured over the
    synthesis pair set (ordered sign-compatible interior pairs with in-range
    targets).  File sources degrade to a boundary-decay heuristic.
    """
    extended = _extended_grid(grid)
    method = "extended-grid"

    if S.analytic is not None:
        s_big = build_power_grid(S.analytic, extended)
        denom = _power_energy(s_big)
        power_fraction = _power_energy(S) / denom if denom > 0.0 else 1.0
    else:
        method = "boundary-decay"
        peak = S.peak
        if peak == 0.0:
            power_fraction = 1.0
        else:
            edge = 0.0
            for axis in range(grid.d):
                edge = max(edge, float(np.abs(np.take(S.values, -1, axis=axis)).max()))
                if grid.signed_axes[axis]:
                    edge = max(
                        edge, float(np.abs(np.take(S.values, 0, axis=axis)).max())
                    )
            power_fraction = 1.0 - edge / peak

    bisp_fraction = None
    if B is not None:
        preset = B.analytic
        if isinstance(preset, _BispectrumPreset) and preset.separable:
            inner = _separable_pair_mass(preset, grid)
            outer = _separable_pair_mass(preset, extended)
            bisp_fraction = inner / outer if outer > 0.0 else 1.0
        elif B.analytic is not None:
            inner = _chunked_pair_mass(B, grid)
            b_big = build_bispectrum_grid(B.analytic, extended)
            outer = _chunked_pair_mass(b_big, extended)
            if inner is None or outer is None:
                method = "boundary-decay"
                bisp_fraction = _bispectrum_decay_fraction(B, grid)
            else:
                bisp_fraction = inner / outer if outer > 0.0 else 1.0
        else:
            method = "boundary-decay"
            bisp_fraction = _bispectrum_decay_fraction(B, grid)

    return CutoffReport(
        epsilon=grid.epsilon,
        power_fraction=float(power_fraction),
        bispectrum_fraction=(
            None if bisp_fraction is None else float(bisp_fraction)
        ),
        method=method,
    )


def _bispectrum_decay_fraction(B: BispectrumGrid, grid: GridSpec) -> float:
    idx = grid.storage_indices
    on_edge = np.any(np.abs(idx) == np.asarray(grid.N), axis=-1)
    edge_idx = idx[on_edge]
    probe = min(edge_idx.shape[0], 512)
    rng = np.random.default_rng(20240814)
    rows = rng.integers(0, edge_idx.shape[0], size=probe)
    edge_vals = np.abs(B.eval(edge_idx[rows], edge_idx[rows]))
    center = np.abs(B.eval(np.ones((1, grid.d), dtype=np.int64),
                           np.ones((1, grid.d), dtype=np.int64)))
    peak = float(center.max(initial=0.0))
    if peak == 0.0:
        return 1.0
    return 1.0 - float(edge_vals.max(initial=0.0)) / peak


# ---------------------------------------------------------------------------
# Target moments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TargetMoments:
    mean: float
    variance: float
    third_moment: float
    skewness: float


def _pattern_multiplicity(grid: GridSpec) -> np.ndarray:
    """Per storage index: how many sign patterns place a mode there."""
    idx = grid.storage_indices
    if grid.quadrant or grid.d == 1:
        return np.ones(idx.shape[0], dtype=np.float64)
    zeros = np.sum(idx[:, 1:] == 0, axis=-1)
    return np.power(2.0, zeros)


def _quadrant_variance_weights(grid: GridSpec) -> np.ndarray:
    """Shared-phase coherence weights D(n) for quadrant variance."""
    idx = grid.storage_indices
    weight = np.ones(idx.shape[0], dtype=np.float64)
    for k in range(1, grid.d):
        degenerate = (idx[:, k] == 0) | (2 * idx[:, k] == grid.M[k])
        weight *= np.where(degenerate, 4.0, 2.0)
    return weight


def target_moments(S: PowerSpectrumGrid, B, grid: GridSpec | None = None, *,
                   mode: str = "lexicographic",
                   decomposition=None) -> TargetMoments:
    """Exact ensemble moments of the discrete synthesis.

    The variance and third moment are the zero-lag values of the discrete
    correlation transforms evaluated with the same summation ranges and
    symmetry folding the simulator uses, so they equal the exact ensemble
    moments of the synthesized field.
    """
    grid = grid or S.grid
    if not grid.compatible(S.grid):
        raise SpectrumError("target_moments: grid does not match the power grid")
    flat_s = S.values.ravel()
    cell = grid.cell
    if grid.quadrant:
        weights = _quadrant_variance_weights(grid)
    else:
        weights = _pattern_multiplicity(grid)
    variance = 2.0 * cell * float(np.sum(flat_s * weights))

    if B is None:
        return TargetMoments(mean=0.0, variance=variance, third_moment=0.0,
                             skewness=0.0)

    if decomposition is None:
        from .decomposition import decompose

        decomposition = decompose(S, B, grid, mode=mode)
    third = decomposition.exact_third_moment()
    skew = third / variance ** 1.5 if variance > 0.0 else 0.0
    return TargetMoments(mean=0.0, variance=variance, third_moment=third,
                         skewness=skew)


# ---------------------------------------------------------------------------
# Discrete correlation transforms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorrelationGrid:
    """Correlation functions on the spatial lattice."""

    grid: GridSpec
    r2: np.ndarray
    r3: np.ndarray | None = None


def _mode_bins(grid: GridSpec, signed_idx: np.ndarray) -> np.ndarray:
    mods = np.asarray(grid.M, dtype=np.int64)
    return np.mod(signed_idx, mods)


def _bin_flat(grid: GridSpec, bins: np.ndarray) -> np.ndarray:
    return np.ravel_multi_index(tuple(bins.T), grid.M)


def _embedding_and_weights(grid: GridSpec, flat_s: np.ndarray):
    """Spread per-mode power onto the spatial DFT lattice.

    Returns the complex embedding array (for r2 via inverse FFT) and the
    per-storage-index fold weight needed to invert it.
    """
    idx = grid.storage_indices
    emb = np.zeros(int(np.prod(grid.M)), dtype=np.float64)
    fold_total = np.zeros(emb.shape[0], dtype=np.float64)
    if grid.quadrant:
        patterns = grid.sign_patterns
        signed = idx[None, :, :] * patterns[:, None, :]
        bins = _bin_flat(grid, _mode_bins(grid, signed.reshape(-1, grid.d)))
        bins = bins.reshape(len(patterns), -1)
        neg_bins = _bin_flat(
            grid, _mode_bins(grid, (-signed).reshape(-1, grid.d))
        ).reshape(len(patterns), -1)
        # Shared phases make lattice-congruent patterns coherent: each
        # pattern carries a weight equal to the size of its congruence class.
        counts = np.zeros(bins.shape, dtype=np.float64)
        for t in range(len(patterns)):
            counts += (bins == bins[t][None, :]).astype(np.float64)
        for t in range(len(patterns)):
            np.add.at(emb, bins[t], counts[t] * flat_s)
            np.add.at(emb, neg_bins[t], counts[t] * flat_s)
            np.add.at(fold_total, bins[t], counts[t])
            np.add.at(fold_total, neg_bins[t], counts[t])
        direct = bins[0]
        return emb.reshape(grid.M), fold_total[direct]
    mult = _pattern_multiplicity(grid)
    direct = _bin_flat(grid, _mode_bins(grid, idx))
    conj = _bin_flat(grid, _mode_bins(grid, -idx))
    np.add.at(emb, direct, mult * flat_s)
    np.add.at(emb, conj, mult * flat_s)
    np.add.at(fold_total, direct, mult)
    np.add.at(fold_total, conj, mult)
    return emb.reshape(grid.M), fold_total[direct]


def correlation_from_spectrum(S: PowerSpectrumGrid, B=None, *,
                              decomposition=None) -> CorrelationGrid:
    """Discrete Wiener-Khinchin transform of S (and optionally B) to lags.

    ``r2`` is the exact autocovariance of the synthesized ensemble on the
    spatial lattice.  ``r3`` (dense lag-pair array) is filled for general
    grids when a bispectrum is given and the output fits the memory guard.
    """
    if B is not None and not isinstance(B, BispectrumGrid):
        raise SpectrumError(
            "correlation_from_spectrum expects a BispectrumGrid (or None) "
            f"as B, got {type(B).__name__}")
    grid = S.grid
    emb, _ = _embedding_and_weights(grid, S.values.ravel())
    r2 = np.real(np.fft.ifftn(emb)) * float(np.prod(grid.M)) * grid.cell

    r3 = None
    if B is not None and not grid.quadrant:
        size = int(np.prod(grid.M)) ** 2
        if size <= DENSE_CACHE_LIMIT:
            if decomposition is None:
                from .decomposition import decompose

                decomposition = decompose(S, B, grid)
            r3 = _dense_r3(decomposition)
    return CorrelationGrid(grid=grid, r2=r2, r3=r3)


def _dense_r3(decomp) -> np.ndarray:
    grid = decomp.grid
    lag_shape = grid.M + grid.M
    r3 = np.zeros(int(np.prod(lag_shape)), dtype=np.float64)
    i_idx, j_idx, tgt_idx, b, beta = decomp.flat_coefficients()
    if b.size == 0:
        return r3.reshape(lag_shape)
    sp = decomp.s_p.ravel()
    s = decomp.power.values.ravel()
    amp = 2.0 * grid.cell ** 1.5 * b * np.sqrt(
        sp[decomp._flat_storage(i_idx)]
        * sp[decomp._flat_storage(j_idx)]
        * s[decomp._flat_storage(tgt_idx)]
    )
    diag = np.all(i_idx == j_idx, axis=-1)
    amp = np.where(diag, 0.5 * amp, amp)

    m_total = int(np.prod(grid.M))
    lag_axes = [2.0 * np.pi * np.arange(m) / m for m in grid.M]

    def phase_grid(idx_vec):
        acc = np.zeros(grid.M, dtype=np.float64)
        for k in range(grid.d):
            shape = [1] * grid.d
            shape[k] = grid.M[k]
            acc = acc + idx_vec[k] * lag_axes[k].reshape(shape)
        return acc.ravel()

    for row in range(b.size):
        ki = phase_grid(i_idx[row])
        kj = phase_grid(j_idx[row])
        kn = phase_grid(tgt_idx[row])
        bb = beta[row]
        a = amp[row]
        acc = np.zeros((m_total, m_total), dtype=np.float64)
        acc += np.cos(kj[:, None] - kn[None, :] - bb)
        acc += np.cos(kj[None, :] - kn[:, None] - bb)
        acc += np.cos(ki[:, None] - kn[None, :] - bb)
        acc += np.cos(ki[None, :] - kn[:, None] - bb)
        acc += np.cos(ki[:, None] + kj[None, :] - bb)
        acc += np.cos(kj[:, None] + ki[None, :] - bb)
        r3 += a * acc.ravel()
    return r3.reshape(lag_shape)


def spectrum_from_correlation(R: CorrelationGrid) -> PowerSpectrumGrid:
    """Inverse discrete Wiener-Khinchin transform of r2 back to S."""
    grid = R.grid
    if R.r2.shape != grid.M:
        raise SpectrumError("correlation array shape does not match grid.M")
    coeffs = np.fft.fftn(R.r2) / float(np.prod(grid.M))
    _, fold = _embedding_and_weights(grid, np.ones(grid.storage_indices.shape[0]))
    direct = _bin_flat(grid, _mode_bins(grid, grid.storage_indices))
    values = np.real(coeffs.ravel()[direct]) / (grid.cell * fold)
    # Round-off from the FFT pair may leave tiny negative values; material
    # negatives indicate a non-admissible correlation and are left to raise.
    scale = float(np.max(np.abs(values), initial=0.0))
    tiny = values < 0.0
    values[tiny & (values > -1e-12 * scale)] = 0.0
    return PowerSpectrumGrid(
        grid=grid, values=values.reshape(grid.storage_shape), source="wk-inverse"
    )


# ---------------------------------------------------------------------------
# Spectrum file format
# ---------------------------------------------------------------------------


def write_spectrum_file(path, obj) -> None:
    """Write a power or bispectrum grid in the BSRMSPEC binary format.

    Layout (little-endian): magic "BSRMSPEC", version u32, kind u32
    (0 power, 1 bispectrum), d u32, quadrant u32, N u32[d], signed u8[d],
    dkappa f64[d], M u32[d], epsilon f64, then the f64 payload (complex
    interleaved for bispectra).
    """
    if isinstance(obj, PowerSpectrumGrid):
        kind = 0
        payload = obj.values.astype("<f8").tobytes()
    elif isinstance(obj, BispectrumGrid):
        if obj._dense is None:
            raise SpectrumError(
                "bispectrum file output requires dense values "
                "(d=1 or small d=2 grids only)"
            )
        kind = 1
        payload = obj._dense.astype("<c16").tobytes()
    else:
        raise SpectrumError(f"cannot serialize {type(obj).__name__}")
    grid = obj.grid
    header = struct.pack("<8sIIII", SPECTRUM_MAGIC, SPECTRUM_VERSION, kind,
                         grid.d, int(grid.quadrant))
    header += np.asarray(grid.N, dtype="<u4").tobytes()
    header += np.asarray(grid.signed_axes, dtype="<u1").tobytes()
    header += np.asarray(grid.dkappa, dtype="<f8").tobytes()
    header += np.asarray(grid.M, dtype="<u4").tobytes()
    header += struct.pack("<d", grid.epsilon)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_spectrum_file(path):
    """Read a BSRMSPEC file; returns (kind, GridSpec, values)."""
    with open(path, "rb") as fh:
        data = fh.read()
    head = struct.calcsize("<8sIIII")
    if len(data) < head:
        raise SpectrumError(f"{path}: truncated spectrum file")
    magic, version, kind, d, quadrant = struct.unpack_from("<8sIIII", data, 0)
    if magic != SPECTRUM_MAGIC:
        raise SpectrumError(f"{path}: not a BSRMSPEC file")
    if version != SPECTRUM_VERSION:
        raise SpectrumError(f"{path}: unsupported version {version}")
    if kind not in (0, 1):
        raise SpectrumError(f"{path}: unknown payload kind {kind}")
    offset = head
    n = np.frombuffer(data, dtype="<u4", count=d, offset=offset)
    offset += 4 * d
    offset += d  # signed flags, derivable from quadrant
    dkappa = np.frombuffer(data, dtype="<f8", count=d, offset=offset)
    offset += 8 * d
    m = np.frombuffer(data, dtype="<u4", count=d, offset=offset)
    offset += 4 * d
    (epsilon,) = struct.unpack_from("<d", data, offset)
    offset += 8
    grid = GridSpec(d=int(d), N=tuple(int(v) for v in n),
                    dkappa=tuple(float(v) for v in dkappa),
                    M=tuple(int(v) for v in m), quadrant=bool(quadrant),
                    epsilon=float(epsilon))
    if kind == 0:
        count = int(np.prod(grid.storage_shape))
        values = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
        if values.size != count:
            raise SpectrumError(f"{path}: payload shape mismatch with header")
        return "power", grid, values.reshape(grid.storage_shape).copy()
    shape = grid.storage_shape + grid.storage_shape
    count = int(np.prod(shape))
    values = np.frombuffer(data, dtype="<c16", count=count, offset=offset)
    if values.size != count:
        raise SpectrumError(f"{path}: payload shape mismatch with header")
    return "bispectrum", grid, values.reshape(shape).copy()
