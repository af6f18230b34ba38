"""Recursive frequency-pair decomposition of a (power, bispectrum) pair.

For each target index ``n`` the recursion removes the power committed to
wave interactions from the pure part:

    b_p^2(i, j) = |B(i, j)|^2 dk / (S_p(i) S_p(j) S(n)),    i + j = n
    S_p(n)      = S(n) (1 - sum over pairs of b_p^2)

where ``dk`` is the wavenumber cell volume and the pair sums run over the
unordered box pairs of ``n``.  Pair components already processed have
strictly smaller per-axis magnitudes, so any magnitude-ascending target
order is valid; targets are visited in ascending (n_1, |n_2|, ..., |n_d|)
lexicographic key order.

Pairs with a zero index component carry ``b_p = 0`` (the bispectrum
vanishes there) and are omitted from the stored coefficient table.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .spectral_model import (
    BispectrumGrid,
    GridSpec,
    PowerSpectrumGrid,
    SpectrumError,
)

__all__ = [
    "PairList",
    "Decomposition",
    "NegativePurePower",
    "PAIR_MODES",
    "CLAMP_TOL",
    "enumerate_pairs",
    "biphase",
    "partial_bicoherence_sq",
    "decompose",
]

PAIR_MODES = ("lexicographic", "per-dimension")

# Residual tolerance: a pair sum may exceed 1 by at most this much (relative
# to S(n)) before the input is declared non-realizable.
CLAMP_TOL = 1e-9


class NegativePurePower(ValueError):
    """The (S, B) pair is not realizable under this decomposition."""

    def __init__(self, n, deficit: float):
        self.n = tuple(int(v) for v in np.atleast_1d(n))
        self.deficit = float(deficit)
        super().__init__(
            f"pure power would be negative at n={self.n}: the pair sum "
            f"exceeds 1 by {self.deficit:.6e}"
        )


@dataclass(frozen=True)
class PairList:
    """Unordered box pairs (i, j) with i + j = n, one representative each."""

    n: tuple[int, ...]
    mode: str
    i: np.ndarray
    j: np.ndarray

    def __len__(self) -> int:
        return self.i.shape[0]


def _box_points(n: np.ndarray, interior: bool) -> np.ndarray:
    axes = []
    for nk in n:
        mag = abs(int(nk))
        lo = 1 if interior else 0
        hi = mag - 1 if interior else mag
        vals = np.arange(lo, hi + 1, dtype=np.int64)
        if nk < 0:
            vals = -vals
        axes.append(vals)
    if any(a.size == 0 for a in axes):
        return np.empty((0, len(axes)), dtype=np.int64)
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def _lex_ge(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ge = np.ones(a.shape[0], dtype=bool)
    undecided = np.ones(a.shape[0], dtype=bool)
    for k in range(a.shape[1]):
        ak = a[:, k]
        bk = b[:, k]
        ge[undecided & (ak < bk)] = False
        decided = undecided & (ak != bk)
        ge[decided & (ak > bk)] = True
        undecided &= ~decided
    return ge


def _representative_mask(i: np.ndarray, j: np.ndarray, mode: str) -> np.ndarray:
    if mode == "lexicographic":
        return _lex_ge(i, j)
    if mode == "per-dimension":
        return np.all(np.abs(i) >= np.abs(j), axis=-1)
    raise SpectrumError(f"unknown pair mode {mode!r}; expected one of {PAIR_MODES}")


def enumerate_pairs(n, N, mode: str = "lexicographic") -> PairList:
    """Enumerate the unordered box pairs of target ``n``.

    Box pairs have components between 0 and ``n_k`` sharing the sign of
    ``n_k`` on every axis, with ``i + j = n``.  ``lexicographic`` keeps the
    representative with ``i >= j`` in lexicographic order; ``per-dimension``
    keeps pairs with ``|i_k| >= |j_k|`` on every axis (dropping pairs whose
    magnitudes are incomparable).  ``N`` bounds are validated, not used to
    trim the box.
    """
    n = np.atleast_1d(np.asarray(n, dtype=np.int64))
    bounds = np.atleast_1d(np.asarray(N, dtype=np.int64))
    if n.shape != bounds.shape:
        raise SpectrumError("enumerate_pairs: n and N must have the same length")
    if np.any(np.abs(n) > bounds):
        raise SpectrumError(f"enumerate_pairs: target {tuple(n)} exceeds bounds")
    i = _box_points(n, interior=False)
    j = n[None, :] - i
    keep = _representative_mask(i, j, mode)
    return PairList(n=tuple(int(v) for v in n), mode=mode, i=i[keep], j=j[keep])


def biphase(value) -> float | np.ndarray:
    """Biphase beta = atan2(Im B, Re B) in (-pi, pi]; zero input gives 0."""
    value = np.asarray(value, dtype=np.complex128)
    beta = np.arctan2(value.imag, value.real)
    beta = np.where(beta == -np.pi, np.pi, beta)
    if beta.ndim == 0:
        return float(beta)
    return beta


def _bsq_terms(b_values, sp_i, sp_j, s_n, cell):
    abs_sq = b_values.real ** 2 + b_values.imag ** 2
    denom = sp_i * sp_j * s_n
    zero_denom = denom == 0.0
    bsq = np.zeros_like(abs_sq)
    np.divide(abs_sq * cell, denom, out=bsq, where=~zero_denom)
    warned = int(np.count_nonzero(zero_denom & (abs_sq > 0.0)))
    return bsq, warned


def partial_bicoherence_sq(B: BispectrumGrid, S_p, S: PowerSpectrumGrid,
                           i, j, grid: GridSpec):
    """Partial bicoherence squared of the pair (i, j).

    ``S_p`` holds the current pure powers on the storage lattice.  Pairs
    with a zero denominator return 0 (the conventional assignment recorded
    by decompose as a ZeroDenominator warning).
    """
    i = np.asarray(i, dtype=np.int64)
    j = np.asarray(j, dtype=np.int64)
    if isinstance(S_p, PowerSpectrumGrid):
        S_p = S_p.values
    sp = np.asarray(S_p, dtype=np.float64).reshape(grid.storage_shape)
    sp_i = sp[grid.storage_pos(i)]
    sp_j = sp[grid.storage_pos(j)]
    s_n = S.value_at(i + j)
    bsq, _ = _bsq_terms(B.eval(i, j), sp_i, sp_j, s_n, grid.cell)
    if bsq.ndim == 0:
        return float(bsq)
    return bsq


@dataclass
class Decomposition:
    """Pure power plus interaction coefficients consumed by the simulators.

    Coefficient rows are stored flat, grouped per target in processing
    order; every stored row has ``b > 0`` and ``beta`` in (-pi, pi].  The
    object is immutable after construction and safe to share across
    threads.
    """

    grid: GridSpec
    power: PowerSpectrumGrid
    mode: str
    s_p: np.ndarray
    sum_bsq: np.ndarray
    tgt_idx: np.ndarray
    i_idx: np.ndarray
    j_idx: np.ndarray
    b: np.ndarray
    beta: np.ndarray
    clamped_count: int
    zero_denominator_count: int
    _slices: dict = field(repr=False, default_factory=dict)

    def __post_init__(self):
        for name in ("s_p", "sum_bsq", "tgt_idx", "i_idx", "j_idx", "b", "beta"):
            getattr(self, name).flags.writeable = False

    @property
    def n_coefficients(self) -> int:
        return int(self.b.shape[0])

    def _flat_storage(self, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        if self.grid.quadrant:
            idx = np.abs(idx)
        pos = idx + np.asarray(self.grid.storage_offset, dtype=np.int64)
        strides = np.ones(self.grid.d, dtype=np.int64)
        shape = self.grid.storage_shape
        for k in range(self.grid.d - 2, -1, -1):
            strides[k] = strides[k + 1] * shape[k + 1]
        return pos @ strides

    def coefficients_for(self, n) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(i, j, b, beta) rows for target n; empty arrays when none."""
        key = int(self._flat_storage(np.asarray(n, dtype=np.int64)))
        if key not in self._slices:
            d = self.grid.d
            return (np.empty((0, d), np.int32), np.empty((0, d), np.int32),
                    np.empty(0), np.empty(0))
        start, stop = self._slices[key]
        sl = slice(start, stop)
        return self.i_idx[sl], self.j_idx[sl], self.b[sl], self.beta[sl]

    def flat_coefficients(self):
        return self.i_idx, self.j_idx, self.tgt_idx, self.b, self.beta

    def reconstruction_max_error(self) -> float:
        """Max relative defect of S_p + S * sum_bsq against S."""
        s = self.power.values
        scale = float(np.max(s, initial=0.0))
        if scale == 0.0:
            return float(np.max(np.abs(self.s_p), initial=0.0))
        defect = np.abs(self.s_p + s * self.sum_bsq - s)
        return float(defect.max(initial=0.0)) / scale

    def _coefficient_multiplicity(self) -> np.ndarray:
        """Closure count per stored coefficient in the ensemble third moment."""
        if not self.grid.quadrant:
            return np.ones(self.n_coefficients, dtype=np.float64)
        mult = np.full(self.n_coefficients, float(2 ** (self.grid.d - 1)))
        for k in range(1, self.grid.d):
            nyquist = 2 * np.abs(self.tgt_idx[:, k]) == self.grid.M[k]
            mult *= np.where(nyquist, 2.0, 1.0)
        return mult

    def exact_third_moment(self) -> float:
        """Exact ensemble third moment of the synthesized field."""
        if self.n_coefficients == 0:
            return 0.0
        sp = self.s_p.ravel()
        s = self.power.values.ravel()
        root = np.sqrt(
            sp[self._flat_storage(self.i_idx)]
            * sp[self._flat_storage(self.j_idx)]
            * s[self._flat_storage(self.tgt_idx)]
        )
        count = np.where(np.all(self.i_idx == self.j_idx, axis=-1), 6.0, 12.0)
        count = count * self._coefficient_multiplicity()
        terms = count * root * self.b * np.cos(self.beta)
        return float(self.grid.cell ** 1.5 * terms.sum())

    def checksum(self) -> str:
        """Deterministic content hash of the full coefficient data."""
        h = hashlib.sha256()
        h.update(self.mode.encode())
        h.update(repr((self.grid.d, self.grid.N, self.grid.dkappa, self.grid.M,
                       self.grid.quadrant)).encode())
        for arr in (self.s_p, self.tgt_idx, self.i_idx, self.j_idx, self.b,
                    self.beta):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def _target_order(grid: GridSpec) -> np.ndarray:
    idx = grid.storage_indices
    keys = [np.abs(idx[:, k]) for k in range(grid.d - 1, 0, -1)]
    keys.append(idx[:, 0])
    return np.lexsort(keys)


def decompose(S: PowerSpectrumGrid, B: BispectrumGrid | None,
              grid: GridSpec | None = None,
              mode: str = "lexicographic") -> Decomposition:
    """Run the frequency-pair recursion over the whole storage lattice.

    ``B=None`` yields the second-order decomposition (pure power equal to
    S, no coefficients), bit-identical to decomposing against an
    identically zero bispectrum.

    Raises NegativePurePower when the pair sum at some target exceeds 1 by
    more than CLAMP_TOL; smaller overshoots are clamped to zero pure power
    and counted in ``clamped_count``.
    """
    grid = grid or S.grid
    if not grid.compatible(S.grid):
        raise SpectrumError("decompose: grid does not match the power grid")
    if B is not None and not grid.compatible(B.grid):
        raise SpectrumError("decompose: grid does not match the bispectrum grid")
    if mode not in PAIR_MODES:
        raise SpectrumError(f"unknown pair mode {mode!r}; expected one of {PAIR_MODES}")

    d = grid.d
    cell = grid.cell
    s_flat = S.values.ravel()
    sp_flat = S.values.copy().ravel()
    sum_bsq = np.zeros_like(sp_flat)
    strides = np.ones(d, dtype=np.int64)
    for k in range(d - 2, -1, -1):
        strides[k] = strides[k + 1] * grid.storage_shape[k + 1]
    offset = np.asarray(grid.storage_offset, dtype=np.int64)

    tgt_rows: list[np.ndarray] = []
    i_rows: list[np.ndarray] = []
    j_rows: list[np.ndarray] = []
    b_rows: list[np.ndarray] = []
    beta_rows: list[np.ndarray] = []
    slices: dict[int, tuple[int, int]] = {}
    total = 0
    clamped = 0
    zero_denom = 0

    if B is not None:
        idx = grid.storage_indices
        for row in _target_order(grid):
            n = idx[row]
            if np.any(n == 0):
                continue  # every box pair touches a zero plane: b_p = 0
            i = _box_points(n, interior=True)
            if i.shape[0] == 0:
                continue
            j = n[None, :] - i
            keep = _representative_mask(i, j, mode)
            i = i[keep]
            j = j[keep]
            if i.shape[0] == 0:
                continue
            flat_n = int((n + offset) @ strides)
            sp_i = sp_flat[(i + offset) @ strides]
            sp_j = sp_flat[(j + offset) @ strides]
            s_n = s_flat[flat_n]
            values = B.eval(i, j)
            bsq, warned = _bsq_terms(values, sp_i, sp_j, s_n, cell)
            zero_denom += warned
            pair_sum = float(bsq.sum())
            residual = 1.0 - pair_sum
            if residual < -CLAMP_TOL:
                raise NegativePurePower(n, pair_sum - 1.0)
            if residual < 0.0:
                residual = 0.0
                clamped += 1
            sum_bsq[flat_n] = pair_sum
            sp_flat[flat_n] = s_n * residual
            keep_b = bsq > 0.0
            if keep_b.any():
                count = int(np.count_nonzero(keep_b))
                tgt_rows.append(np.broadcast_to(n, (count, d)).astype(np.int32))
                i_rows.append(i[keep_b].astype(np.int32))
                j_rows.append(j[keep_b].astype(np.int32))
                b_rows.append(np.sqrt(bsq[keep_b]))
                kept_beta = np.arctan2(values.imag[keep_b], values.real[keep_b])
                beta_rows.append(np.where(kept_beta == -np.pi, np.pi, kept_beta))
                slices[flat_n] = (total, total + count)
                total += count

    if total:
        tgt_idx = np.concatenate(tgt_rows)
        i_idx = np.concatenate(i_rows)
        j_idx = np.concatenate(j_rows)
        b = np.concatenate(b_rows)
        beta = np.concatenate(beta_rows)
    else:
        tgt_idx = np.empty((0, d), dtype=np.int32)
        i_idx = np.empty((0, d), dtype=np.int32)
        j_idx = np.empty((0, d), dtype=np.int32)
        b = np.empty(0, dtype=np.float64)
        beta = np.empty(0, dtype=np.float64)

    return Decomposition(
        grid=grid,
        power=S,
        mode=mode,
        s_p=sp_flat.reshape(grid.storage_shape),
        sum_bsq=sum_bsq.reshape(grid.storage_shape),
        tgt_idx=tgt_idx,
        i_idx=i_idx,
        j_idx=j_idx,
        b=b,
        beta=beta,
        clamped_count=clamped,
        zero_denominator_count=zero_denom,
        _slices=slices,
    )
