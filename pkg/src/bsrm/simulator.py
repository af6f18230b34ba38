"""Field synthesis: random phases, orthogonal increments, direct (naive)
spectral summation, and the FFT-factorized fast path.

A sample is the real field

    A(x) = 2 Re sum_t sum_o V_t(o) exp(i kappa_{I_t .o} . x)

where t runs over the 2^(d-1) sign patterns I_t (one shared tensor for
quadrant fields), o over the non-negative orthant, and the spectral tensor

    V_t(o) = sqrt(S_p(s) dk) e^{i Phi_t(o)}
             + sqrt(S(s) dk) sum_pairs b_p e^{i (Phi_t(|i|) + Phi_t(|j|) + beta)}

with s = I_t . o the signed storage index and dk the wavenumber cell
volume.  The naive and FFT paths evaluate the identical sum, so they agree
to round-off.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .decomposition import Decomposition
from .spectral_model import GridSpec, SpectrumError

__all__ = [
    "PhaseTensors",
    "SpectralTensor",
    "FieldSample",
    "OrthogonalIncrements",
    "CostGuard",
    "DEFAULT_COST_BUDGET",
    "generate_phase_tensors",
    "orthogonal_increments",
    "simulate_naive",
    "simulate_fft",
    "assemble_spectral_tensors",
    "difference_field",
    "evaluate_at",
    "write_field_file",
    "read_field_file",
    "field_to_csv",
]

DEFAULT_COST_BUDGET = 10 ** 9
FIELD_MAGIC = b"BSRMFLD0"
FIELD_VERSION = 1
_METHOD_CODES = {"naive": 0, "fft": 1, "difference": 2, "external": 3}


class CostGuard(RuntimeError):
    """Naive summation cost exceeds the configured budget."""

    def __init__(self, cost: int, budget: int):
        self.cost = int(cost)
        self.budget = int(budget)
        super().__init__(
            f"naive path cost {cost:.3e} scalar term-evaluations exceeds "
            f"the budget {budget:.3e}; use the FFT path or a smaller grid"
        )


@dataclass(frozen=True)
class PhaseTensors:
    """Uniform [0, 2pi) phases, one orthant-shaped tensor per sign pattern."""

    grid: GridSpec
    seed: int
    sample_index: int
    phases: np.ndarray

    def __post_init__(self):
        expected = (self.grid.n_phase_tensors,) + self.grid.orthant_shape
        if self.phases.shape != expected:
            raise SpectrumError(
                f"phase tensor shape {self.phases.shape} does not match {expected}"
            )
        self.phases.flags.writeable = False


@dataclass(frozen=True)
class SpectralTensor:
    """Complex mode amplitudes of one sign pattern over the orthant."""

    tensor_id: int
    pattern: tuple[int, ...]
    values: np.ndarray


@dataclass(frozen=True)
class FieldSample:
    """One synthesized real field on the spatial lattice."""

    grid: GridSpec
    values: np.ndarray
    seed: int
    sample_index: int
    method: str
    order: int


@dataclass(frozen=True)
class OrthogonalIncrements:
    """Cosine/sine increment pair (du, dv) of one target index."""

    n: tuple[int, ...]
    du: float
    dv: float


def generate_phase_tensors(seed: int, sample_index: int,
                           grid: GridSpec) -> PhaseTensors:
    """Draw the phase tensors for one sample.

    Stream layout: one Philox generator per tensor with 128-bit key
    (seed, sample_index * 16 + tensor_id); phases are Generator.random()
    over the orthant in C order, scaled to [0, 2pi).  Distinct sample
    indices and tensors never share a stream.
    """
    count = grid.n_phase_tensors
    phases = np.empty((count,) + grid.orthant_shape, dtype=np.float64)
    for tensor_id in range(count):
        key = np.array(
            [np.uint64(seed), np.uint64(sample_index * 16 + tensor_id)],
            dtype=np.uint64,
        )
        gen = np.random.Generator(np.random.Philox(key=key))
        phases[tensor_id] = gen.random(grid.orthant_shape) * (2.0 * math.pi)
    return PhaseTensors(grid=grid, seed=int(seed),
                        sample_index=int(sample_index), phases=phases)


def _orthant_strides(grid: GridSpec) -> np.ndarray:
    strides = np.ones(grid.d, dtype=np.int64)
    shape = grid.orthant_shape
    for k in range(grid.d - 2, -1, -1):
        strides[k] = strides[k + 1] * shape[k + 1]
    return strides


def _tensor_of(grid: GridSpec, idx: np.ndarray) -> np.ndarray:
    """Sign-pattern id owning each signed index (non-negative signs -> +)."""
    if grid.quadrant:
        return np.zeros(idx.shape[:-1], dtype=np.int64)
    t = np.zeros(idx.shape[:-1], dtype=np.int64)
    for k in range(1, grid.d):
        t |= (idx[..., k] < 0).astype(np.int64) << (k - 1)
    return t


class _AssemblyPlan:
    """Precomputed per-coefficient buffers shared by every sample."""

    def __init__(self, decomp: Decomposition):
        grid = decomp.grid
        self.grid = grid
        t_count = grid.n_phase_tensors
        p_orth = int(np.prod(grid.orthant_shape))
        self.t_count = t_count
        self.p_orth = p_orth
        strides = _orthant_strides(grid)

        patterns = grid.sign_patterns[:t_count] if grid.quadrant \
            else grid.sign_patterns
        orth_idx = np.stack(
            np.meshgrid(*[np.arange(n + 1) for n in grid.N], indexing="ij"),
            axis=-1,
        ).reshape(-1, grid.d)
        sp_flat = decomp.s_p.ravel()
        amp = np.empty(t_count * p_orth, dtype=np.float64)
        for t in range(t_count):
            signed = orth_idx * patterns[t][None, :]
            amp[t * p_orth:(t + 1) * p_orth] = np.sqrt(
                sp_flat[decomp._flat_storage(signed)] * grid.cell
            )
        self.pure_amp = amp

        i_idx, j_idx, tgt_idx, b, beta = decomp.flat_coefficients()
        if b.size:
            owner = _tensor_of(grid, tgt_idx) * p_orth
            self.ipos = owner + np.abs(i_idx.astype(np.int64)) @ strides
            self.jpos = owner + np.abs(j_idx.astype(np.int64)) @ strides
            self.tpos = owner + np.abs(tgt_idx.astype(np.int64)) @ strides
            s_flat = decomp.power.values.ravel()
            s_n = s_flat[decomp._flat_storage(tgt_idx)]
            self.camp = np.sqrt(s_n * grid.cell) * b * np.exp(1j * beta)
        else:
            self.ipos = self.jpos = self.tpos = np.empty(0, dtype=np.int64)
            self.camp = np.empty(0, dtype=np.complex128)


def _get_plan(decomp: Decomposition) -> _AssemblyPlan:
    plan = getattr(decomp, "_assembly_plan", None)
    if plan is None:
        plan = _AssemblyPlan(decomp)
        object.__setattr__(decomp, "_assembly_plan", plan)
    return plan


def _check_order(decomp: Decomposition, order: int) -> None:
    if order not in (2, 3):
        raise SpectrumError(f"order must be 2 or 3, got {order}")
    if order == 2 and decomp.n_coefficients:
        raise SpectrumError(
            "order=2 requires a second-order decomposition (built without "
            "a bispectrum)"
        )


def _check_phases(decomp: Decomposition, phases: PhaseTensors,
                  grid: GridSpec) -> None:
    if not decomp.grid.compatible(grid):
        raise SpectrumError("decomposition grid does not match the target grid")
    if not phases.grid.compatible(grid):
        raise SpectrumError("phase tensors do not match the target grid")


def _tensor_values(decomp: Decomposition, phases: PhaseTensors) -> np.ndarray:
    """Flat (t_count * p_orth,) complex spectral tensor buffer."""
    plan = _get_plan(decomp)
    buf = phases.phases.reshape(-1)
    modes = np.exp(1j * buf)
    values = plan.pure_amp * modes
    if plan.camp.size:
        contrib = plan.camp * modes[plan.ipos] * modes[plan.jpos]
        values = values + (
            np.bincount(plan.tpos, weights=contrib.real,
                        minlength=values.size)
            + 1j * np.bincount(plan.tpos, weights=contrib.imag,
                               minlength=values.size)
        )
    return values


def assemble_spectral_tensors(decomp: Decomposition, phases: PhaseTensors,
                              grid: GridSpec | None = None
                              ) -> tuple[SpectralTensor, ...]:
    """Build the complex spectral tensors of one sample, one per pattern."""
    grid = grid or decomp.grid
    _check_phases(decomp, phases, grid)
    plan = _get_plan(decomp)
    values = _tensor_values(decomp, phases)
    out = []
    for t in range(plan.t_count):
        block = values[t * plan.p_orth:(t + 1) * plan.p_orth]
        out.append(SpectralTensor(
            tensor_id=t,
            pattern=tuple(int(v) for v in grid.sign_patterns[t]),
            values=block.reshape(grid.orthant_shape),
        ))
    return tuple(out)


def simulate_fft(decomp: Decomposition, phases: PhaseTensors,
                 grid: GridSpec | None = None, order: int = 3) -> FieldSample:
    """Synthesize one sample through zero-padded FFTs.

    Each spectral tensor is zero-padded from N_k+1 to M_k points per axis;
    an inverse transform (scaled by M_k) is applied along axes with
    I_k = +1 and a forward transform along axes with I_k = -1, the pattern
    results are summed, and twice the real part is returned.  The result
    equals the naive summation to round-off.
    """
    grid = grid or decomp.grid
    _check_order(decomp, order)
    _check_phases(decomp, phases, grid)
    tensors = assemble_spectral_tensors(decomp, phases, grid)
    acc = np.zeros(grid.M, dtype=np.complex128)
    pad = tuple(slice(0, n + 1) for n in grid.N)
    for tensor in tensors:
        emb = np.zeros(grid.M, dtype=np.complex128)
        emb[pad] = tensor.values
        if grid.quadrant:
            # One shared tensor: apply every sign-pattern transform to it.
            for pattern in grid.sign_patterns:
                acc += _pattern_transform(emb, pattern, grid)
        else:
            acc += _pattern_transform(emb, tensor.pattern, grid)
    values = 2.0 * np.real(acc)
    return FieldSample(grid=grid, values=values, seed=phases.seed,
                       sample_index=phases.sample_index, method="fft",
                       order=order)


def _pattern_transform(emb: np.ndarray, pattern, grid: GridSpec) -> np.ndarray:
    arr = emb
    for k in range(grid.d):
        if pattern[k] > 0:
            arr = np.fft.ifft(arr, axis=k) * grid.M[k]
        else:
            arr = np.fft.fft(arr, axis=k)
    return arr


def simulate_naive(decomp: Decomposition, phases: PhaseTensors,
                   grid: GridSpec | None = None, order: int = 3,
                   cost_budget: int = DEFAULT_COST_BUDGET) -> FieldSample:
    """Synthesize one sample by direct term-by-term spectral summation.

    Every pure mode and every interaction pair adds one full-lattice cosine
    evaluation; nothing is grouped or factorized.  Supports d <= 3 and
    raises CostGuard when term count times lattice size exceeds the budget.
    """
    grid = grid or decomp.grid
    if grid.d > 3:
        raise SpectrumError("the naive path supports d <= 3")
    _check_order(decomp, order)
    _check_phases(decomp, phases, grid)
    plan = _get_plan(decomp)
    m_total = int(np.prod(grid.M))
    n_patterns = len(grid.sign_patterns)
    coeff_cosines = decomp.n_coefficients * (n_patterns if grid.quadrant else 1)
    n_terms = n_patterns * plan.p_orth + coeff_cosines
    cost = n_terms * m_total
    if cost > cost_budget:
        raise CostGuard(cost, cost_budget)

    x_axes = [np.arange(m) * dx for m, dx in zip(grid.M, grid.dx)]
    field = np.zeros(grid.M, dtype=np.float64)

    def add_cosine(kappa, amplitude, angle):
        if amplitude == 0.0:
            return
        acc = np.full(grid.M, angle, dtype=np.float64)
        for k in range(grid.d):
            shape = [1] * grid.d
            shape[k] = grid.M[k]
            acc += (kappa[k] * x_axes[k]).reshape(shape)
        field[...] += amplitude * np.cos(acc)

    patterns = grid.sign_patterns
    orth_idx = np.stack(
        np.meshgrid(*[np.arange(n + 1) for n in grid.N], indexing="ij"),
        axis=-1,
    ).reshape(-1, grid.d)
    dk = np.asarray(grid.dkappa)
    buf = phases.phases.reshape(plan.t_count, plan.p_orth)
    sp_flat = decomp.s_p.ravel()
    for t in range(plan.t_count):
        use_patterns = patterns if grid.quadrant else patterns[t:t + 1]
        for pattern in use_patterns:
            signed = orth_idx * pattern[None, :]
            amps = 2.0 * np.sqrt(sp_flat[decomp._flat_storage(signed)]
                                 * grid.cell)
            for row in range(plan.p_orth):
                add_cosine(signed[row] * dk, amps[row], buf[t, row])

    if decomp.n_coefficients:
        strides = _orthant_strides(grid)
        i_idx, j_idx, tgt_idx, b, beta = decomp.flat_coefficients()
        owner = _tensor_of(grid, tgt_idx)
        ipos = np.abs(i_idx.astype(np.int64)) @ strides
        jpos = np.abs(j_idx.astype(np.int64)) @ strides
        s_flat = decomp.power.values.ravel()
        amps = 2.0 * np.sqrt(s_flat[decomp._flat_storage(tgt_idx)]
                             * grid.cell) * b
        use = grid.sign_patterns if grid.quadrant else None
        for row in range(b.size):
            angle = (buf[owner[row], ipos[row]] + buf[owner[row], jpos[row]]
                     + beta[row])
            if grid.quadrant:
                for pattern in use:
                    add_cosine(tgt_idx[row] * pattern * dk, amps[row], angle)
            else:
                add_cosine(tgt_idx[row] * dk, amps[row], angle)

    return FieldSample(grid=grid, values=field, seed=phases.seed,
                       sample_index=phases.sample_index, method="naive",
                       order=order)


def evaluate_at(decomp: Decomposition, phases: PhaseTensors,
                points: np.ndarray) -> np.ndarray:
    """Evaluate the continuous synthesis at arbitrary physical points.

    The synthesized field is a finite cosine sum, hence periodic with the
    wavenumber-grid period on every axis; this evaluator makes that
    property testable off the lattice.
    """
    grid = decomp.grid
    _check_phases(decomp, phases, grid)
    plan = _get_plan(decomp)
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[-1] != grid.d:
        raise SpectrumError(f"points must have {grid.d} components")
    flat_pts = pts.reshape(-1, grid.d)
    out = np.zeros(flat_pts.shape[0], dtype=np.float64)
    dk = np.asarray(grid.dkappa)
    buf = phases.phases.reshape(plan.t_count, plan.p_orth)
    orth_idx = np.stack(
        np.meshgrid(*[np.arange(n + 1) for n in grid.N], indexing="ij"),
        axis=-1,
    ).reshape(-1, grid.d)
    sp_flat = decomp.s_p.ravel()
    patterns = grid.sign_patterns
    for t in range(plan.t_count):
        use_patterns = patterns if grid.quadrant else patterns[t:t + 1]
        for pattern in use_patterns:
            signed = orth_idx * pattern[None, :]
            amps = 2.0 * np.sqrt(sp_flat[decomp._flat_storage(signed)]
                                 * grid.cell)
            angles = flat_pts @ (signed * dk[None, :]).T + buf[t][None, :]
            out += np.cos(angles) @ amps
    if decomp.n_coefficients:
        strides = _orthant_strides(grid)
        i_idx, j_idx, tgt_idx, b, beta = decomp.flat_coefficients()
        owner = _tensor_of(grid, tgt_idx)
        ipos = np.abs(i_idx.astype(np.int64)) @ strides
        jpos = np.abs(j_idx.astype(np.int64)) @ strides
        s_flat = decomp.power.values.ravel()
        amps = 2.0 * np.sqrt(s_flat[decomp._flat_storage(tgt_idx)]
                             * grid.cell) * b
        base = buf[owner, ipos] + buf[owner, jpos] + beta
        if grid.quadrant:
            for pattern in patterns:
                angles = flat_pts @ (tgt_idx * pattern[None, :] * dk).T
                out += np.cos(angles + base[None, :]) @ amps
        else:
            angles = flat_pts @ (tgt_idx * dk[None, :]).T
            out += np.cos(angles + base[None, :]) @ amps
    return out.reshape(pts.shape[:-1])


def difference_field(a: FieldSample, b: FieldSample) -> FieldSample:
    """Pointwise difference a - b of two samples on the same lattice."""
    if a.values.shape != b.values.shape:
        raise SpectrumError("difference_field: samples have different shapes")
    if not a.grid.compatible(b.grid):
        raise SpectrumError("difference_field: samples live on different grids")
    return FieldSample(grid=a.grid, values=a.values - b.values, seed=a.seed,
                       sample_index=a.sample_index, method="difference",
                       order=max(a.order, b.order))


# ---------------------------------------------------------------------------
# Field file format
# ---------------------------------------------------------------------------


def write_field_file(path, sample: FieldSample) -> None:
    """Write a field sample in the BSRMFLD0 binary format.

    Layout (little-endian): magic "BSRMFLD0", version u32, d u32, M u32[d],
    dx f64[d], seed u64, sample_index u64, method u32, order u32, then the
    f64 row-major lattice payload.
    """
    grid = sample.grid
    header = struct.pack("<8sII", FIELD_MAGIC, FIELD_VERSION, grid.d)
    header += np.asarray(grid.M, dtype="<u4").tobytes()
    header += np.asarray(grid.dx, dtype="<f8").tobytes()
    header += struct.pack("<QQII", sample.seed, sample.sample_index,
                          _METHOD_CODES.get(sample.method, 3), sample.order)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(sample.values.astype("<f8").tobytes())


def read_field_file(path) -> FieldSample:
    """Read a BSRMFLD0 file.

    The header carries spatial metadata only; the returned grid uses the
    maximal anti-aliased wavenumber count N = M // 2.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    base = struct.calcsize("<8sII")
    magic, version, d = struct.unpack_from("<8sII", data, 0)
    if magic != FIELD_MAGIC:
        raise SpectrumError(f"{path}: not a BSRMFLD0 file")
    if version != FIELD_VERSION:
        raise SpectrumError(f"{path}: unsupported version {version}")
    offset = base
    m = np.frombuffer(data, dtype="<u4", count=d, offset=offset)
    offset += 4 * d
    dx = np.frombuffer(data, dtype="<f8", count=d, offset=offset)
    offset += 8 * d
    seed, sample_index, method_code, order = struct.unpack_from(
        "<QQII", data, offset)
    offset += struct.calcsize("<QQII")
    count = int(np.prod(m))
    values = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
    if values.size != count:
        raise SpectrumError(f"{path}: payload shape mismatch with header")
    m_t = tuple(int(v) for v in m)
    dkappa = tuple(2.0 * math.pi / (mk * dxk) for mk, dxk in zip(m_t, dx))
    grid = GridSpec(d=int(d), N=tuple(mk // 2 for mk in m_t), dkappa=dkappa,
                    M=m_t)
    methods = {v: k for k, v in _METHOD_CODES.items()}
    return FieldSample(grid=grid, values=values.reshape(m_t).copy(),
                       seed=int(seed), sample_index=int(sample_index),
                       method=methods.get(method_code, "external"),
                       order=int(order))


def field_to_csv(path, sample: FieldSample) -> None:
    """Write a 1D or 2D sample as CSV with physical coordinates."""
    grid = sample.grid
    if grid.d == 1:
        x = np.arange(grid.M[0]) * grid.dx[0]
        rows = np.column_stack([x, sample.values])
        np.savetxt(path, rows, delimiter=",", header="x,value", comments="")
    elif grid.d == 2:
        x1 = np.repeat(np.arange(grid.M[0]) * grid.dx[0], grid.M[1])
        x2 = np.tile(np.arange(grid.M[1]) * grid.dx[1], grid.M[0])
        rows = np.column_stack([x1, x2, sample.values.ravel()])
        np.savetxt(path, rows, delimiter=",", header="x1,x2,value",
                   comments="")
    else:
        raise SpectrumError("csv export supports d <= 2 only")


def orthogonal_increments(decomp: Decomposition, phases: PhaseTensors,
                          n) -> OrthogonalIncrements:
    """Cosine/sine increments (du, dv) of target n for one phase draw.

    du = sqrt(2) A_p cos(Phi_n) + sum_pairs sqrt(2) A_n b_p
         cos(Phi_i + Phi_j + beta)   with A_p = sqrt(2 S_p(n) dk),
    A_n = sqrt(2 S(n) dk), and dv the same with sines.  Phases are read
    from the tensor owning n's sign pattern.
    """
    grid = decomp.grid
    _check_phases(decomp, phases, grid)
    n_arr = np.asarray(n, dtype=np.int64)
    if n_arr.shape != (grid.d,):
        raise SpectrumError(f"n must be a {grid.d}-vector")
    if not grid.contains(n_arr):
        raise SpectrumError(f"target {tuple(n_arr)} is outside the grid")
    strides = _orthant_strides(grid)
    t = int(_tensor_of(grid, n_arr))
    buf = phases.phases.reshape(grid.n_phase_tensors, -1)
    phi_n = buf[t, int(np.abs(n_arr) @ strides)]
    sp_n = float(decomp.s_p.ravel()[decomp._flat_storage(n_arr)])
    a_p = math.sqrt(2.0 * sp_n * grid.cell)
    du = math.sqrt(2.0) * a_p * math.cos(phi_n)
    dv = math.sqrt(2.0) * a_p * math.sin(phi_n)
    i_idx, j_idx, b, beta = decomp.coefficients_for(n_arr)
    if b.size:
        s_n = float(decomp.power.values.ravel()[decomp._flat_storage(n_arr)])
        a_n = math.sqrt(2.0 * s_n * grid.cell)
        ipos = np.abs(i_idx.astype(np.int64)) @ strides
        jpos = np.abs(j_idx.astype(np.int64)) @ strides
        angles = buf[t, ipos] + buf[t, jpos] + beta
        du += math.sqrt(2.0) * a_n * float(b @ np.cos(angles))
        dv += math.sqrt(2.0) * a_n * float(b @ np.sin(angles))
    return OrthogonalIncrements(n=tuple(int(v) for v in n_arr), du=du, dv=dv)
