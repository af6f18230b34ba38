"""Tests for phase streams, spectral assembly, and the two synthesis paths.

Validates:
- counter-based phase tensors: shapes, determinism, stream independence
- frozen random-stream vectors from tests/data/rng_vectors.json
- spectral tensor assembly amplitudes
- FFT and naive path agreement and their validation errors
- the naive-path cost guard
- periodic off-lattice evaluation
- orthogonal increments and their deterministic identities
- field files, CSV export, and difference fields
"""

import json
from pathlib import Path

import numpy as np
import pytest

from bsrm import (
    CostGuard,
    GridSpec,
    SpectrumError,
    assemble_spectral_tensors,
    build_bispectrum_grid,
    build_power_grid,
    decompose,
    difference_field,
    evaluate_at,
    field_to_csv,
    generate_phase_tensors,
    orthogonal_increments,
    read_field_file,
    simulate_fft,
    simulate_naive,
    write_field_file,
)

from conftest import gaussian_power, make_bundle

VECTORS = Path(__file__).parent / "data" / "rng_vectors.json"


class TestPhaseTensors:
    """Counter-based phase draws."""

    def test_shape_covers_tensors_and_orthant(self, toy2d):
        """One orthant-shaped block per phase tensor."""
        phases = generate_phase_tensors(0, 0, toy2d.grid)
        assert phases.phases.shape == (2, 5, 5)
        assert phases.seed == 0
        assert phases.sample_index == 0

    def test_quadrant_uses_single_tensor(self, toy2dq):
        """Quadrant grids draw one shared tensor."""
        phases = generate_phase_tensors(0, 0, toy2dq.grid)
        assert phases.phases.shape == (1, 5, 5)

    def test_values_in_phase_range(self, toy3d):
        """Phases live in [0, 2 pi)."""
        phases = generate_phase_tensors(3, 5, toy3d.grid)
        assert np.all(phases.phases >= 0.0)
        assert np.all(phases.phases < 2.0 * np.pi)

    def test_repeat_draws_are_identical(self, toy2d):
        """The same (seed, sample) always produces the same phases."""
        a = generate_phase_tensors(7, 11, toy2d.grid)
        b = generate_phase_tensors(7, 11, toy2d.grid)
        assert np.array_equal(a.phases, b.phases)

    def test_samples_and_seeds_are_independent_streams(self, toy2d):
        """Different seeds or sample indices give different draws."""
        base = generate_phase_tensors(7, 11, toy2d.grid)
        assert not np.array_equal(
            base.phases, generate_phase_tensors(8, 11, toy2d.grid).phases)
        assert not np.array_equal(
            base.phases, generate_phase_tensors(7, 12, toy2d.grid).phases)

    def test_phases_are_read_only(self, toy2d):
        """Phase arrays are frozen after generation."""
        phases = generate_phase_tensors(0, 0, toy2d.grid)
        with pytest.raises(ValueError, match="read-only"):
            phases.phases[0, 0, 0] = 1.0

    def test_frozen_vectors_replay(self):
        """Stored stream vectors replay bit for bit."""
        with open(VECTORS) as fh:
            payload = json.load(fh)
        assert payload["cases"], "no stored vector cases"
        for case in payload["cases"]:
            grid = GridSpec(d=case["d"], N=case["N"], M=case["M"],
                            dkappa=case["dkappa"],
                            quadrant=case["quadrant"])
            phases = generate_phase_tensors(case["seed"],
                                            case["sample_index"], grid)
            assert phases.phases.shape[0] == case["n_tensors"]
            for tensor, stored in zip(phases.phases, case["phases"]):
                expected = np.array([float(v) for v in stored])
                assert np.array_equal(tensor.ravel(), expected), \
                    f"stream drift in case {case['label']}"


class TestAssembly:
    """Spectral tensor assembly."""

    def test_pure_amplitude_below_interactions(self, toy1d):
        """Modes without pairs carry sqrt(S dk) exp(i phi) exactly."""
        phases = generate_phase_tensors(4, 0, toy1d.grid)
        tensors = assemble_spectral_tensors(toy1d.decomp, phases)
        value = tensors[0].values[1]
        s_val = toy1d.power.value_at(np.array([1]))
        expected = np.sqrt(s_val * toy1d.grid.cell) * np.exp(
            1j * phases.phases[0][1])
        assert value == pytest.approx(expected)

    def test_one_tensor_per_sign_pattern(self, toy3d):
        """Each sign pattern owns one spectral tensor."""
        phases = generate_phase_tensors(4, 0, toy3d.grid)
        tensors = assemble_spectral_tensors(toy3d.decomp, phases)
        assert len(tensors) == toy3d.grid.n_phase_tensors
        assert tensors[0].values.shape == toy3d.grid.orthant_shape


class TestSimulateFFT:
    """The factorized synthesis path."""

    def test_field_shape_and_dtype(self, toy2d):
        """Fields are real and cover the full spatial lattice."""
        phases = generate_phase_tensors(1, 0, toy2d.grid)
        sample = simulate_fft(toy2d.decomp, phases, toy2d.grid, 3)
        assert sample.values.shape == toy2d.grid.M
        assert sample.values.dtype == np.float64
        assert sample.method == "fft"
        assert sample.order == 3

    def test_second_order_runs_without_bispectrum(self, toy2d):
        """Order 2 runs on a decomposition built without a bispectrum."""
        dec = decompose(toy2d.power, None, toy2d.grid)
        phases = generate_phase_tensors(1, 0, toy2d.grid)
        sample = simulate_fft(dec, phases, toy2d.grid, 2)
        assert sample.order == 2
        assert np.all(np.isfinite(sample.values))

    def test_order_two_with_interactions_rejected(self, toy2d):
        """Order 2 on a third-order decomposition is refused."""
        phases = generate_phase_tensors(1, 0, toy2d.grid)
        with pytest.raises(SpectrumError, match="second-order"):
            simulate_fft(toy2d.decomp, phases, toy2d.grid, 2)

    def test_bad_order_rejected(self, toy2d):
        """Orders other than 2 and 3 are refused."""
        phases = generate_phase_tensors(1, 0, toy2d.grid)
        with pytest.raises(SpectrumError, match="order must be 2 or 3"):
            simulate_fft(toy2d.decomp, phases, toy2d.grid, 4)

    def test_phase_grid_mismatch_rejected(self, toy1d, toy2d):
        """Phases drawn on another grid are refused."""
        phases = generate_phase_tensors(1, 0, toy1d.grid)
        with pytest.raises(SpectrumError, match="do not match"):
            simulate_fft(toy2d.decomp, phases, toy2d.grid, 3)


class TestSimulateNaive:
    """The literal term-by-term path."""

    @pytest.mark.parametrize("d,quadrant", [(1, False), (1, True),
                                            (2, False), (2, True),
                                            (3, False), (3, True)])
    def test_matches_fft_path(self, d, quadrant):
        """Direct summation agrees with the factorized path."""
        bundle = make_bundle(d, quadrant=quadrant)
        for seed in (0, 1, 2):
            phases = generate_phase_tensors(seed, 0, bundle.grid)
            fast = simulate_fft(bundle.decomp, phases, bundle.grid, 3)
            slow = simulate_naive(bundle.decomp, phases, bundle.grid, 3)
            scale = float(np.std(fast.values))
            assert np.max(np.abs(fast.values - slow.values)) <= 1e-10 * scale

    def test_cost_guard_triggers(self, toy2d):
        """Exceeding the term budget raises CostGuard with the numbers."""
        phases = generate_phase_tensors(1, 0, toy2d.grid)
        with pytest.raises(CostGuard, match="exceeds the budget") as err:
            simulate_naive(toy2d.decomp, phases, toy2d.grid, 3,
                           cost_budget=10)
        assert err.value.cost > err.value.budget
        assert err.value.budget == 10

    def test_dimension_limit(self):
        """The naive path refuses d=4 grids."""
        grid = GridSpec(d=4, N=1, dkappa=0.5)
        power = build_power_grid(gaussian_power, grid)
        dec = decompose(power, None, grid)
        phases = generate_phase_tensors(0, 0, grid)
        with pytest.raises(SpectrumError, match="d <= 3"):
            simulate_naive(dec, phases, grid, 2)


class TestEvaluateAt:
    """Off-lattice evaluation."""

    def test_matches_lattice_values(self, toy1d):
        """Evaluation at lattice points reproduces the synthesized field."""
        phases = generate_phase_tensors(2, 0, toy1d.grid)
        sample = simulate_fft(toy1d.decomp, phases, toy1d.grid, 3)
        xs = np.arange(toy1d.grid.M[0]) * toy1d.grid.dx[0]
        values = evaluate_at(toy1d.decomp, phases, xs[:, None])
        assert np.allclose(values, sample.values, atol=1e-10)

    def test_field_is_periodic(self, toy2d):
        """Shifting by the lattice period leaves values unchanged."""
        phases = generate_phase_tensors(2, 0, toy2d.grid)
        points = np.array([[0.3, 1.1], [2.0, 0.7]])
        shifted = points + np.asarray(toy2d.grid.period)
        a = evaluate_at(toy2d.decomp, phases, points)
        b = evaluate_at(toy2d.decomp, phases, shifted)
        assert np.allclose(a, b, atol=1e-10)

    def test_wrong_point_dimension_rejected(self, toy2d):
        """Point arrays must match the grid dimension."""
        phases = generate_phase_tensors(2, 0, toy2d.grid)
        with pytest.raises(SpectrumError, match="components"):
            evaluate_at(toy2d.decomp, phases, np.zeros((3, 3)))


class TestOrthogonalIncrements:
    """Increment extraction."""

    def test_pure_mode_magnitude_identity(self, toy1d):
        """Below the first interaction, du^2 + dv^2 = 4 S dk exactly."""
        grid = toy1d.grid
        n = np.array([1])
        expected = 4.0 * toy1d.power.value_at(n) * grid.cell
        for seed in range(5):
            phases = generate_phase_tensors(seed, 0, grid)
            inc = orthogonal_increments(toy1d.decomp, phases, n)
            assert inc.du ** 2 + inc.dv ** 2 == pytest.approx(expected,
                                                              rel=1e-12)

    def test_out_of_grid_target_rejected(self, toy1d):
        """Targets beyond the cutoff are refused."""
        phases = generate_phase_tensors(0, 0, toy1d.grid)
        with pytest.raises(SpectrumError, match="outside the grid"):
            orthogonal_increments(toy1d.decomp, phases, np.array([9]))


class TestFieldFiles:
    """Binary field file format and CSV export."""

    def test_roundtrip_preserves_everything(self, tmp_path, toy2d):
        """Values and provenance metadata roundtrip exactly."""
        phases = generate_phase_tensors(9, 4, toy2d.grid)
        sample = simulate_fft(toy2d.decomp, phases, toy2d.grid, 3)
        path = tmp_path / "f.fld"
        write_field_file(path, sample)
        loaded = read_field_file(path)
        assert np.array_equal(loaded.values, sample.values)
        assert loaded.seed == 9
        assert loaded.sample_index == 4
        assert loaded.method == "fft"
        assert loaded.order == 3
        assert loaded.grid.M == toy2d.grid.M

    def test_two_writes_are_byte_identical(self, tmp_path, toy2d):
        """Writing the same sample twice gives identical bytes."""
        phases = generate_phase_tensors(9, 4, toy2d.grid)
        sample = simulate_fft(toy2d.decomp, phases, toy2d.grid, 3)
        a = tmp_path / "a.fld"
        b = tmp_path / "b.fld"
        write_field_file(a, sample)
        write_field_file(b, sample)
        assert a.read_bytes() == b.read_bytes()

    def test_wrong_magic_rejected(self, tmp_path):
        """Files without the BSRMFLD0 magic are refused."""
        path = tmp_path / "bad.fld"
        path.write_bytes(b"WRONGMAG" + b"\x00" * 64)
        with pytest.raises(SpectrumError, match="not a BSRMFLD0 file"):
            read_field_file(path)

    def test_csv_export_2d(self, tmp_path, toy2d):
        """2D CSV export writes one row per lattice site plus a header."""
        phases = generate_phase_tensors(0, 0, toy2d.grid)
        sample = simulate_fft(toy2d.decomp, phases, toy2d.grid, 3)
        path = tmp_path / "f.csv"
        field_to_csv(path, sample)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "x1,x2,value"
        assert len(lines) == 1 + sample.values.size

    def test_csv_export_rejects_3d(self, tmp_path, toy3d):
        """CSV export refuses d=3 fields."""
        phases = generate_phase_tensors(0, 0, toy3d.grid)
        sample = simulate_fft(toy3d.decomp, phases, toy3d.grid, 3)
        with pytest.raises(SpectrumError, match="d <= 2"):
            field_to_csv(tmp_path / "f.csv", sample)


class TestDifferenceField:
    """Paired-sample differencing."""

    def test_difference_values(self, toy2d):
        """The difference field subtracts values elementwise."""
        p0 = generate_phase_tensors(0, 0, toy2d.grid)
        p1 = generate_phase_tensors(0, 1, toy2d.grid)
        a = simulate_fft(toy2d.decomp, p0, toy2d.grid, 3)
        b = simulate_fft(toy2d.decomp, p1, toy2d.grid, 3)
        diff = difference_field(a, b)
        assert np.array_equal(diff.values, a.values - b.values)

    def test_grid_mismatch_rejected(self, toy1d, toy2d):
        """Samples from different grids cannot be differenced."""
        a = simulate_fft(toy1d.decomp,
                         generate_phase_tensors(0, 0, toy1d.grid),
                         toy1d.grid, 3)
        b = simulate_fft(toy2d.decomp,
                         generate_phase_tensors(0, 0, toy2d.grid),
                         toy2d.grid, 3)
        with pytest.raises(SpectrumError, match="different"):
            difference_field(a, b)
