"""Acceptance tests for the synthesis pipeline.

Eight end-to-end gates:

1. oracle equivalence of the FFT and naive synthesis paths,
2. ex1 moment reproduction (third- and second-order ensembles),
3. ex2 moment reproduction (both bispectra),
4. ex3 moment reproduction plus its fast smoke variant,
5. ex4 moment reproduction (all three bispectra),
6. FFT performance floor and setup-dominated scaling,
7. structural invariants (reconstruction, collapse, transforms,
   increment orthogonality, estimator recovery),
8. byte-level determinism and frozen RNG vectors.

The K=1000 ensemble reproductions take about a minute each and are
marked slow.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from bsrm import (
    GridSpec,
    bicoherence,
    build_bispectrum_grid,
    build_power_grid,
    correlation_from_spectrum,
    decompose,
    estimate_bispectrum,
    estimate_power_spectrum,
    generate_phase_tensors,
    orthogonal_increments,
    read_field_file,
    simulate_fft,
    simulate_naive,
    spectrum_from_correlation,
)
from bsrm.cli import cmd_verify, load_config, main, validate_config

from conftest import coupled_bispectrum, gaussian_power, make_bundle

DATA = Path(__file__).parent / "data"


def run_verify(name, out_dir):
    """Run the shipped config through the verification pipeline."""
    cfg = validate_config(load_config(name))
    return cmd_verify(cfg, out_dir=out_dir)


class TestOracleEquivalence:
    """Criterion 1: the FFT path reproduces the direct summation."""

    @pytest.mark.parametrize("d,quadrant", [
        (1, False), (1, True), (2, False), (2, True), (3, False), (3, True),
    ])
    def test_fft_matches_naive_over_seeds(self, d, quadrant):
        """Twenty seeds per lattice agree to 1e-8 of the field scale."""
        size = {1: 8, 2: 6, 3: 4}[d]
        bundle = make_bundle(d, N=size, M=2 * size, quadrant=quadrant)
        for seed in range(20):
            phases = generate_phase_tensors(seed, 0, bundle.grid)
            fast = simulate_fft(bundle.decomp, phases, bundle.grid, 3)
            slow = simulate_naive(bundle.decomp, phases, bundle.grid, 3)
            gap = float(np.max(np.abs(fast.values - slow.values)))
            assert gap <= 1e-8 * float(fast.values.std())


@pytest.mark.slow
class TestExample1Moments:
    """Criterion 2: the 2D ex1 ensembles reproduce the target moments."""

    def test_third_order_moments(self, tmp_path):
        """K=1000 third-order moments land on the targets."""
        report = run_verify("ex1", tmp_path)
        variance = report["estimates"]["variance"]
        skewness = report["estimates"]["skewness"]
        assert abs(variance - 74.4874) / 74.4874 <= 0.01
        assert abs(skewness - 0.2022) <= 0.02
        assert report["decomposition"]["reconstruction_max_error"] <= 1e-12

    def test_second_order_skewness_vanishes(self, tmp_path):
        """The order-2 twin of ex1 is symmetric."""
        report = run_verify("ex1_order2", tmp_path)
        assert abs(report["estimates"]["variance"] - 74.4874) / 74.4874 <= 0.01
        assert abs(report["estimates"]["skewness"]) <= 0.01


@pytest.mark.slow
class TestExample2Moments:
    """Criterion 3: both ex2 bispectra give the same target skewness."""

    @pytest.mark.parametrize("name", ["ex2_b1", "ex2_b2"])
    def test_third_order_moments(self, name, tmp_path):
        """K=1000 skewness and variance land on the targets."""
        report = run_verify(name, tmp_path)
        variance = report["estimates"]["variance"]
        skewness = report["estimates"]["skewness"]
        assert abs(variance - 74.4874) / 74.4874 <= 0.01
        assert abs(skewness - 0.04559) <= 0.008


@pytest.mark.slow
class TestExample3Moments:
    """Criterion 4: the 3D ex3 ensemble and its smoke variant."""

    def test_third_order_moments(self, tmp_path):
        """K=1000 variance and skewness land on the targets."""
        report = run_verify("ex3", tmp_path)
        variance = report["estimates"]["variance"]
        skewness = report["estimates"]["skewness"]
        assert abs(variance - 179.0812) / 179.0812 <= 0.01
        assert abs(skewness - 0.02107) <= 0.008

    def test_smoke_variant_is_fast(self, tmp_path):
        """The K=100 smoke run finishes in minutes within widened bounds."""
        start = time.monotonic()
        report = run_verify("ex3_smoke", tmp_path)
        wall = time.monotonic() - start
        assert wall < 300.0
        assert abs(report["estimates"]["skewness"] - 0.02107) <= 0.02


@pytest.mark.slow
class TestExample4Moments:
    """Criterion 5: all three ex4 bispectra give the target skewness."""

    @pytest.mark.parametrize("name", ["ex4_b1", "ex4_b2", "ex4_b3"])
    def test_third_order_skewness(self, name, tmp_path):
        """K=1000 skewness lands within the quoted band."""
        report = run_verify(name, tmp_path)
        assert abs(report["estimates"]["skewness"] - 0.00580) <= 0.004


@pytest.mark.slow
class TestPerformance:
    """Criterion 6: the FFT path is fast and setup-dominated."""

    def test_fft_beats_naive_fifty_fold(self):
        """1D, N=64, M=128, K=1024: FFT is at least 50x faster."""
        grid = GridSpec(d=1, N=64, dkappa=0.05, M=128)
        power = build_power_grid(gaussian_power, grid)
        bisp = build_bispectrum_grid(coupled_bispectrum, grid)
        decomp = decompose(power, bisp, grid)
        count = 1024

        start = time.perf_counter()
        for idx in range(count):
            simulate_naive(decomp, generate_phase_tensors(0, idx, grid),
                           grid, 3)
        naive_total = time.perf_counter() - start

        start = time.perf_counter()
        for idx in range(count):
            simulate_fft(decomp, generate_phase_tensors(0, idx, grid),
                         grid, 3)
        fft_total = time.perf_counter() - start

        assert fft_total * 50.0 <= naive_total

    def test_amortized_cost_falls_with_ensemble_size(self):
        """Setup dominates: per-sample wall time shrinks as K grows."""
        grid = GridSpec(d=1, N=64, dkappa=0.05, M=128)
        power = build_power_grid(gaussian_power, grid)
        bisp = build_bispectrum_grid(coupled_bispectrum, grid)

        def pipeline_per_sample(count):
            start = time.perf_counter()
            decomp = decompose(power, bisp, grid)
            for idx in range(count):
                simulate_fft(decomp, generate_phase_tensors(0, idx, grid),
                             grid, 3)
            return (time.perf_counter() - start) / count

        small = min(pipeline_per_sample(8) for _ in range(3))
        large = pipeline_per_sample(1024)
        assert large < small


class TestInvariants:
    """Criterion 7: structural identities and estimator recovery."""

    def test_reconstruction_identity(self, toy1d, toy2d, toy2dq, toy3d):
        """Stored coefficients reproduce the prescribed bispectrum."""
        for bundle in (toy1d, toy2d, toy2dq, toy3d):
            assert bundle.decomp.reconstruction_max_error() <= 1e-12

    def test_coupling_fractions_bounded(self, toy1d, toy2d, toy2dq, toy3d):
        """Sum of squared partial bicoherences stays in [0, 1]."""
        for bundle in (toy1d, toy2d, toy2dq, toy3d):
            total = bundle.decomp.sum_bsq
            assert float(total.min()) >= 0.0
            assert float(total.max()) <= 1.0

    def test_zero_bispectrum_collapses_to_second_order(self, toy2d):
        """With B = 0 the third-order synthesis is the second-order one."""
        zero = build_bispectrum_grid(
            lambda ki, kj: np.zeros(ki.shape[:-1], dtype=np.complex128),
            toy2d.grid)
        decomp = decompose(toy2d.power, zero, toy2d.grid)
        assert decomp.n_coefficients == 0
        phases = generate_phase_tensors(7, 0, toy2d.grid)
        third = simulate_fft(decomp, phases, toy2d.grid, 3)
        second = simulate_fft(decomp, phases, toy2d.grid, 2)
        assert np.array_equal(third.values, second.values)
        assert np.array_equal(decomp.s_p, toy2d.power.values)

    def test_wiener_khinchin_roundtrip(self, toy1d, toy2d, toy3d):
        """Spectrum -> correlation -> spectrum is the identity."""
        for bundle in (toy1d, toy2d, toy3d):
            corr = correlation_from_spectrum(bundle.power)
            back = spectrum_from_correlation(corr)
            gap = float(np.max(np.abs(back.values - bundle.power.values)))
            assert gap <= 1e-10

    def test_increment_orthogonality_monte_carlo(self, toy1d):
        """Increment means, cross terms, and triple moments match.

        At 1e5 draws the sample means of du and dv, the du*dv cross
        moment, and all eight (du, dv) triple moments across the pair
        i=2, j=3, n=5 sit within 3 standard errors of their exact
        values, whose signs alternate between the real and imaginary
        parts of the prescribed bispectrum.
        """
        grid = toy1d.grid
        decomp = toy1d.decomp
        draws = 100000
        inc = {}
        for label, index in (("i", (2,)), ("j", (3,)), ("n", (5,))):
            inc[label] = np.empty((2, draws))
        for k in range(draws):
            phases = generate_phase_tensors(2, k, grid)
            for label, index in (("i", (2,)), ("j", (3,)), ("n", (5,))):
                pair = orthogonal_increments(decomp, phases, index)
                inc[label][0, k] = pair.du
                inc[label][1, k] = pair.dv

        def zscore(values, expected):
            se = values.std(ddof=1) / math.sqrt(draws)
            return abs(float(values.mean()) - expected) / se

        assert zscore(inc["n"][0], 0.0) <= 3.0
        assert zscore(inc["n"][1], 0.0) <= 3.0
        assert zscore(inc["n"][0] * inc["n"][1], 0.0) <= 3.0

        b_ij = complex(toy1d.bispectrum.eval(np.array([[2]]),
                                             np.array([[3]]))[0])
        scale = 2.0 * grid.cell ** 2
        table = {
            (0, 0, 0): b_ij.real, (0, 0, 1): b_ij.imag,
            (0, 1, 0): -b_ij.imag, (1, 0, 0): -b_ij.imag,
            (0, 1, 1): b_ij.real, (1, 0, 1): b_ij.real,
            (1, 1, 0): -b_ij.real, (1, 1, 1): -b_ij.imag,
        }
        for (x, y, z), value in table.items():
            triple = inc["i"][x] * inc["j"][y] * inc["n"][z]
            assert zscore(triple, scale * value) <= 3.0

    def test_bispectrum_estimator_recovers_prescription(self, toy1d):
        """Chunked K=5000 estimates recover the 1D bispectrum to 3 SE."""
        grid = toy1d.grid
        chunks = 20
        per_chunk = 250
        estimates = []
        pooled = []
        for c in range(chunks):
            samples = [simulate_fft(
                toy1d.decomp,
                generate_phase_tensors(2, c * per_chunk + k, grid),
                grid, 3) for k in range(per_chunk)]
            pooled.extend(samples)
            estimates.append(estimate_bispectrum(samples, grid))
        values = np.array([est.values for est in estimates])
        prescribed = toy1d.bispectrum.eval(estimates[0].i, estimates[0].j)
        mean = values.mean(axis=0)
        se_re = values.real.std(axis=0, ddof=1) / math.sqrt(chunks)
        se_im = values.imag.std(axis=0, ddof=1) / math.sqrt(chunks)
        z_re = np.abs(mean.real - prescribed.real) / se_re
        z_im = np.abs(mean.imag - prescribed.imag) / se_im
        assert float(z_re.max()) <= 3.0
        assert float(z_im.max()) <= 3.0

        s_est = estimate_power_spectrum(pooled, grid)
        b_est = estimate_bispectrum(pooled, grid)
        for row in range(len(b_est.i)):
            value = bicoherence(b_est, s_est, b_est.i[row], b_est.j[row])
            assert 0.0 <= value <= 1.0


class TestDeterminism:
    """Criterion 8: byte-identical reruns and frozen RNG vectors."""

    def test_consecutive_runs_are_byte_identical(self, tmp_path):
        """Two runs of one (config, seed) write identical artifacts."""
        first = tmp_path / "first"
        second = tmp_path / "second"
        for out in (first, second):
            rc = main(["simulate", "--config", "ex1",
                       "--set", "run.samples=2", "--out", str(out)])
            assert rc == 0
        for name in ("manifest.json", "field_000000.fld",
                     "field_000001.fld"):
            assert (first / name).read_bytes() == (second / name).read_bytes()
        sample = read_field_file(first / "field_000001.fld")
        assert sample.sample_index == 1

    def test_frozen_rng_vectors_replay(self):
        """Phase streams reproduce the stored vectors digit for digit."""
        cases = json.loads((DATA / "rng_vectors.json").read_text())["cases"]
        for case in cases:
            grid = GridSpec(d=case["d"], N=case["N"],
                            dkappa=case["dkappa"], M=case["M"],
                            quadrant=case["quadrant"])
            phases = generate_phase_tensors(case["seed"],
                                            case["sample_index"], grid)
            got = [["%.17g" % v for v in tensor.ravel()]
                   for tensor in phases.phases]
            assert got == case["phases"], case["label"]
