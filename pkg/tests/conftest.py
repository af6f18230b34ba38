"""Shared fixtures: small analytic spectra and prebuilt decompositions."""

from dataclasses import dataclass

import numpy as np
import pytest

from bsrm import (
    BispectrumGrid,
    Decomposition,
    GridSpec,
    PowerSpectrumGrid,
    build_bispectrum_grid,
    build_power_grid,
    decompose,
)


def gaussian_power(kappa):
    """Isotropic squared-exponential power spectrum, peak 4."""
    kappa = np.asarray(kappa, dtype=np.float64)
    return 4.0 * np.exp(-0.1 * np.sum(np.atleast_2d(kappa) ** 2, axis=-1))


def coupled_bispectrum(kappa_i, kappa_j):
    """Complex bispectrum with equal real and imaginary parts."""
    ki = np.atleast_2d(np.asarray(kappa_i, dtype=np.float64))
    kj = np.atleast_2d(np.asarray(kappa_j, dtype=np.float64))
    decay = np.sum(ki ** 2, axis=-1) + np.sum(kj ** 2, axis=-1)
    return (1.0 + 1.0j) * 1.2 * np.exp(-0.2 * decay)


@dataclass(frozen=True)
class Bundle:
    """One ready-to-simulate model: grid, spectra, decomposition."""

    grid: GridSpec
    power: PowerSpectrumGrid
    bispectrum: BispectrumGrid
    decomp: Decomposition


def make_bundle(d, N=4, M=8, dkappa=0.5, quadrant=False, mode="lexicographic"):
    grid = GridSpec(d=d, N=N, dkappa=dkappa, M=M, quadrant=quadrant)
    power = build_power_grid(gaussian_power, grid)
    bisp = build_bispectrum_grid(coupled_bispectrum, grid)
    dec = decompose(power, bisp, grid, mode=mode)
    return Bundle(grid=grid, power=power, bispectrum=bisp, decomp=dec)


@pytest.fixture(scope="session")
def toy1d():
    """1D bundle with N=8, M=16."""
    return make_bundle(1, N=8, M=16)


@pytest.fixture(scope="session")
def toy2d():
    """2D general-mode bundle with N=4, M=8."""
    return make_bundle(2)


@pytest.fixture(scope="session")
def toy2dq():
    """2D quadrant-mode bundle with N=4, M=8."""
    return make_bundle(2, quadrant=True)


@pytest.fixture(scope="session")
def toy3d():
    """3D general-mode bundle with N=4, M=8."""
    return make_bundle(3)
