"""Third-order spectral representation of non-Gaussian random fields.

Simulation of stationary, asymmetrically non-Gaussian random fields in one
to three (and partially four) dimensions from a prescribed power spectrum
and bispectrum.  The synthesis decomposes the bispectrum into partial
bicoherences, splits the power between pure and interaction waves, and sums
the resulting spectral expansion either literally (naive path) or through
FFT factorization (fast path).  Estimation utilities verify prescribed
moments, spectra, and bispectra on synthesized ensembles.
"""

from .spectral_model import (
    PRESET_IDS,
    BispectrumGrid,
    CorrelationGrid,
    CutoffReport,
    GridSpec,
    NegativeSpectrumError,
    PowerSpectrumGrid,
    SpectrumError,
    SymmetryReport,
    TargetMoments,
    build_bispectrum_grid,
    build_power_grid,
    check_cutoff,
    correlation_from_spectrum,
    preset_spectrum,
    read_spectrum_file,
    spectrum_from_correlation,
    target_moments,
    validate_symmetries,
    write_spectrum_file,
)
from .decomposition import (
    Decomposition,
    NegativePurePower,
    PairList,
    biphase,
    decompose,
    enumerate_pairs,
    partial_bicoherence_sq,
)
from .simulator import (
    CostGuard,
    FieldSample,
    OrthogonalIncrements,
    PhaseTensors,
    SpectralTensor,
    assemble_spectral_tensors,
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
from .estimation import (
    BispectrumEstimate,
    MomentAccumulator,
    MomentReport,
    SpectrumEstimate,
    bicoherence,
    bin_weights,
    cumulants_from_moments,
    ensemble_moments,
    estimate_bispectrum,
    estimate_power_spectrum,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # spectral model
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
    # decomposition
    "Decomposition",
    "NegativePurePower",
    "PairList",
    "enumerate_pairs",
    "biphase",
    "partial_bicoherence_sq",
    "decompose",
    # simulator
    "CostGuard",
    "PhaseTensors",
    "SpectralTensor",
    "FieldSample",
    "OrthogonalIncrements",
    "generate_phase_tensors",
    "assemble_spectral_tensors",
    "simulate_fft",
    "simulate_naive",
    "evaluate_at",
    "orthogonal_increments",
    "difference_field",
    "write_field_file",
    "read_field_file",
    "field_to_csv",
    # estimation
    "MomentAccumulator",
    "MomentReport",
    "SpectrumEstimate",
    "BispectrumEstimate",
    "cumulants_from_moments",
    "ensemble_moments",
    "estimate_power_spectrum",
    "estimate_bispectrum",
    "bicoherence",
    "bin_weights",
]
