"""Ultralow-field NMR spin-dynamics simulator."""

from .dynamics import DensityState, Fid, acquire, evolve, hard_pulse, partial_trace, tensor_state
from .sabre import SabrePreparation, prepare_longitudinal, prepare_sabre
from .sequences import (
    AcquisitionParams,
    PhaseCycleScheme,
    fafos_amplitudes,
    fourier_coefficients,
    run_cosy,
    run_cosy_cycled,
    run_fafos,
)
from .spectra import (
    CoherenceLabel,
    Spectrum1D,
    Spectrum2D,
    alias_frequency,
    assign_peaks,
    coherence_decompose,
    fft_1d,
    fft_2d,
    fit_composite_weights,
    predict_qc_frequencies,
)
from .spinsys import Hamiltonian, Nucleus, SpinSystem, build_hamiltonian, load_preset, load_spin_system

__version__ = "0.1.0"
