"""Spin-Hamiltonian, rate-model and fitting toolkit for ESR/NMR/ENDOR spectra of an
electron spin coupled to a nuclear spin."""

from .calibration import (
    CalibrationResult, fit_esr_peaks, fit_f0_linear, fit_hyperfine_quadrupole, fit_nmr_peaks,
    fit_nuclear_g, fit_tip_field, recursive_calibration,
)
from .dataset import DatasetConfig, make_dataset
from .lineshapes import (
    Spectrum, fano, lorentzian, synth_endor_map, synth_endor_spectrum, synth_esr_spectrum,
)
from .numerics import MU_B, MU_N, angular_momentum_ops, eigh, least_squares
from .pumping import PumpConfig, build_rate_matrix, population_ratio_vs_drive, steady_state
from .spinmodel import (
    FieldConfig, SpinSystem, diagonalize, double_quantum_frequencies, esr_frequencies,
    field_sweep, hybridization_coefficient, nmr_lines, ti47_field, ti47_system, transition_catalog,
)

__version__ = "0.1.0"

__all__ = [
    "MU_B", "MU_N", "CalibrationResult", "DatasetConfig", "FieldConfig", "PumpConfig", "Spectrum",
    "SpinSystem", "angular_momentum_ops", "build_rate_matrix", "diagonalize",
    "double_quantum_frequencies", "eigh", "esr_frequencies", "fano", "field_sweep",
    "fit_esr_peaks", "fit_f0_linear", "fit_hyperfine_quadrupole", "fit_nmr_peaks", "fit_nuclear_g",
    "fit_tip_field", "hybridization_coefficient", "least_squares", "lorentzian", "make_dataset",
    "nmr_lines", "population_ratio_vs_drive", "recursive_calibration", "steady_state",
    "synth_endor_map", "synth_endor_spectrum", "synth_esr_spectrum", "ti47_field", "ti47_system",
    "transition_catalog",
]
