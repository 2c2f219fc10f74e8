"""Synthetic reference dataset: ESR and ENDOR spectra at several fields."""

from dataclasses import dataclass, field

import numpy as np

from .lineshapes import (
    ESR_FWHM, NMR_FWHM, Spectrum, boltzmann_populations, synth_endor_spectrum,
    synth_esr_spectrum,
)
from .pumping import PumpConfig
from .spinmodel import diagonalize, esr_frequencies, hybridization_coefficients, ti47_field, ti47_system

DATASET_FIELDS = (0.2, 0.3, 0.45, 0.66, 0.8, 1.07, 1.4)


@dataclass(frozen=True)
class DatasetConfig:
    """Acquisition settings for the synthetic dataset.

    ``noise_fraction`` scales Gaussian noise to the largest feature of each
    spectrum (max |signal - median|). ``nmr_drive_fraction`` sets the NMR
    drive rate relative to the flip-flop rate feeding m_I = -I, which keeps
    the ENDOR response in its linear regime.
    """

    fields_t: tuple = DATASET_FIELDS
    noise_fraction: float = 0.05
    seed: int = 20240917
    esr_half_span_mhz: float = 450.0
    esr_step_mhz: float = 1.0
    esr_fano_q: float = 2.0
    esr_temperature_k: float = 0.025
    nmr_grid_mhz: tuple = (30.0, 100.0, 0.25)
    nmr_drive_fraction: float = 0.1
    omega_esr_per_s: float = 1e6


@dataclass
class Dataset:
    esr: list = field(default_factory=list)
    nmr: list = field(default_factory=list)


def weak_nmr_drive(sys, fld, pump, fraction):
    coeff = hybridization_coefficients(sys, fld)
    return fraction * pump.gamma_ff * coeff[-sys.i_nuclear + 1] ** 2


def _noisy(spec, fraction, rng):
    scale = float(np.max(np.abs(spec.signal - np.median(spec.signal))))
    sigma = fraction * scale
    meta = dict(spec.meta, noise_sigma=sigma)
    if sigma == 0:
        return Spectrum(spec.frequencies, spec.signal, meta)
    return Spectrum(spec.frequencies, spec.signal + sigma * rng.standard_normal(len(spec)), meta)


def make_dataset(cfg=None, sys=None, field_template=None, pump=None):
    """ESR and ENDOR spectra at each field of ``cfg.fields_t``.

    ESR spectra carry Boltzmann-weighted Fano lines over f0 +- half span;
    ENDOR spectra read out on the lowest-frequency ESR line.
    """
    cfg = cfg or DatasetConfig()
    sys = sys or ti47_system()
    ftpl = field_template or ti47_field()
    pump = pump or PumpConfig(omega_esr=cfg.omega_esr_per_s)
    seeds = np.random.SeedSequence(cfg.seed).spawn(2 * len(cfg.fields_t))
    out = Dataset()
    lo, hi, step = cfg.nmr_grid_mhz
    nmr_grid = np.round(np.arange(lo, hi + step / 2, step), 10)
    for k, b in enumerate(cfg.fields_t):
        fld = ftpl.with_bz(b)
        sol = diagonalize(sys, fld)
        lines = esr_frequencies(sys, fld, sol)
        f0 = float(np.mean([ln.frequency for ln in lines]))
        center = np.round(f0)
        grid = np.arange(center - cfg.esr_half_span_mhz, center + cfg.esr_half_span_mhz + cfg.esr_step_mhz / 2,
                         cfg.esr_step_mhz)
        pops = boltzmann_populations(sys.i_nuclear, cfg.esr_temperature_k, sys.a_hyperfine[2])
        esr = synth_esr_spectrum(sys, fld, pops, grid, ESR_FWHM, "fano", cfg.esr_fano_q,
                                 meta={"field_index": k})
        out.esr.append(_noisy(esr, cfg.noise_fraction, np.random.default_rng(seeds[2 * k])))

        omega_nmr = weak_nmr_drive(sys, fld, pump, cfg.nmr_drive_fraction)
        f_esr = lines[0].frequency
        endor = synth_endor_spectrum(sys, fld, f_esr, nmr_grid, pump.with_(omega_nmr=omega_nmr),
                                     ESR_FWHM, NMR_FWHM, meta={"field_index": k,
                                                               "omega_nmr": omega_nmr})
        out.nmr.append(_noisy(endor, cfg.noise_fraction, np.random.default_rng(seeds[2 * k + 1])))
    return out
