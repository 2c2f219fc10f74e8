"""Lineshapes and forward synthesis of ESR and ENDOR spectra."""

import csv
from dataclasses import dataclass, field

import numpy as np

from .numerics import H_OVER_KB
from .errors import DegenerateSteadyStateError
from .pumping import (
    Populations, PumpConfig, build_rate_matrix, closed_classes, drive_matrix, stationary,
)
from .spinmodel import DOWN, UP, diagonalize, esr_frequencies, nmr_label_states, nmr_lines

ESR_FWHM = 8.0
NMR_FWHM = 4.0
READOUT_WINDOW = 5.0  # linewidths


@dataclass(frozen=True)
class FanoParams:
    center: float
    width: float
    asymmetry_q: float = 0.0
    amplitude: float = 1.0

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError("Fano width must be positive")


@dataclass(frozen=True)
class LorentzianParams:
    center: float
    fwhm: float
    amplitude: float = 1.0

    def __post_init__(self):
        if not self.fwhm > 0:
            raise ValueError("Lorentzian fwhm must be positive")


@dataclass
class Spectrum:
    """Signal on an ascending frequency axis (MHz) plus metadata."""

    frequencies: np.ndarray
    signal: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frequencies = np.asarray(self.frequencies, dtype=float).ravel()
        self.signal = np.asarray(self.signal, dtype=float).ravel()
        if self.frequencies.shape != self.signal.shape:
            raise ValueError("frequencies and signal must have equal length")
        if self.frequencies.size > 1 and np.any(np.diff(self.frequencies) <= 0):
            raise ValueError("frequencies must be strictly ascending")
        self.meta = dict(self.meta)

    def __len__(self):
        return self.frequencies.size


@dataclass(frozen=True)
class TransferTable:
    """Voltage ratio (delivered / requested) at ascending frequency knots."""

    knots: tuple

    def __post_init__(self):
        knots = tuple((float(f), float(r)) for f, r in self.knots)
        if not knots:
            raise ValueError("transfer table is empty")
        f = np.array([k[0] for k in knots])
        r = np.array([k[1] for k in knots])
        if np.any(np.diff(f) <= 0):
            raise ValueError("transfer table frequencies must be ascending")
        if np.any(r <= 0):
            raise ValueError("transfer table ratios must be positive")
        object.__setattr__(self, "knots", knots)


def fano(f, p):
    """Fano resonance with zero asymptote.

    amplitude * ((q + e)^2 / (1 + e^2) - 1), e = 2 (f - center) / width.
    q = 0 gives a Lorentzian dip of depth ``amplitude``; for large q the
    curve approaches amplitude * q^2 times a Lorentzian peak.
    """
    eps = 2 * (np.asarray(f, dtype=float) - p.center) / p.width
    q = p.asymmetry_q
    return p.amplitude * ((q * q - 1 + 2 * q * eps) / (1 + eps * eps))


def lorentzian(f, p):
    hw2 = (p.fwhm / 2) ** 2
    return p.amplitude * hw2 / ((np.asarray(f, dtype=float) - p.center) ** 2 + hw2)


def lorentzian_profile(f, center, fwhm):
    """Unit-height Lorentzian."""
    hw2 = (fwhm / 2) ** 2
    return hw2 / ((np.asarray(f, dtype=float) - center) ** 2 + hw2)


def linear_background(f, offset, slope, pivot):
    return offset + slope * (np.asarray(f, dtype=float) - pivot)


def boltzmann_populations(i_nuclear, temperature_k, level_spacing_mhz):
    """Thermal nuclear populations ordered by ascending m_I.

    Levels are E(m) = level_spacing * (m + I), so m_I = -I is the ground level.
    """
    n = int(round(2 * i_nuclear + 1))
    if temperature_k <= 0:
        raise ValueError("temperature must be positive")
    x = H_OVER_KB * level_spacing_mhz / temperature_k
    w = np.exp(-x * np.arange(n))
    return w / w.sum()


def _as_populations(populations, n):
    if isinstance(populations, Populations):
        return populations.nuclear_marginals()
    p = np.asarray(populations, dtype=float).ravel()
    if p.size != n:
        raise ValueError(f"expected {n} populations, got {p.size}")
    if np.any(p < 0):
        raise ValueError("populations must be nonnegative")
    return p


def synth_esr_spectrum(sys, field, populations, grid, line_fwhm=ESR_FWHM, shape="fano",
                       asymmetry_q=2.0, amplitude=1.0, background=(0.0, 0.0), meta=None):
    """Sum of the 2I+1 ESR lines with heights proportional to populations.

    ``populations`` is ordered by ascending m_I (or a Populations object, in
    which case the nuclear marginals are used). ``shape`` is 'fano' or
    'lorentzian'.
    """
    grid = np.asarray(grid, dtype=float)
    n = int(round(2 * sys.i_nuclear + 1))
    pops = _as_populations(populations, n)
    lines = esr_frequencies(sys, field)
    mis = sorted({mi for _, mi in sys.basis_labels})
    signal = np.zeros_like(grid)
    for line in lines:
        amp = amplitude * pops[mis.index(line.m_i)]
        if shape == "fano":
            signal += fano(grid, FanoParams(line.frequency, line_fwhm, asymmetry_q, amp))
        elif shape == "lorentzian":
            signal += lorentzian(grid, LorentzianParams(line.frequency, line_fwhm, amp))
        else:
            raise ValueError(f"unknown lineshape {shape!r}")
    pivot = 0.5 * (grid[0] + grid[-1])
    signal += linear_background(grid, background[0], background[1], pivot)
    info = {"kind": "esr", "b_z": field.b_z}
    outside = [ln.frequency for ln in lines if not grid[0] <= ln.frequency <= grid[-1]]
    if outside:
        info["warning"] = f"{len(outside)} line(s) outside the frequency grid"
    info.update(meta or {})
    return Spectrum(grid, signal, info)


class EndorModel:
    """Precomputed rate model for ENDOR readout at one field.

    NMR drives on every labelled single-quantum nuclear line roll off as a
    unit-height Lorentzian in detuning; the ESR drive and readout weight of
    each electron line do the same, with a hard cutoff beyond
    ``READOUT_WINDOW`` linewidths. With a transfer table the NMR drive rate
    scales with the square of the delivered amplitude ratio.
    """

    def __init__(self, sys, field, cfg, esr_fwhm=ESR_FWHM, nmr_fwhm=NMR_FWHM, transfer=None):
        self.sys, self.field, self.cfg = sys, field, cfg
        self.transfer = transfer
        self.esr_fwhm, self.nmr_fwhm = esr_fwhm, nmr_fwhm
        sol = diagonalize(sys, field)
        self.esr_lines = esr_frequencies(sys, field, sol)
        self.nmr = nmr_lines(sys, field, sol) if sys.i_nuclear >= 1 else {}
        base_cfg = cfg.with_(omega_esr=0.0, omega_nmr=0.0)
        self.labels = sys.basis_labels
        self.base = build_rate_matrix(sys, field, base_cfg, sol=sol).generator
        self.nmr_drives = {
            tag: drive_matrix(self.labels, nmr_label_states(tag, sys.i_nuclear))
            for tag in self.nmr
        }
        self.esr_drives = [
            drive_matrix(self.labels, ((DOWN, ln.m_i), (UP, ln.m_i))) for ln in self.esr_lines
        ]
        mis = [ln.m_i for ln in self.esr_lines]
        self.marginal_matrix = np.array([[1.0 if lab[1] == m else 0.0 for lab in self.labels] for m in mis])

    def readout_weights(self, f_esr):
        w = np.array([lorentzian_profile(f_esr, ln.frequency, self.esr_fwhm) for ln in self.esr_lines])
        near = np.array([abs(f_esr - ln.frequency) <= READOUT_WINDOW * self.esr_fwhm for ln in self.esr_lines])
        return np.where(near, w, 0.0)

    def nmr_rates(self, f_nmr):
        f_nmr = np.asarray(f_nmr, dtype=float)
        drive = self.cfg.omega_nmr
        if self.transfer is not None:
            drive = drive * apply_transfer(1.0, f_nmr, self.transfer) ** 2
        return {tag: drive * lorentzian_profile(f_nmr, ln.frequency, self.nmr_fwhm)
                for tag, ln in self.nmr.items()}

    def generators(self, f_esr, f_nmr):
        w = self.readout_weights(f_esr)
        g0 = self.base.copy()
        for wk, d in zip(w, self.esr_drives):
            if wk > 0:
                g0 += self.cfg.omega_esr * wk * d
        f_nmr = np.atleast_1d(np.asarray(f_nmr, dtype=float))
        gs = np.broadcast_to(g0, (f_nmr.size,) + g0.shape).copy()
        for tag, rate in self.nmr_rates(f_nmr).items():
            gs += rate[:, None, None] * self.nmr_drives[tag][None]
        return gs, w

    def check_connected(self, f_esr):
        g, _ = self.generators(f_esr, [0.0])
        if len(closed_classes(g[0])) > 1:
            raise DegenerateSteadyStateError("ENDOR rate graph has several closed classes")

    def signal(self, f_esr, f_nmr):
        """Readout-weighted nuclear marginals for each NMR frequency."""
        gs, w = self.generators(f_esr, f_nmr)
        if not np.any(w > 0):
            return np.zeros(gs.shape[0])
        pops = stationary(gs)
        return pops @ self.marginal_matrix.T @ w

    def nearest_line(self, f_esr):
        d = [abs(f_esr - ln.frequency) for ln in self.esr_lines]
        return self.esr_lines[int(np.argmin(d))], min(d)


def synth_endor_spectrum(sys, field, f_esr_fixed, f_nmr_grid, pump_config=None,
                         esr_fwhm=ESR_FWHM, nmr_fwhm=NMR_FWHM, off_resonant=False,
                         background=(0.0, 0.0), meta=None, transfer=None):
    """ENDOR trace: ESR readout at fixed f_esr while sweeping the NMR drive.

    The signal is the readout-weighted population of the nuclear sublevel(s)
    whose ESR line sits near ``f_esr_fixed``. A frequency further than five
    linewidths from every ESR line has no readout channel and must be
    flagged with ``off_resonant=True``; the trace is then flat.
    """
    cfg = pump_config or PumpConfig()
    grid = np.asarray(f_nmr_grid, dtype=float)
    model = EndorModel(sys, field, cfg, esr_fwhm, nmr_fwhm, transfer)
    line, dist = model.nearest_line(f_esr_fixed)
    if dist > READOUT_WINDOW * esr_fwhm and not off_resonant:
        raise ValueError(
            f"f_esr={f_esr_fixed} MHz is {dist:.1f} MHz from the nearest ESR line; "
            "pass off_resonant=True for a control trace")
    model.check_connected(f_esr_fixed)
    signal = model.signal(f_esr_fixed, grid)
    pivot = 0.5 * (grid[0] + grid[-1])
    signal = signal + linear_background(grid, background[0], background[1], pivot)
    info = {"kind": "endor", "b_z": field.b_z, "f_esr_fixed": float(f_esr_fixed),
            "probed_mi": line.m_i if dist <= READOUT_WINDOW * esr_fwhm else None}
    info.update(meta or {})
    return Spectrum(grid, signal, info)


def synth_endor_map(sys, field, f_esr_grid, f_nmr_grid, pump_config=None,
                    esr_fwhm=ESR_FWHM, nmr_fwhm=NMR_FWHM, transfer=None):
    """Signal matrix with rows along f_nmr and columns along f_esr."""
    cfg = pump_config or PumpConfig()
    model = EndorModel(sys, field, cfg, esr_fwhm, nmr_fwhm, transfer)
    f_esr_grid = np.asarray(f_esr_grid, dtype=float)
    f_nmr_grid = np.asarray(f_nmr_grid, dtype=float)
    out = np.empty((f_nmr_grid.size, f_esr_grid.size))
    for k, fe in enumerate(f_esr_grid):
        out[:, k] = model.signal(fe, f_nmr_grid)
    return out


def column_mean_subtracted(matrix):
    m = np.asarray(matrix, dtype=float)
    return m - m.mean(axis=0, keepdims=True)


def add_noise(spec, sigma, seed):
    """Additive Gaussian noise from a seeded generator."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    meta = dict(spec.meta, seed=int(seed), noise_sigma=float(sigma))
    if sigma == 0:
        return Spectrum(spec.frequencies.copy(), spec.signal.copy(), meta)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(spec.signal.size)
    return Spectrum(spec.frequencies.copy(), spec.signal + sigma * noise, meta)


def apply_transfer(requested_amplitude, f, table):
    """Amplitude delivered at the junction for a requested source amplitude."""
    if table is None or not getattr(table, "knots", None):
        raise ValueError("transfer table is empty")
    f_knots = np.array([k[0] for k in table.knots])
    ratios = np.array([k[1] for k in table.knots])
    return requested_amplitude * np.interp(f, f_knots, ratios)


def load_transfer_table(path):
    """Read a two-column CSV (frequency_MHz, voltage_ratio); a header row is optional."""
    knots = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].lstrip().startswith("#"):
                continue
            try:
                knots.append((float(row[0]), float(row[1])))
            except ValueError:
                if knots:
                    raise
                continue  # header
    return TransferTable(tuple(knots))
