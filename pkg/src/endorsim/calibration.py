"""Parameter extraction from ESR and ENDOR spectra.

The pipeline: Fano fits of each ESR spectrum, a linear fit of the comb
centre against field (g_e,z and the axial tip field), a full-Hamiltonian
fit of the tilted tip field, Lorentzian fits of the ENDOR dips, and a
full-Hamiltonian fit of A_z and kappa. The last three steps are repeated
until the parameters stop moving.
"""

from dataclasses import asdict, dataclass, field
import math

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import CalibrationStageError, FitNotConverged, RankDeficiencyError
from .lineshapes import FanoParams, LorentzianParams, fano, lorentzian
from .numerics import MU_B, MU_N, least_squares
from .spinmodel import (
    DOWN, ROMAN, UP, FieldConfig, SpinSystem, assign_product_states, diagonalize_many,
    nmr_label_states,
)

ESR_MODES = ("equal_spacing_boltzmann", "free")
NMR_LABELS = ROMAN[:4]


@dataclass(frozen=True)
class Estimate:
    value: float
    sigma: float = float("nan")

    def __float__(self):
        return float(self.value)


@dataclass
class EsrPeakSet:
    b_z: float
    centers: np.ndarray
    center_f0: float
    fano_params: tuple
    fit_quality: float
    mode: str = "equal_spacing_boltzmann"
    f0_sigma: float = float("nan")
    spacing: float = float("nan")
    center_sigmas: np.ndarray = None
    background: tuple = (0.0, 0.0)
    noise: float = float("nan")
    converged: bool = True


@dataclass
class NmrPeakSet:
    b_z: float
    centers: np.ndarray
    labels: tuple
    lorentzian_params: tuple
    uncertainties: np.ndarray
    fit_quality: float = float("nan")
    background: tuple = (0.0, 0.0)
    noise: float = float("nan")
    converged: bool = True

    def relabel(self, labels):
        named = [lab for lab in labels if lab is not None]
        if len(set(named)) != len(named):
            raise ValueError("peak labels must be unique")
        return NmrPeakSet(self.b_z, self.centers, tuple(labels), self.lorentzian_params,
                          self.uncertainties, self.fit_quality, self.background, self.noise,
                          self.converged)

    def by_label(self):
        return {lab: (c, s) for lab, c, s in zip(self.labels, self.centers, self.uncertainties)
                if lab is not None}


@dataclass
class LinearFit:
    slope: float
    intercept: float
    covariance: np.ndarray
    residual_norm: float


@dataclass
class ZeemanFit:
    g_e_z: Estimate
    b_tip_z: Estimate
    line: LinearFit


@dataclass
class TipFit:
    b_tip: Estimate
    phi: Estimate
    residual_norm: float
    at_bound: bool = False
    warning: str = ""
    g_e_z: Estimate = None


@dataclass
class HyperfineFit:
    a_z: Estimate
    kappa: Estimate
    residual_norm: float
    n_observations: int


@dataclass
class NuclearGFit:
    g_n: Estimate
    slope: Estimate
    intercept: Estimate
    line: LinearFit


@dataclass
class CalibrationResult:
    g_e_z: Estimate = None
    b_tip_z: Estimate = None
    b_tip: Estimate = None
    phi: Estimate = None
    a_z: Estimate = None
    kappa: Estimate = None
    g_n: Estimate = None
    i_nuclear: float = 2.5
    iterations: int = 0
    converged: bool = False
    partial: bool = False
    history: list = field(default_factory=list)
    stage_residuals: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    @property
    def q_derived(self):
        if self.kappa is None:
            return None
        i = self.i_nuclear
        return Estimate(self.kappa.value / (2 * i * (2 * i - 1)),
                        self.kappa.sigma / (2 * i * (2 * i - 1)))

    def to_dict(self):
        out = {}
        for k, v in asdict(self).items():
            out[k] = v
        q = self.q_derived
        out["q_derived"] = None if q is None else asdict(q)
        return _jsonable(out)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


# -- noise and initial guesses -------------------------------------------------

def noise_estimate(signal):
    """Per-point noise from the median absolute deviation of first differences."""
    d = np.diff(np.asarray(signal, dtype=float))
    if d.size == 0:
        return 1.0
    mad = np.median(np.abs(d - np.median(d)))
    sigma = 1.4826 * mad / np.sqrt(2)
    if not sigma > 0:
        sigma = np.std(d) / np.sqrt(2)
    return float(sigma) if sigma > 0 else 0.0


def _weights_scale(signal, sigma):
    # floor keeps noise-free data from producing absurd weights
    span = float(np.ptp(signal)) if np.size(signal) else 0.0
    if span == 0:
        return 1.0
    return max(sigma, 1e-9 * span)


def pick_extrema(f, resid, n, min_sep):
    """Greedy picks of the n largest |resid| with a minimum separation."""
    f = np.asarray(f, float)
    a = np.abs(np.asarray(resid, float)).copy()
    picks = []
    for _ in range(n):
        if not np.any(np.isfinite(a)) or np.nanmax(a) <= 0:
            break
        k = int(np.nanargmax(a))
        picks.append(k)
        a[np.abs(f - f[k]) < min_sep] = -np.inf
    return picks


def robust_baseline(y, rounds=8):
    """Level of the flat part of a trace: repeatedly keep the half closest to it."""
    y = np.asarray(y, float)
    b = float(np.median(y))
    for _ in range(rounds):
        dev = np.abs(y - b)
        b = float(np.median(y[dev <= np.quantile(dev, 0.5)]))
    return b


def _smooth(y, f, fwhm):
    """Matched-filter smoothing with a unit-area Lorentzian of the given width."""
    step = float(np.median(np.diff(f)))
    half = int(np.ceil(3 * fwhm / step))
    x = np.arange(-half, half + 1) * step
    kernel = 1.0 / (1.0 + (2 * x / fwhm) ** 2)
    kernel /= kernel.sum()
    return np.convolve(y, kernel, mode="same")


def _half_max_width(f, y, k, fallback):
    """Full width at half maximum of |y| around index k."""
    h = abs(y[k]) / 2
    lo = k
    while lo > 0 and abs(y[lo]) > h:
        lo -= 1
    hi = k
    while hi < len(y) - 1 and abs(y[hi]) > h:
        hi += 1
    w = f[hi] - f[lo]
    return float(w) if w > 0 else fallback


# -- ESR ----------------------------------------------------------------------

def _comb_guess(f, y, n, spacing):
    """Best comb centre and spacing by a matched-filter scan of |y|."""
    m = np.arange(n) - (n - 1) / 2
    a = np.abs(y - np.median(y))
    if n == 1:
        return float(f[int(np.argmax(a))]), spacing
    spacings = spacing * np.linspace(0.94, 1.06, 49)
    step = max(np.median(np.diff(f)) / 2, 1e-6)
    centers = np.arange(f[0], f[-1] + step, step)
    best = (-np.inf, centers[0], spacing)
    for sp in spacings:
        pos = centers[:, None] + sp * m[None, :]
        score = np.interp(pos, f, a, left=0.0, right=0.0).sum(axis=1)
        k = int(np.argmax(score))
        if score[k] > best[0]:
            best = (score[k], centers[k], sp)
    return float(best[1]), float(best[2])


def _fano_unit(f, center, width, q):
    return fano(f, FanoParams(center, width, q, 1.0))


def fit_esr_peaks(spec, n_peaks, constraints="equal_spacing_boltzmann", spacing_guess=130.0,
                  width_guess=None):
    """Fit n_peaks Fano lines to an ESR spectrum.

    Constrained mode places the lines at f0 + spacing * m with
    m = -(n-1)/2 .. (n-1)/2, heights A * exp(-beta * k) (one effective
    temperature), a shared width and per-line asymmetry q. Free mode fits
    every centre and height independently. A linear background pivoted at
    the grid midpoint is always included.
    """
    if constraints not in ESR_MODES:
        raise ValueError(f"unknown constraint mode {constraints!r}")
    n = int(n_peaks)
    if n < 1:
        raise ValueError("n_peaks must be at least 1")
    f = spec.frequencies
    y = spec.signal
    if f.size < 3 * n + 6:
        raise ValueError("spectrum has too few points for the requested fit")
    pivot = 0.5 * (f[0] + f[-1])
    sigma = noise_estimate(y)
    scale = _weights_scale(y, sigma)
    m = np.arange(n) - (n - 1) / 2
    kk = np.arange(n)
    b_z = float(spec.meta.get("b_z", float("nan")))

    if np.ptp(y) == 0:
        raise FitNotConverged("constant spectrum: no ESR lines to fit")
    f0, sp = _comb_guess(f, y, n, spacing_guess)
    base = np.median(y)
    width = width_guess or min(_half_max_width(f, y - base, int(np.argmax(np.abs(y - base))), 8.0),
                               (sp if n > 1 else np.ptp(f)) / 3)
    centers0 = f0 + sp * m

    # q, height, background initialised by linear solves over a q grid
    best = None
    for q in np.arange(-3.0, 3.01, 0.5):
        cols = [_fano_unit(f, c, width, q) for c in centers0]
        design = np.column_stack(cols + [np.ones_like(f), f - pivot])
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        rss = float(np.sum((design @ coef - y) ** 2))
        if best is None or rss < best[0]:
            best = (rss, q, coef)
    _, q0, coef = best
    heights0 = coef[:n]
    bg0 = coef[n:]

    if constraints == "equal_spacing_boltzmann":
        a0 = heights0[0] if abs(heights0[0]) > 0 else np.max(np.abs(heights0))
        ratio = [h / a0 for h in heights0[1:] if a0 != 0 and h / a0 > 0]
        beta0 = -float(np.mean(np.log(ratio) / np.arange(1, len(ratio) + 1))) if ratio else 0.0
        beta0 = float(np.clip(beta0, -5, 5))
        if n > 1:
            init = [f0, sp, width, a0, beta0] + [q0] * n + list(bg0)
        else:
            init = [f0, width, a0, q0] + list(bg0)

        def unpack(p):
            if n > 1:
                c = p[0] + p[1] * m
                w, amp, beta = p[2], p[3], p[4]
                qs = p[5:5 + n]
                bg = p[5 + n:]
                h = amp * np.exp(-beta * kk)
            else:
                c = np.array([p[0]])
                w, h, qs, bg = p[1], np.array([p[2]]), np.array([p[3]]), p[4:]
            return c, w, h, qs, bg
        width_index = 2 if n > 1 else 1
    else:
        init = list(centers0) + [width] + list(heights0) + [q0] * n + list(bg0)

        def unpack(p):
            return p[:n], p[n], p[n + 1:2 * n + 1], p[2 * n + 1:3 * n + 1], p[3 * n + 1:]
        width_index = n

    def model(p):
        c, w, h, qs, bg = unpack(p)
        out = bg[0] + bg[1] * (f - pivot)
        for ck, hk, qk in zip(c, h, qs):
            out = out + hk * _fano_unit(f, ck, w, qk)
        return out

    bounds = [(None, None)] * len(init)
    step = np.median(np.diff(f))
    bounds[width_index] = (step / 4, np.ptp(f))
    init[width_index] = float(np.clip(init[width_index], *bounds[width_index]))
    res = least_squares(lambda p: (model(p) - y) / scale, init, bounds)
    c, w, h, qs, bg = unpack(res.params)
    order = np.argsort(c)
    params = tuple(FanoParams(float(c[k]), float(w), float(qs[k]), float(h[k])) for k in order)
    se = res.stderr
    if constraints == "equal_spacing_boltzmann":
        f0_fit = float(res.params[0])
        f0_sigma = float(se[0])
        spacing = float(res.params[1]) if n > 1 else float("nan")
        csig = np.sqrt(se[0] ** 2 + (m * (se[1] if n > 1 else 0.0)) ** 2)
    else:
        f0_fit = float(np.mean(c))
        f0_sigma = float(np.sqrt(np.sum(se[:n] ** 2)) / n)
        spacing = float(np.polyfit(m, np.sort(c), 1)[0]) if n > 1 else float("nan")
        csig = se[:n][order]
    # residual per point against the noise estimate
    rms = float(np.sqrt(np.mean((model(res.params) - y) ** 2)))
    peak = EsrPeakSet(b_z, np.asarray(c)[order], f0_fit, params, rms, constraints, f0_sigma,
                      spacing, np.asarray(csig), (float(bg[0]), float(bg[1])), sigma,
                      res.converged)
    amp_sig = np.max(np.abs(h)) * 4
    if not res.converged:
        raise FitNotConverged(f"ESR fit did not converge: {res.message}", peak)
    if not amp_sig > 5 * max(sigma, 1e-12 * (np.max(np.abs(y)) + 1e-300)) or not np.all(np.isfinite(se)):
        peak.converged = False
        raise FitNotConverged("no resolvable ESR lines in the spectrum", peak)
    return peak


# -- linear fits --------------------------------------------------------------

def _linear_fit(x, y, sigma=None):
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if x.size < 2 or np.ptp(x) == 0:
        raise ValueError("linear fit needs at least two distinct abscissae")
    w = np.ones_like(x) if sigma is None else 1.0 / np.asarray(sigma, float) ** 2
    if np.any(~np.isfinite(w)) or np.any(w <= 0):
        raise ValueError("uncertainties must be positive and finite")
    design = np.column_stack([x, np.ones_like(x)])
    sw = np.sqrt(w)
    a = design * sw[:, None]
    b = y * sw
    coef, *_ = np.linalg.lstsq(a, b, rcond=None)
    resid = a @ coef - b
    rss = float(resid @ resid)
    cov = np.linalg.inv(a.T @ a)
    dof = x.size - 2
    if sigma is None:
        cov = cov * (rss / dof) if dof > 0 else np.full((2, 2), np.nan)
    return LinearFit(float(coef[0]), float(coef[1]), cov, float(np.sqrt(rss)))


def fit_f0_linear(points, sigmas=None):
    """g_e,z and the axial tip field from comb centres f0 = mu_B g (b_z + b_tip_z)."""
    pts = np.asarray(points, float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must be (b_z, f0) pairs")
    line = _linear_fit(pts[:, 0], pts[:, 1], sigmas)
    s, c = line.slope, line.intercept
    if s == 0:
        raise ValueError("zero slope: no Zeeman dependence")
    var_s, var_c, cov_sc = line.covariance[0, 0], line.covariance[1, 1], line.covariance[0, 1]
    g = Estimate(s / MU_B, math.sqrt(var_s) / MU_B if np.isfinite(var_s) else float("nan"))
    bt = c / s
    # first-order propagation for a ratio
    var_bt = (var_c / s ** 2 - 2 * c * cov_sc / s ** 3 + c ** 2 * var_s / s ** 4)
    bt_sig = math.sqrt(max(var_bt, 0.0)) if np.isfinite(var_bt) else float("nan")
    return ZeemanFit(g, Estimate(bt, bt_sig), line)


def fit_nuclear_g(points, sigmas=None):
    """Apparent g_N from transition frequencies against field (slope / mu_N)."""
    pts = np.asarray(points, float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must be (b_z, frequency) pairs")
    line = _linear_fit(pts[:, 0], pts[:, 1], sigmas)
    sd = np.sqrt(np.diag(line.covariance))
    return NuclearGFit(Estimate(line.slope / MU_N, sd[0] / MU_N), Estimate(line.slope, sd[0]),
                       Estimate(line.intercept, sd[1]), line)


# -- model frequencies --------------------------------------------------------

def _isotropic(sys, g_e_z):
    return sys.with_(g_e=(g_e_z, g_e_z, g_e_z))


def state_energies(sys, fields):
    """Per-field energies keyed by product-state label (batched diagonalisation)."""
    sol = diagonalize_many(sys, fields)
    labels = sys.basis_labels
    out = []
    for k in range(len(fields)):
        states, _ = assign_product_states(sol.vectors[k], labels)
        out.append({st: float(e) for st, e in zip(states, sol.values[k])})
    return out


def model_esr_lines(sys, fields):
    """ESR frequencies (ascending m_I) per field, shape (n_fields, 2I+1)."""
    energies = state_energies(sys, fields)
    mis = sorted({mi for _, mi in sys.basis_labels})
    return np.array([[abs(e[(UP, m)] - e[(DOWN, m)]) for m in mis] for e in energies])


def model_nmr_oriented(sys, fields, labels=NMR_LABELS):
    """Oriented nuclear frequencies per field as a list of {label: MHz}."""
    energies = state_energies(sys, fields)
    pairs = {lab: nmr_label_states(lab, sys.i_nuclear, sys.s_electron) for lab in labels}
    return [{lab: e[hi] - e[lo] for lab, (lo, hi) in pairs.items()} for e in energies]


# -- tip field ----------------------------------------------------------------

def comb_center(lines, weights):
    """Centre of the equally spaced comb closest to ``lines`` in weighted least squares."""
    c = np.asarray(lines, float)
    n = c.size
    if n == 1:
        return float(c[0])
    m = np.arange(n) - (n - 1) / 2
    w = np.asarray(weights, float)
    design = np.column_stack([np.ones(n), m]) * np.sqrt(w)[:, None]
    coef, *_ = np.linalg.lstsq(design, c * np.sqrt(w), rcond=None)
    return float(coef[0])


def comb_weights(peaks):
    """Relative information on each line position of a Fano fit."""
    return np.array([p.amplitude ** 2 * (1 + p.asymmetry_q ** 2) for p in peaks.fano_params])


def _esr_observations(sets):
    obs, sig = [], []
    for s in sets:
        if s.mode == "equal_spacing_boltzmann":
            obs.append([s.center_f0])
            sig.append([s.f0_sigma])
        else:
            obs.append(list(s.centers))
            sig.append(list(s.center_sigmas))
    obs_v = np.concatenate([np.asarray(o, float) for o in obs])
    sig_v = np.concatenate([np.asarray(o, float) for o in sig])
    good = np.isfinite(sig_v) & (sig_v > 0)
    fill = float(np.median(sig_v[good])) if good.any() else 1.0
    return obs_v, np.where(good, sig_v, fill)


def _reduce_like(sets, lines):
    """Model ESR lines reduced to the observables of each peak set."""
    out = []
    for s, row in zip(sets, lines):
        if s.mode == "equal_spacing_boltzmann":
            out.append([comb_center(row, comb_weights(s))])
        else:
            out.append(list(row))
    return np.concatenate([np.asarray(o, float) for o in out])


def model_comb_f0(sets, sys, fields):
    """Model comb centres for each peak set (one per set)."""
    lines = model_esr_lines(sys, fields)
    return np.array([comb_center(row, comb_weights(s)) if s.mode == "equal_spacing_boltzmann"
                     else float(np.mean(row)) for s, row in zip(sets, lines)])


def fit_tip_field(peak_sets, g_e_z, a_z, template=None, field_template=None,
                  phi_bounds_deg=(0.1, 20.0), b_tip_init=None, phi_init_deg=10.0, refine_g=False):
    """Tilted tip field from ESR line positions with g_e,z and A_z held fixed.

    The quadrupole term is dropped at this stage. For peak sets fitted with
    the equal-spacing constraint the comparison is on the comb centre f0,
    with the model lines reduced to a comb centre the same way; free fits
    compare every line. With ``refine_g`` the supplied g_e,z is only a
    starting value and is fitted alongside the tip field.
    """
    sets = list(peak_sets)
    if len({round(s.b_z, 12) for s in sets}) < 2:
        raise ValueError("tip-field fit needs peak sets at two or more fields")
    sys = _isotropic(template or SpinSystem(), g_e_z).with_(a_z=a_z, kappa=0.0)
    ftpl = field_template or FieldConfig()
    lo, hi = np.deg2rad(phi_bounds_deg)
    if b_tip_init is None:
        raise ValueError("b_tip_init is required")
    phi0 = float(np.clip(np.deg2rad(phi_init_deg), lo, hi))

    obs_v, sig_v = _esr_observations(sets)

    def predict(p):
        fields = [ftpl.with_(b_ext=(0.0, 0.0, s.b_z), b_tip=p[0], phi=p[1]) for s in sets]
        trial = _isotropic(sys, p[2]) if refine_g else sys
        return _reduce_like(sets, model_esr_lines(trial, fields))

    init = [b_tip_init, phi0] + ([g_e_z] if refine_g else [])
    bounds = [(0.0, None), (lo, hi)] + ([(0.0, None)] if refine_g else [])
    res = least_squares(lambda p: (predict(p) - obs_v) / sig_v, init, bounds)
    se = res.stderr
    g_fit = Estimate(float(res.params[2]), float(se[2])) if refine_g else Estimate(g_e_z, 0.0)
    at_phi_bound = bool(res.at_bound[1])
    warning = ""
    if at_phi_bound:
        side = "lower" if abs(res.params[1] - lo) < abs(res.params[1] - hi) else "upper"
        warning = f"phi pinned at its {side} bound ({np.rad2deg(res.params[1]):.3g} deg)"
    return TipFit(Estimate(float(res.params[0]), float(se[0])),
                  Estimate(float(res.params[1]), float(se[1])),
                  res.residual_norm, at_phi_bound, warning, g_fit)


# -- NMR ----------------------------------------------------------------------

def assign_labels(centers, predicted, gate=5.0):
    """Label measured centres by minimum total |distance| to predicted lines.

    A centre further than ``gate`` MHz from its best available prediction
    stays unlabelled (None) rather than displacing a correct match.
    """
    tags = list(predicted)
    c = np.asarray(centers, float)
    if c.size == 0:
        return (), 0.0
    cost = np.abs(c[:, None] - np.abs([predicted[t] for t in tags])[None, :])
    dummy = np.full((c.size, c.size), float(gate))
    rows, cols = linear_sum_assignment(np.hstack([np.minimum(cost, 10 * gate), dummy]))
    out = [None] * c.size
    total = 0.0
    for r, col in zip(rows, cols):
        if col < len(tags) and cost[r, col] <= gate:
            out[r] = tags[col]
            total += cost[r, col]
        else:
            total += gate
    return tuple(out), float(total)


def fit_nmr_peaks(spec, n_peaks=4, system=None, field=None, fwhm_guess=4.0, min_significance=0.0,
                  center_guesses=None):
    """Sum of signed Lorentzians plus a linear background.

    Without ``center_guesses`` lines are added one at a time at the largest
    remaining feature of the residual. Labels come from proximity to the
    model lines of ``system`` in ``field`` when both are given, otherwise
    I, II, ... by ascending frequency. With ``min_significance`` > 0, line
    addition stops once a new line's height is below that many standard
    errors, and any such line is dropped from the returned set.
    """
    n = int(n_peaks)
    if not 1 <= n <= 4:
        raise ValueError("n_peaks must lie in 1..4")
    f = spec.frequencies
    y = spec.signal
    if f.size < 3 * n + 3:
        raise ValueError("spectrum has too few points for the requested fit")
    if np.ptp(y) == 0:
        raise FitNotConverged("constant spectrum: nothing to fit")
    pivot = 0.5 * (f[0] + f[-1])
    sigma = noise_estimate(y)
    scale = _weights_scale(y, sigma)
    step = float(np.median(np.diff(f)))
    peak_bounds = [(f[0], f[-1]), (step / 2, 5 * fwhm_guess), (None, None)]

    def model(p):
        out = p[-2] + p[-1] * (f - pivot)
        for k in range((len(p) - 2) // 3):
            c, w, h = p[3 * k:3 * k + 3]
            out = out + lorentzian(f, LorentzianParams(c, w, h))
        return out

    def fit(peaks, bg):
        init = [v for pk in peaks for v in pk] + list(bg)
        bounds = peak_bounds * len(peaks) + [(None, None), (None, None)]
        return least_squares(lambda p: (model(p) - y) / scale, init, bounds)

    bg = [robust_baseline(y), 0.0]
    if center_guesses is not None:
        c0 = [float(c) for c in center_guesses][:n]
        if len(c0) < n:
            raise ValueError("fewer centre guesses than peaks")
        res = fit([(c, fwhm_guess, float(np.interp(c, f, y)) - bg[0]) for c in c0], bg)
    else:
        # forward selection: each new line goes at the largest feature left
        # in the residual of the current fit
        peaks, res = [], None
        for _ in range(n):
            resid = y - (model(res.params) if res is not None else bg[0])
            sm = _smooth(resid, f, fwhm_guess)
            for c in (pk[0] for pk in peaks):
                sm = np.where(np.abs(f - c) < fwhm_guess / 2, 0.0, sm)
            k = int(np.argmax(np.abs(sm)))
            trial = fit(peaks + [(float(f[k]), fwhm_guess, float(resid[k]))], bg)
            if min_significance > 0 and res is not None:
                h, hs = trial.params[-3], trial.stderr[-3]
                if not (trial.converged and abs(h) >= min_significance * hs):
                    break  # nothing significant left
            res = trial
            peaks = [tuple(res.params[3 * j:3 * j + 3]) for j in range(len(peaks) + 1)]
            bg = list(res.params[-2:])
        n = len(peaks)
    p, se = res.params, res.stderr
    keep = []
    for k in range(n):
        h, hs = p[3 * k + 2], se[3 * k + 2]
        if min_significance > 0 and not abs(h) >= min_significance * hs:
            continue
        keep.append(k)
    keep.sort(key=lambda k: p[3 * k])
    centers = np.array([p[3 * k] for k in keep])
    unc = np.array([se[3 * k] for k in keep])
    params = tuple(LorentzianParams(float(p[3 * k]), float(p[3 * k + 1]), float(p[3 * k + 2]))
                   for k in keep)
    b_z = float(spec.meta.get("b_z", field.b_z if field is not None else float("nan")))
    if system is not None and field is not None and centers.size:
        pred = model_nmr_oriented(system, [field])[0]
        labels, _ = assign_labels(centers, pred)
    else:
        labels = tuple(ROMAN[k] for k in range(centers.size))
    rms = float(np.sqrt(np.mean((model(p) - y) ** 2)))
    peaks = NmrPeakSet(b_z, centers, labels, params, unc, rms,
                       (float(p[-2]), float(p[-1])), sigma, res.converged)
    if not res.converged:
        raise FitNotConverged(f"NMR fit did not converge: {res.message}", peaks)
    return peaks


def fit_hyperfine_quadrupole(nmr_sets, g_e_z, b_tip, phi, g_n=None, template=None,
                             field_template=None, a_z_init=130.0, kappa_init=-50.0):
    """A_z and kappa from labelled nuclear line positions (eta held at 0)."""
    sets = [s for s in nmr_sets if s.by_label()]
    if not sets or max(len(s.by_label()) for s in sets) < 2:
        raise RankDeficiencyError("need at least one field with two or more labelled transitions")
    sys = _isotropic(template or SpinSystem(), g_e_z).with_(eta=0.0)
    if g_n is not None:
        sys = sys.with_(g_n=g_n)
    ftpl = (field_template or FieldConfig()).with_(b_tip=b_tip, phi=phi)
    fields = [ftpl.with_(b_ext=(0.0, 0.0, s.b_z)) for s in sets]
    obs, sig, idx = [], [], []
    for k, s in enumerate(sets):
        for lab, (c, u) in s.by_label().items():
            obs.append(c)
            sig.append(u)
            idx.append((k, lab))
    obs = np.asarray(obs, float)
    sig = np.asarray(sig, float)
    good = np.isfinite(sig) & (sig > 0)
    fill = float(np.median(sig[good])) if good.any() else 1.0
    sig = np.where(good, sig, fill)
    labels_used = sorted({lab for _, lab in idx}, key=ROMAN.index)

    def residual(p):
        trial = sys.with_(a_z=p[0], kappa=p[1])
        pred = model_nmr_oriented(trial, fields, labels_used)
        return (np.array([abs(pred[k][lab]) for k, lab in idx]) - obs) / sig

    res = least_squares(residual, [a_z_init, kappa_init])
    se = res.stderr
    if not res.converged:
        raise FitNotConverged(f"hyperfine fit did not converge: {res.message}", res)
    return HyperfineFit(Estimate(float(res.params[0]), float(se[0])),
                        Estimate(float(res.params[1]), float(se[1])),
                        res.residual_norm, len(obs))


def scan_kappa(nmr_sets, sys, fields, sign=-1.0, max_abs=150.0, step=2.0):
    """Coarse kappa with the given sign that best explains the observed line set."""
    best = (np.inf, 0.0)
    for mag in np.arange(0.0, max_abs + step / 2, step):
        kappa = float(np.copysign(mag, sign))
        preds = model_nmr_oriented(sys.with_(kappa=kappa), fields)
        cost = 0.0
        for s, pred in zip(nmr_sets, preds):
            if len(s.centers):
                cost += assign_labels(s.centers, pred)[1]
        if cost < best[0]:
            best = (cost, kappa)
    return best[1]


# -- recursive calibration ----------------------------------------------------

def _b_z_of(spec, what):
    try:
        return float(spec.meta["b_z"])
    except (KeyError, TypeError, ValueError):
        raise ValueError(f"{what} spectrum lacks b_z metadata") from None


def _literature(lit):
    defaults = {"a_z_init": 130.0, "g_n": 0.315, "kappa_init": -50.0}
    lit = dict(lit or {})
    unknown = set(lit) - set(defaults)
    if unknown:
        raise ValueError(f"unknown literature keys: {sorted(unknown)}")
    defaults.update(lit)
    return defaults


def _max_rel_change(new, old):
    out = 0.0
    for k, v in new.items():
        ref = max(abs(old[k]), 1e-12)
        out = max(out, abs(v - old[k]) / ref)
    return out


def recursive_calibration(esr_data, nmr_data, literature=None, template=None, field_template=None,
                          esr_mode="equal_spacing_boltzmann", tol=1e-4, max_iter=10,
                          phi_bounds_deg=(0.1, 20.0), phi_init_deg=10.0, nmr_peaks=4,
                          min_nmr_significance=3.0):
    """Full calibration from ESR and ENDOR spectra (each carrying b_z metadata).

    Each outer iteration refits the Zeeman line, the tip field and the
    hyperfine/quadrupole pair. From the second iteration on, the comb
    centres entering the Zeeman line are first corrected by the current
    model's departure from a linear field law (second-order hyperfine
    shifts, in-plane tip field), so the linear fit and the full model agree
    at convergence.

    Returns a CalibrationResult. Without ENDOR data the ESR stages still run
    and the result is flagged partial. Stage failures raise
    CalibrationStageError carrying the partial result.
    """
    lit = _literature(literature)
    tpl = (template or SpinSystem()).with_(g_n=lit["g_n"], eta=0.0)
    ftpl = field_template or FieldConfig()
    n = int(round(2 * tpl.i_nuclear + 1))
    result = CalibrationResult(i_nuclear=tpl.i_nuclear, g_n=Estimate(lit["g_n"]))
    if not esr_data:
        raise CalibrationStageError("esr_peaks", ValueError("no ESR spectra"), result)

    def stage(name, fn):
        try:
            return fn()
        except CalibrationStageError:
            raise
        except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
            result.partial = True
            raise CalibrationStageError(name, exc, result) from exc

    b_esr = stage("esr_peaks", lambda: [_b_z_of(s, "ESR") for s in esr_data])
    esr_sets = stage("esr_peaks", lambda: [
        fit_esr_peaks(s, n, esr_mode, spacing_guess=lit["a_z_init"]) for s in esr_data])
    for s, b in zip(esr_sets, b_esr):
        s.b_z = b
    result.stage_residuals["esr_peaks"] = [
        {"b_z": s.b_z, "rms": s.fit_quality, "noise": s.noise, "f0": s.center_f0} for s in esr_sets]
    f0 = np.array([s.center_f0 for s in esr_sets])
    sig = np.array([s.f0_sigma for s in esr_sets])
    sig = sig if np.all(np.isfinite(sig)) and np.all(sig > 0) else None

    def zeeman(correction):
        zee = fit_f0_linear(np.column_stack([b_esr, f0 - correction]), sig)
        result.g_e_z, result.b_tip_z = zee.g_e_z, zee.b_tip_z
        line = zee.line
        result.stage_residuals["f0_linear"] = [
            {"b_z": b, "f0": y, "correction": c, "residual": y - c - (line.slope * b + line.intercept)}
            for b, y, c in zip(b_esr, f0, correction)]
        return zee

    zee = stage("f0_linear", lambda: zeeman(np.zeros_like(f0)))

    nmr_sets = []
    if nmr_data:
        b_nmr = stage("nmr_peaks", lambda: [_b_z_of(s, "NMR") for s in nmr_data])
        nmr_sets = stage("nmr_peaks", lambda: [
            fit_nmr_peaks(s, nmr_peaks, min_significance=min_nmr_significance) for s in nmr_data])
        for s, b in zip(nmr_sets, b_nmr):
            s.b_z = b
        result.stage_residuals["nmr_peaks"] = [
            {"b_z": s.b_z, "rms": s.fit_quality, "noise": s.noise, "n_peaks": len(s.centers)}
            for s in nmr_sets]

    state = {"g_e_z": zee.g_e_z.value, "b_tip": zee.b_tip_z.value,
             "phi": float(np.deg2rad(phi_init_deg)), "a_z": lit["a_z_init"],
             "kappa": lit["kappa_init"]}
    if nmr_sets:
        fields0 = [ftpl.with_(b_ext=(0.0, 0.0, s.b_z), b_tip=state["b_tip"], phi=state["phi"])
                   for s in nmr_sets]
        base_sys = _isotropic(tpl, state["g_e_z"]).with_(a_z=lit["a_z_init"])
        state["kappa"] = stage("kappa_scan", lambda: scan_kappa(
            nmr_sets, base_sys, fields0, sign=np.sign(lit["kappa_init"]) or -1.0))

    changes = []
    for it in range(1, max_iter + 1):
        new = dict(state)
        if it > 1:
            cur = _isotropic(tpl, state["g_e_z"]).with_(a_z=state["a_z"], kappa=0.0)
            fields = [ftpl.with_(b_ext=(0.0, 0.0, b), b_tip=state["b_tip"], phi=state["phi"])
                      for b in b_esr]
            linear = MU_B * state["g_e_z"] * (np.asarray(b_esr) + state["b_tip"] * np.cos(state["phi"]))
            correction = stage("f0_linear", lambda: model_comb_f0(esr_sets, cur, fields) - linear)
            stage("f0_linear", lambda: zeeman(correction))
        tip = stage("tip_field", lambda: fit_tip_field(
            esr_sets, state["g_e_z"], state["a_z"], tpl, ftpl, phi_bounds_deg, state["b_tip"],
            np.rad2deg(state["phi"]), refine_g=True))
        result.b_tip, result.phi = tip.b_tip, tip.phi
        new.update(g_e_z=tip.g_e_z.value, b_tip=tip.b_tip.value, phi=tip.phi.value)
        entry = {"iteration": it, "tip_residual": tip.residual_norm}

        if nmr_sets:
            cur = _isotropic(tpl, new["g_e_z"]).with_(a_z=state["a_z"], kappa=state["kappa"])
            fields = [ftpl.with_(b_ext=(0.0, 0.0, s.b_z), b_tip=new["b_tip"], phi=new["phi"])
                      for s in nmr_sets]
            preds = model_nmr_oriented(cur, fields)
            nmr_sets = [s.relabel(assign_labels(s.centers, p)[0]) if len(s.centers) else s
                        for s, p in zip(nmr_sets, preds)]
            hq = stage("hyperfine_quadrupole", lambda: fit_hyperfine_quadrupole(
                nmr_sets, new["g_e_z"], new["b_tip"], new["phi"], lit["g_n"], tpl, ftpl,
                state["a_z"], state["kappa"]))
            new.update(a_z=hq.a_z.value, kappa=hq.kappa.value)
            result.a_z, result.kappa = hq.a_z, hq.kappa
            entry["hyperfine_residual"] = hq.residual_norm

        change = _max_rel_change(new, state)
        changes.append(change)
        entry.update(new, max_rel_change=change)
        result.history.append(entry)
        state = new
        result.iterations = it
        if change < tol and it > 1:
            result.converged = True
            break
        if len(changes) >= 4 and changes[-1] >= changes[-2] >= changes[-3]:
            result.warnings.append("parameter updates stopped shrinking; iteration abandoned")
            break

    if tip.warning:
        result.warnings.append(tip.warning)
    if not nmr_sets:
        result.partial = True
        result.converged = False
        result.warnings.append("no NMR data: hyperfine and quadrupole not fitted")
        return result
    result.stage_residuals["labels"] = [
        {"b_z": s.b_z, "labels": list(s.labels), "centers": s.centers} for s in nmr_sets]
    result.g_n = _apparent_g_n(nmr_sets, _isotropic(tpl, state["g_e_z"]).with_(
        a_z=state["a_z"], kappa=state["kappa"]), ftpl, state, lit["g_n"])
    return result


def _apparent_g_n(nmr_sets, sys, ftpl, state, fallback):
    """Slope of transition I against field, with its sign taken from the model."""
    pts, sig = [], []
    for s in nmr_sets:
        table = s.by_label()
        if "I" not in table:
            continue
        fld = ftpl.with_(b_ext=(0.0, 0.0, s.b_z), b_tip=state["b_tip"], phi=state["phi"])
        sign = np.sign(model_nmr_oriented(sys, [fld], ("I",))[0]["I"]) or 1.0
        c, u = table["I"]
        pts.append((s.b_z, sign * c))
        sig.append(u)
    if len({round(b, 12) for b, _ in pts}) < 2:
        return Estimate(fallback)
    ok = all(np.isfinite(sig)) and all(v > 0 for v in sig)
    return fit_nuclear_g(pts, sig if ok else None).g_n
