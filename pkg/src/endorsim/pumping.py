"""Classical rate model over the (m_s, m_I) product states.

Electron relaxation keeps m_I, hyperfine flip-flops move population between
|up, m> and |down, m+1> with a bias toward m_I = -I, and resonant ESR/NMR
drives add symmetric rates between the driven pair. Steady states are the
normalised null vector of the generator, found by subtraction-free
(Grassmann-Taqqu-Heyman) elimination.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy.sparse.csgraph import connected_components

from .errors import DegenerateSteadyStateError
from .spinmodel import DOWN, UP, diagonalize, hybridization_coefficients

LEAK_RATE = 1e-12


@dataclass(frozen=True)
class PumpConfig:
    """Rates in 1/s. Pairs are ((m_s, m_I), (m_s, m_I)) product-state labels.

    ``esr_pair`` defaults to the m_I = -I electron line.
    """

    gamma_e_down: float = 1e6
    gamma_e_up: float = 1e5
    gamma_ff: float = 1e4
    ff_asymmetry: float = 0.5
    omega_esr: float = 0.0
    esr_pair: tuple = None
    omega_nmr: float = 0.0
    nmr_pair: tuple = None

    def __post_init__(self):
        for name in ("gamma_e_down", "gamma_e_up", "gamma_ff", "omega_esr", "omega_nmr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0.0 <= self.ff_asymmetry <= 1.0:
            raise ValueError("ff_asymmetry must lie in [0, 1]")

    def with_(self, **changes):
        return replace(self, **changes)


@dataclass(frozen=True)
class RateMatrix:
    """Generator with ``generator[i, j]`` the rate from state j to state i."""

    generator: np.ndarray
    labels: tuple


@dataclass(frozen=True)
class Populations:
    probabilities: np.ndarray
    labels: tuple

    def __getitem__(self, state):
        return float(self.probabilities[self.labels.index(tuple(state))])

    def marginal(self, m_i):
        """Total population with nuclear projection ``m_i``."""
        return float(sum(p for p, (_, mi) in zip(self.probabilities, self.labels) if mi == m_i))

    def nuclear_marginals(self):
        """Marginals ordered by ascending m_I."""
        mis = sorted({mi for _, mi in self.labels})
        return np.array([self.marginal(m) for m in mis])

    def manifold(self, m_s):
        return float(sum(p for p, (ms, _) in zip(self.probabilities, self.labels) if ms == m_s))


def default_esr_pair(i_nuclear):
    return ((DOWN, -i_nuclear), (UP, -i_nuclear))


def _add(g, rate, src, dst):
    g[dst, src] += rate
    g[src, src] -= rate


def _index(labels, state):
    state = (float(state[0]), float(state[1]))
    try:
        return labels.index(state)
    except ValueError:
        raise ValueError(f"state {state} is not a basis state") from None


def drive_matrix(labels, pair, rate=1.0):
    """Symmetric two-state drive as a generator contribution."""
    g = np.zeros((len(labels), len(labels)))
    if pair is None or rate == 0:
        return g
    a, b = (_index(labels, st) for st in pair)
    if a == b:
        raise ValueError("drive pair must connect two different states")
    _add(g, rate, a, b)
    _add(g, rate, b, a)
    return g


def build_rate_matrix(sys, field, cfg, extra_drives=(), sol=None):
    """Assemble the generator for a system in a field.

    Flip-flop rates between |down, m+1> and |up, m> are ``gamma_ff`` times
    the squared hybridization coefficient of that pair, multiplied by
    (1 + a) toward lower m_I and (1 - a) away from it, a = ff_asymmetry.

    ``extra_drives`` is an iterable of (pair, rate) added symmetrically.
    """
    labels = sys.basis_labels
    n = len(labels)
    g = np.zeros((n, n))
    if sys.s_electron != 0.5:
        raise ValueError("the pumping model requires S = 1/2")
    mis = sorted({mi for _, mi in labels})
    for m in mis:
        up, down = _index(labels, (UP, m)), _index(labels, (DOWN, m))
        if cfg.gamma_e_down:
            _add(g, cfg.gamma_e_down, up, down)
        if cfg.gamma_e_up:
            _add(g, cfg.gamma_e_up, down, up)
    if cfg.gamma_ff and len(mis) > 1:
        coeff = hybridization_coefficients(sys, field, sol if sol is not None else diagonalize(sys, field))
        a = cfg.ff_asymmetry
        for m in mis[:-1]:
            rate = cfg.gamma_ff * coeff[m + 1] ** 2
            hi, lo = _index(labels, (DOWN, m + 1)), _index(labels, (UP, m))
            _add(g, rate * (1 + a), hi, lo)
            _add(g, rate * (1 - a), lo, hi)
    esr_pair = cfg.esr_pair if cfg.esr_pair is not None else default_esr_pair(sys.i_nuclear)
    g += drive_matrix(labels, esr_pair, cfg.omega_esr)
    g += drive_matrix(labels, cfg.nmr_pair, cfg.omega_nmr)
    for pair, rate in extra_drives:
        if rate < 0:
            raise ValueError("drive rates must be nonnegative")
        g += drive_matrix(labels, pair, rate)
    return RateMatrix(g, labels)


def closed_classes(generator):
    """Strongly connected components with no outgoing edges."""
    g = np.asarray(generator)
    adj = (g.T > 0) & ~np.eye(g.shape[0], dtype=bool)  # adj[j, i]: edge j -> i
    ncomp, comp = connected_components(adj, directed=True, connection="strong")
    leaves = np.ones(ncomp, dtype=bool)
    src, dst = np.nonzero(adj)
    for s, d in zip(src, dst):
        if comp[s] != comp[d]:
            leaves[comp[s]] = False
    return [np.flatnonzero(comp == c) for c in range(ncomp) if leaves[c]]


def _gth(rates):
    """Grassmann-Taqqu-Heyman elimination on a stack of rate matrices.

    ``rates[b, i, j]`` is the rate from i to j. The elimination only adds
    and divides nonnegative numbers, so small populations keep full relative
    accuracy however widely the rates are spread. Returns the unnormalised
    stationary vectors and the elimination pivots.
    """
    r = rates.copy()
    nb, n, _ = r.shape
    r[:, np.arange(n), np.arange(n)] = 0.0
    piv = np.ones((nb, n))
    for k in range(n - 1, 0, -1):
        s = r[:, k, :k].sum(axis=1)
        piv[:, k] = s
        safe = np.where(s > 0, s, 1.0)
        r[:, :k, :k] += r[:, :k, k, None] * r[:, None, k, :k] / safe[:, None, None]
    p = np.zeros((nb, n))
    p[:, 0] = 1.0
    for k in range(1, n):
        p[:, k] = np.einsum("bi,bi->b", p[:, :k], r[:, :k, k]) / np.where(piv[:, k] > 0, piv[:, k], 1.0)
    return p, piv


def stationary(generators):
    """Normalised null vectors of a stack of generators with unique steady states.

    State 0 is used as the elimination root; a generator in which state 0 is
    transient is re-solved with a member of its closed class as the root.
    """
    g = np.asarray(generators, dtype=float)
    single = g.ndim == 2
    g = g[None] if single else g
    scale = np.max(np.abs(g), axis=(1, 2), keepdims=True)
    g = g / np.where(scale > 0, scale, 1.0)
    p, piv = _gth(np.swapaxes(g, 1, 2))
    for b in np.flatnonzero(np.any(piv <= 0, axis=1)):
        classes = closed_classes(g[b])
        if len(classes) != 1:
            raise DegenerateSteadyStateError(f"generator {b} has {len(classes)} closed classes")
        n = g.shape[1]
        root = int(classes[0][0])
        order = np.r_[root, np.delete(np.arange(n), root)]
        sub = g[b][np.ix_(order, order)]
        pb, _ = _gth(sub.T[None])
        p[b, order] = pb[0]
    if not np.all(np.isfinite(p)):
        raise DegenerateSteadyStateError("rates span too many decades for a finite steady state")
    p /= p.sum(axis=1, keepdims=True)
    return p[0] if single else p


def steady_state(m, leak=False):
    """Steady-state populations of a rate matrix.

    Raises DegenerateSteadyStateError when the rate graph has several closed
    classes, unless ``leak`` is set, in which case a uniform 1e-12/s rate
    between all states makes the steady state unique.
    """
    g = np.array(m.generator, dtype=float)
    classes = closed_classes(g)
    if len(classes) > 1:
        if not leak:
            comps = [[m.labels[k] for k in c] for c in classes]
            raise DegenerateSteadyStateError(
                f"rate graph has {len(classes)} closed classes: {comps}", comps)
        n = g.shape[0]
        g = g + LEAK_RATE * (np.ones((n, n)) - n * np.eye(n))
    p = stationary(g)
    return Populations(p, tuple(m.labels))


def endor_signal(pop, probed_mi):
    """Readout signal: total population of the probed nuclear sublevel."""
    return pop.marginal(probed_mi)


def esr_pair_difference(pop, pair):
    """Alternative readout: population difference across a driven ESR pair."""
    return pop[pair[0]] - pop[pair[1]]


def population_ratio_vs_drive(sys, field, cfg, omega_esr_grid, probed_mi=None):
    """P_up / P_down of the probed m_I as a function of ESR drive rate.

    Returns an array of rows (omega_esr, ratio).
    """
    grid = np.asarray(omega_esr_grid, dtype=float).ravel()
    if np.any(grid < 0) or np.any(np.diff(grid) < 0):
        raise ValueError("omega_esr grid must be ascending and nonnegative")
    pair = cfg.esr_pair if cfg.esr_pair is not None else default_esr_pair(sys.i_nuclear)
    probed = pair[0][1] if probed_mi is None else probed_mi
    base = build_rate_matrix(sys, field, cfg.with_(omega_esr=0.0))
    drive = drive_matrix(base.labels, pair, 1.0)
    weakest = base.generator + (drive if grid.size and grid.min() > 0 else 0.0)
    if len(closed_classes(weakest)) > 1:
        raise DegenerateSteadyStateError("rate graph is not connected")
    pops = stationary(base.generator[None] + grid[:, None, None] * drive[None])
    up = base.labels.index((UP, probed))
    down = base.labels.index((DOWN, probed))
    ratio = pops[:, up] / pops[:, down]
    return np.column_stack([grid, ratio])
