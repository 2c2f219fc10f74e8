"""Effective spin Hamiltonian of an electron spin coupled to a nuclear spin,
with transition catalogs, field sweeps and hybridization coefficients.

Basis ordering is m_s outer, m_I inner, both descending: index 0 is
|+S, +I>, the last index is |-S, -I>.
"""

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DegenerateSpectrumError, HybridizationTooStrongError
from .numerics import MU_B, MU_N, angular_momentum_ops, check_spin, eigh, kron

UP, DOWN = 0.5, -0.5

ROMAN = ("I", "II", "III", "IV", "V", "VI", "VII", "VIII", "IX", "X",
         "XI", "XII", "XIII", "XIV", "XV", "XVI", "XVII", "XVIII", "XIX", "XX")


@dataclass(frozen=True)
class SpinSystem:
    """Physical parameters of the coupled electron/nuclear spin pair.

    g_e and a_hyperfine are the diagonals (x, y, z) of the electron g-tensor
    and hyperfine tensor; a_hyperfine and kappa are in MHz.
    """

    s_electron: float = 0.5
    i_nuclear: float = 2.5
    g_e: tuple = (0.56, 0.56, 0.56)
    g_n: float = 0.315
    a_hyperfine: tuple = (25.0, 25.0, 132.1)
    kappa: float = -56.7
    eta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "s_electron", check_spin(self.s_electron))
        object.__setattr__(self, "i_nuclear", check_spin(self.i_nuclear))
        object.__setattr__(self, "g_e", _vec3(self.g_e, "g_e"))
        object.__setattr__(self, "a_hyperfine", _vec3(self.a_hyperfine, "a_hyperfine"))
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")

    @classmethod
    def axial(cls, a_z, a_perp=None, g_e_z=0.56, g_e_perp=None, **kw):
        """Axial system; in-plane hyperfine and g default to the z values."""
        a_perp = a_z if a_perp is None else a_perp
        g_e_perp = g_e_z if g_e_perp is None else g_e_perp
        return cls(g_e=(g_e_perp, g_e_perp, g_e_z), a_hyperfine=(a_perp, a_perp, a_z), **kw)

    @property
    def dim(self):
        return int(round((2 * self.s_electron + 1) * (2 * self.i_nuclear + 1)))

    @property
    def basis_labels(self):
        return product_labels(self.s_electron, self.i_nuclear)

    @property
    def quadrupole_q(self):
        """kappa / (2I(2I-1)), the prefactor of the quadrupole tensor."""
        i = self.i_nuclear
        if i < 1:
            return 0.0
        return self.kappa / (2 * i * (2 * i - 1))

    def with_(self, **changes):
        if "g_e_z" in changes:
            gx, gy, _ = self.g_e
            changes["g_e"] = (gx, gy, changes.pop("g_e_z"))
        if "a_z" in changes:
            ax, ay, _ = self.a_hyperfine
            changes["a_hyperfine"] = (ax, ay, changes.pop("a_z"))
        return replace(self, **changes)


@dataclass(frozen=True)
class FieldConfig:
    """External field (T) plus the effective tip field.

    phi is the polar angle of the tip field from z, theta its azimuth
    (radians). The tip field acts on the nucleus only if
    ``tip_couples_nucleus`` is set.
    """

    b_ext: tuple = (0.0, 0.0, 0.45)
    b_tip: float = 0.0679
    phi: float = np.deg2rad(5.0)
    theta: float = 0.0
    tip_couples_nucleus: bool = False

    def __post_init__(self):
        object.__setattr__(self, "b_ext", _vec3(self.b_ext, "b_ext"))
        if self.b_tip < 0:
            raise ValueError(f"b_tip must be nonnegative, got {self.b_tip}")
        if not 0.0 <= self.phi <= np.pi:
            raise ValueError(f"phi must lie in [0, pi], got {self.phi}")

    @property
    def b_z(self):
        return self.b_ext[2]

    @property
    def tip_vector(self):
        return self.b_tip * np.array([
            np.sin(self.phi) * np.cos(self.theta),
            np.sin(self.phi) * np.sin(self.theta),
            np.cos(self.phi),
        ])

    def with_bz(self, b_z):
        bx, by, _ = self.b_ext
        return replace(self, b_ext=(bx, by, float(b_z)))

    def with_(self, **changes):
        return replace(self, **changes)


@dataclass(frozen=True)
class TransitionLine:
    from_index: int
    to_index: int
    frequency: float
    weight: float
    delta_ms: float
    delta_mi: float
    label: str = None
    from_state: tuple = None
    to_state: tuple = None

    @property
    def oriented_frequency(self):
        """Energy change along increasing m_I (nuclear lines) or m_s (electron lines)."""
        d = self.delta_mi if abs(self.delta_mi) > abs(self.delta_ms) else self.delta_ms
        return float(np.copysign(self.frequency, d))

    @property
    def m_i(self):
        """Dominant m_I of the lower-energy state."""
        return None if self.from_state is None else self.from_state[1]


@dataclass(frozen=True)
class HybridizationReport:
    b_z: float
    pair: tuple
    coefficient: float


def _vec3(x, name):
    arr = np.asarray(x, dtype=float).ravel()
    if arr.size == 1:
        arr = np.repeat(arr, 3)
    if arr.size != 3:
        raise ValueError(f"{name} must be a scalar or 3-vector")
    return tuple(float(v) for v in arr)


@lru_cache(maxsize=None)
def product_labels(s, i):
    ms = [s - k for k in range(int(round(2 * s)) + 1)]
    mi = [i - k for k in range(int(round(2 * i)) + 1)]
    return tuple((a, b) for a in ms for b in mi)


@lru_cache(maxsize=None)
def coupled_operators(s, i):
    """(S_x, S_y, S_z, I_x, I_y, I_z) on the product space, read-only."""
    so = angular_momentum_ops(s)
    io = angular_momentum_ops(i)
    one_s = np.eye(so.dim)
    one_i = np.eye(io.dim)
    ops = tuple(kron(m, one_i) for m in (so.sx, so.sy, so.sz)) + \
        tuple(kron(one_s, m) for m in (io.sx, io.sy, io.sz))
    for op in ops:
        op.setflags(write=False)
    return ops


def build_hamiltonian(sys, field):
    """Hamiltonian matrix in MHz for the given system and field."""
    if sys.i_nuclear < 1 and sys.kappa != 0:
        raise ValueError("quadrupole coupling requires nuclear spin I >= 1")
    sx, sy, sz, ix, iy, iz = coupled_operators(sys.s_electron, sys.i_nuclear)
    s_ops, i_ops = (sx, sy, sz), (ix, iy, iz)
    b = np.asarray(field.b_ext, float)
    b_e = b + field.tip_vector
    b_n = b_e if field.tip_couples_nucleus else b
    if sys.i_nuclear >= 1:
        eta = sys.eta
        quad = sys.quadrupole_q * np.array([-(1 - eta) / 2, -(1 + eta) / 2, 1.0])
    else:
        quad = np.zeros(3)
    h = np.zeros((sys.dim, sys.dim), dtype=complex)
    for k in range(3):
        h += MU_B * sys.g_e[k] * b_e[k] * s_ops[k]
        h += MU_N * sys.g_n * b_n[k] * i_ops[k]
        h += sys.a_hyperfine[k] * (s_ops[k] @ i_ops[k])
        h += quad[k] * (i_ops[k] @ i_ops[k])
    return h


def diagonalize(sys, field):
    return eigh(build_hamiltonian(sys, field), basis_labels=sys.basis_labels)


def diagonalize_many(sys, fields):
    """Batched diagonalisation for a list of field configurations."""
    hs = np.stack([build_hamiltonian(sys, f) for f in fields])
    return eigh(hs, basis_labels=sys.basis_labels)


def _spins_from_labels(labels):
    s = max(abs(ms) for ms, _ in labels)
    i = max(abs(mi) for _, mi in labels)
    return s, i


def assign_product_states(vectors, labels):
    """Match eigenvectors one-to-one onto product states.

    The assignment maximises the total squared projection, so each
    eigenstate receives a distinct (m_s, m_I) label even close to
    anticrossings. Returns the label list and each state's projection.
    """
    proj = np.abs(vectors) ** 2  # rows: product states, cols: eigenstates
    rows, cols = linear_sum_assignment(-proj)
    out = [None] * len(cols)
    weight = np.zeros(len(cols))
    for r, c in zip(rows, cols):
        out[c] = labels[r]
        weight[c] = proj[r, c]
    return out, weight


def roman(n):
    return ROMAN[n - 1] if 0 < n <= len(ROMAN) else str(n)


def nmr_label(state_a, state_b, i_nuclear):
    """Roman-numeral tag for a single-quantum nuclear transition.

    Odd numerals belong to the m_s = -1/2 manifold and even numerals to
    m_s = +1/2, counted upward from the m_I = -I pair.
    """
    (msa, mia), (msb, mib) = state_a, state_b
    if msa != msb or abs(abs(mia - mib) - 1) > 1e-9:
        return None
    lower = min(mia, mib)
    k = int(round(lower + i_nuclear))
    offset = 1 if msa > 0 else 0
    return roman(2 * k + 1 + offset)


def nmr_label_states(label, i_nuclear, s_electron=0.5):
    """Inverse of :func:`nmr_label`: the (lower, upper) product states."""
    n = ROMAN.index(label) + 1 if label in ROMAN else int(label)
    k, odd = divmod(n - 1, 2)
    ms = s_electron if odd else -s_electron
    lower = -i_nuclear + k
    if lower + 1 > i_nuclear + 1e-9:
        raise ValueError(f"label {label} out of range for I={i_nuclear}")
    return (ms, lower), (ms, lower + 1)


def _expectations(sol):
    s, i = _spins_from_labels(sol.basis_labels)
    ops = coupled_operators(s, i)
    v = sol.vectors
    ez_s = np.real(np.einsum("ik,ij,jk->k", v.conj(), ops[2], v))
    ez_i = np.real(np.einsum("ik,ij,jk->k", v.conj(), ops[5], v))
    return ez_s, ez_i


def transition_catalog(sol, channel="all", weight_floor=1e-6):
    """Enumerate eigenstate pairs with their drive weights.

    The ESR weight is |<f|S_x|i>|^2 and the NMR weight |<f|I_x|i>|^2;
    ``channel='all'`` sums both. Lines are returned in ascending frequency.
    """
    if channel not in ("esr", "nmr", "all"):
        raise ValueError(f"unknown channel {channel!r}")
    labels = sol.basis_labels
    s, i = _spins_from_labels(labels)
    ops = coupled_operators(s, i)
    v = sol.vectors
    w_esr = np.abs(v.conj().T @ ops[0] @ v) ** 2
    w_nmr = np.abs(v.conj().T @ ops[3] @ v) ** 2
    weights = {"esr": w_esr, "nmr": w_nmr, "all": w_esr + w_nmr}[channel]
    states, _ = assign_product_states(v, labels)
    ez_s, ez_i = _expectations(sol)
    e = sol.values
    lines = []
    n = len(e)
    for a in range(n):
        for b in range(a + 1, n):
            w = float(weights[b, a])
            if w < weight_floor:
                continue
            label = nmr_label(states[a], states[b], i) if channel != "esr" else None
            lines.append(TransitionLine(
                a, b, float(e[b] - e[a]), w,
                float(ez_s[b] - ez_s[a]), float(ez_i[b] - ez_i[a]),
                label, states[a], states[b],
            ))
    lines.sort(key=lambda line: (line.frequency, line.from_index))
    return lines


def esr_frequencies(sys, field, sol=None, weight_floor=1e-6):
    """The 2I+1 allowed electron-spin lines, ascending in frequency."""
    if sys.s_electron != 0.5:
        raise ValueError("esr_frequencies requires S = 1/2")
    sol = diagonalize(sys, field) if sol is None else sol
    states, _ = assign_product_states(sol.vectors, sol.basis_labels)
    index = {st: k for k, st in enumerate(states)}
    ops = coupled_operators(sys.s_electron, sys.i_nuclear)
    ez_s, ez_i = _expectations(sol)
    e = sol.values
    lines = []
    mis = sorted({mi for _, mi in states})
    for mi in mis:
        a, b = index[(DOWN, mi)], index[(UP, mi)]
        lo, hi = (a, b) if e[a] <= e[b] else (b, a)
        w = float(np.abs(sol.vectors[:, hi].conj() @ ops[0] @ sol.vectors[:, lo]) ** 2)
        dms = float(ez_s[hi] - ez_s[lo])
        if w < weight_floor or abs(dms) < 0.5:
            raise DegenerateSpectrumError(
                f"ESR line for m_I={mi} is not resolvable (weight {w:.2e}, delta m_s {dms:.2f})")
        lines.append(TransitionLine(
            lo, hi, float(e[hi] - e[lo]), w, dms, float(ez_i[hi] - ez_i[lo]),
            None, states[lo], states[hi]))
    lines.sort(key=lambda line: line.frequency)
    if len(lines) != int(round(2 * sys.i_nuclear + 1)):
        raise DegenerateSpectrumError("wrong number of ESR lines")
    return lines


def nmr_lines(sys, field, sol=None, weight_floor=0.0):
    """Single-quantum nuclear lines keyed by their roman-numeral label."""
    sol = diagonalize(sys, field) if sol is None else sol
    out = {}
    for line in transition_catalog(sol, "nmr", weight_floor):
        if line.label is not None and line.label not in out:
            out[line.label] = line
    return out


def hybridization_coefficient(sys, field, m_i, sol=None):
    """Admixture of |up, m_i - 1> in the eigenstate that is mostly |down, m_i>."""
    if sys.s_electron != 0.5:
        raise ValueError("hybridization_coefficient requires S = 1/2")
    i = sys.i_nuclear
    valid = {i - k for k in range(int(round(2 * i)) + 1)}
    if m_i not in valid or (m_i - 1) not in valid:
        raise ValueError(f"m_i={m_i} and m_i-1 must both be sublevels of I={i}")
    sol = diagonalize(sys, field) if sol is None else sol
    labels = sol.basis_labels
    down = labels.index((DOWN, m_i))
    up = labels.index((UP, m_i - 1))
    overlap = np.abs(sol.vectors[down, :]) ** 2
    k = int(np.argmax(overlap))
    if overlap[k] < 0.5:
        raise HybridizationTooStrongError(
            f"no eigenstate is predominantly |down, {m_i}> (max overlap {overlap[k]:.3f})")
    return HybridizationReport(field.b_z, (m_i, m_i - 1), float(np.abs(sol.vectors[up, k])))


def hybridization_coefficients(sys, field, sol=None):
    """Coefficient for every valid m_i, as a dict m_i -> coefficient."""
    sol = diagonalize(sys, field) if sol is None else sol
    i = sys.i_nuclear
    out = {}
    for k in range(int(round(2 * i))):
        m = i - k
        out[m] = hybridization_coefficient(sys, field, m, sol).coefficient
    return out


def double_quantum_frequencies(sol):
    """Delta m_I = +-2 lines built from pairs of consecutive single-quantum steps.

    The oriented frequency of each line is the sum of its two constituents'
    oriented frequencies (eigenvalue differences telescope).
    """
    labels = sol.basis_labels
    s, i = _spins_from_labels(labels)
    if i < 1:
        return []
    states, _ = assign_product_states(sol.vectors, labels)
    index = {st: k for k, st in enumerate(states)}
    ops = coupled_operators(s, i)
    ix2 = ops[3] @ ops[3]
    ez_s, ez_i = _expectations(sol)
    e = sol.values
    out = []
    ms_values = sorted({ms for ms, _ in labels})
    for ms in ms_values:
        for k in range(int(round(2 * i)) - 1):
            m0 = -i + k
            a, mid, b = index[(ms, m0)], index[(ms, m0 + 1)], index[(ms, m0 + 2)]
            step1 = e[mid] - e[a]
            step2 = e[b] - e[mid]
            oriented = step1 + step2
            lo, hi = (a, b) if oriented >= 0 else (b, a)
            w = float(np.abs(sol.vectors[:, hi].conj() @ ix2 @ sol.vectors[:, lo]) ** 2)
            tag = f"{nmr_label((ms, m0), (ms, m0 + 1), i)}+{nmr_label((ms, m0 + 1), (ms, m0 + 2), i)}"
            out.append(TransitionLine(
                lo, hi, float(abs(oriented)), w,
                float(ez_s[hi] - ez_s[lo]), float(ez_i[hi] - ez_i[lo]),
                tag, states[lo], states[hi]))
    out.sort(key=lambda line: line.frequency)
    return out


@dataclass
class FieldSweep:
    """Tracked eigenvalues and transitions over a b_z grid.

    ``labels[k]`` is the product-state label carried by column ``k`` of
    ``energies`` at every grid point.
    """

    b_z: np.ndarray
    energies: np.ndarray
    labels: list
    nmr: dict = field(default_factory=dict)
    nmr_oriented: dict = field(default_factory=dict)
    esr: dict = field(default_factory=dict)
    hybridization: np.ndarray = None
    min_overlap: np.ndarray = None

    def relative_energies(self):
        return self.energies - self.energies.min(axis=1, keepdims=True)


def field_sweep(sys, field_template, b_z_grid, hyb_m_i=-1.5):
    """Diagonalise on a grid and follow each eigenstate by overlap matching.

    Labels are assigned by product-state projection at the first grid point
    and then carried along by maximal overlap with the previous point.
    """
    grid = np.asarray(b_z_grid, dtype=float).ravel()
    if grid.size > 1 and np.any(np.diff(grid) <= 0):
        raise ValueError("b_z grid must be strictly ascending")
    fields = [field_template.with_bz(b) for b in grid]
    sol = diagonalize_many(sys, fields)
    labels = sys.basis_labels
    n = sys.dim
    energies = np.empty((grid.size, n))
    vecs = np.empty((grid.size, n, n), dtype=complex)
    min_overlap = np.ones(grid.size)

    first, _ = assign_product_states(sol.vectors[0], labels)
    order = [first.index(lab) for lab in labels]
    energies[0] = sol.values[0][order]
    vecs[0] = sol.vectors[0][:, order]
    for k in range(1, grid.size):
        ov = np.abs(vecs[k - 1].conj().T @ sol.vectors[k]) ** 2
        rows, cols = linear_sum_assignment(-ov)
        perm = cols[np.argsort(rows)]
        energies[k] = sol.values[k][perm]
        vecs[k] = sol.vectors[k][:, perm]
        min_overlap[k] = ov[rows, cols].min()

    col = {lab: k for k, lab in enumerate(labels)}
    i = sys.i_nuclear
    nmr, nmr_oriented, esr = {}, {}, {}
    mis = sorted({mi for _, mi in labels})
    for ms in sorted({ms for ms, _ in labels}):
        for m in mis[:-1]:
            tag = nmr_label((ms, m), (ms, m + 1), i)
            d = energies[:, col[(ms, m + 1)]] - energies[:, col[(ms, m)]]
            nmr_oriented[tag] = d
            nmr[tag] = np.abs(d)
    if sys.s_electron == 0.5:
        for m in mis:
            esr[m] = np.abs(energies[:, col[(UP, m)]] - energies[:, col[(DOWN, m)]])

    hyb = np.full(grid.size, np.nan)
    if sys.s_electron == 0.5 and i >= 1 and (hyb_m_i - 1) in mis and hyb_m_i in mis:
        for k in range(grid.size):
            one = type(sol)(sol.values[k], sol.vectors[k], sol.basis_labels)
            try:
                hyb[k] = hybridization_coefficient(sys, fields[k], hyb_m_i, one).coefficient
            except HybridizationTooStrongError:
                pass
    return FieldSweep(grid, energies, list(labels), nmr, nmr_oriented, esr, hyb, min_overlap)


REFERENCE_BZ = 0.45


def ti47_system(a_perp=25.0):
    """Parameter set fitted for the 47Ti atom (in-plane hyperfine assumed)."""
    return SpinSystem(
        s_electron=0.5, i_nuclear=2.5, g_e=(0.56, 0.56, 0.56), g_n=0.315,
        a_hyperfine=(a_perp, a_perp, 132.1), kappa=-56.7, eta=0.0)


def ti47_field(b_z=REFERENCE_BZ):
    return FieldConfig(b_ext=(0.0, 0.0, b_z), b_tip=0.0679, phi=np.deg2rad(5.0))
