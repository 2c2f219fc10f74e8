import numpy as np
import pytest
from hypothesis import given, strategies as st

from endorsim.errors import DegenerateSpectrumError, HybridizationTooStrongError
from endorsim.numerics import MU_B, MU_N, eigh
from endorsim.spinmodel import (
    FieldConfig, SpinSystem, build_hamiltonian, coupled_operators, diagonalize,
    double_quantum_frequencies, esr_frequencies, field_sweep, hybridization_coefficient,
    hybridization_coefficients, nmr_label, nmr_lines, ti47_field, ti47_system, transition_catalog,
)

AXIAL = FieldConfig(b_ext=(0, 0, 1.0), b_tip=0.0, phi=0.0)


def bare(i=2.5, **kw):
    base = dict(i_nuclear=i, g_e=(2, 2, 2), g_n=0.0, a_hyperfine=(0, 0, 0), kappa=0.0)
    base.update(kw)
    return SpinSystem(**base)


def oriented(sweep, ms, m, i=2.5):
    return sweep.nmr_oriented[nmr_label((ms, m), (ms, m + 1), i)]


# -- types --------------------------------------------------------------------

def test_spin_system_validation():
    with pytest.raises(ValueError):
        SpinSystem(eta=1.5)
    with pytest.raises(ValueError):
        SpinSystem(i_nuclear=0.7)
    assert SpinSystem().dim == 12
    assert SpinSystem(i_nuclear=0, kappa=0).dim == 2


def test_field_validation():
    with pytest.raises(ValueError):
        FieldConfig(b_tip=-0.1)
    with pytest.raises(ValueError):
        FieldConfig(phi=4.0)


def test_quadrupole_q():
    assert ti47_system().quadrupole_q == pytest.approx(-2.835)


def test_basis_order_electron_outer():
    labels = ti47_system().basis_labels
    assert labels[0] == (0.5, 2.5) and labels[5] == (0.5, -2.5) and labels[6] == (-0.5, 2.5)


# -- hamiltonian --------------------------------------------------------------

def test_bare_electron_splitting():
    sol = diagonalize(bare(i=0), AXIAL)
    assert sol.values[1] - sol.values[0] == pytest.approx(27992.49, abs=1e-6)


def test_quadrupole_diagonal():
    sys = bare(g_e=(0, 0, 0), kappa=-56.7)
    h = build_hamiltonian(sys, AXIAL)
    d = np.real(np.diag(h))[:6]  # m_s = +1/2 block, m_I = 5/2 ... -5/2
    assert np.allclose(d, [-14.175, 2.835, 11.34, 11.34, 2.835, -14.175], atol=1e-12)


def test_quadrupole_commutes_with_iz_at_eta_zero():
    sys = bare(g_e=(0, 0, 0), kappa=-56.7)
    h = build_hamiltonian(sys, AXIAL)
    iz = coupled_operators(0.5, 2.5)[5]
    assert np.max(np.abs(h @ iz - iz @ h)) < 1e-12


@pytest.mark.parametrize("eta", [0.0, 0.3, 1.0])
def test_quadrupole_trace(eta):
    sys = bare(g_e=(0, 0, 0), kappa=-56.7, eta=eta)
    h = build_hamiltonian(sys, AXIAL)
    i = 2.5
    ms2 = sum(m * m for m in np.arange(-i, i + 1))
    expected = sys.quadrupole_q * (1.5 * ms2 - (2 * i + 1) * i * (i + 1) / 2) * 2
    assert np.trace(h).real == pytest.approx(expected, abs=1e-12)
    assert abs(np.trace(h)) < 1e-12


def test_quadrupole_needs_spin_one():
    with pytest.raises(ValueError):
        build_hamiltonian(SpinSystem(i_nuclear=0.5, kappa=1.0), AXIAL)


def test_tip_only_couples_nucleus_when_asked():
    sys = bare(g_e=(0, 0, 0), g_n=0.315)
    fld = FieldConfig(b_ext=(0, 0, 0.5), b_tip=0.1, phi=0.0)
    f_off = nmr_lines(sys, fld)["I"].frequency
    f_on = nmr_lines(sys, fld.with_(tip_couples_nucleus=True))["I"].frequency
    assert f_off == pytest.approx(MU_N * 0.315 * 0.5, abs=1e-9)
    assert f_on == pytest.approx(MU_N * 0.315 * 0.6, abs=1e-9)


params = st.fixed_dictionaries({
    "g": st.tuples(*[st.floats(0, 3)] * 3),
    "a": st.tuples(*[st.floats(-200, 200)] * 3),
    "g_n": st.floats(-1, 1), "kappa": st.floats(-100, 100), "eta": st.floats(0, 1),
    "b": st.tuples(*[st.floats(-2, 2)] * 3), "tip": st.floats(0, 0.2),
    "phi": st.floats(0, np.pi), "theta": st.floats(0, 2 * np.pi),
})


@given(params)
def test_hamiltonian_hermitian(p):
    sys = SpinSystem(g_e=p["g"], a_hyperfine=p["a"], g_n=p["g_n"], kappa=p["kappa"], eta=p["eta"])
    fld = FieldConfig(b_ext=p["b"], b_tip=p["tip"], phi=p["phi"], theta=p["theta"])
    h = build_hamiltonian(sys, fld)
    assert np.max(np.abs(h - h.conj().T)) <= 1e-12 * max(1.0, np.max(np.abs(h)))


@given(g=st.floats(0.1, 3), g_n=st.floats(-1, 1), b=st.floats(0.01, 2))
def test_uncoupled_spectrum_is_sum_of_ladders(g, g_n, b):
    sys = bare(g_e=(g, g, g), g_n=g_n)
    sol = diagonalize(sys, FieldConfig(b_ext=(0, 0, b), b_tip=0.0, phi=0.0))
    expected = sorted(MU_B * g * b * ms + MU_N * g_n * b * mi
                      for ms in (0.5, -0.5) for mi in np.arange(-2.5, 3))
    assert np.allclose(sol.values, expected, atol=1e-9 * MU_B * g * b)


# -- transitions --------------------------------------------------------------

def test_pure_nuclear_zeeman_ladder():
    sys = bare(g_n=0.315)
    fld = FieldConfig(b_ext=(0, 0, 0.45), b_tip=0.0, phi=0.0)
    for line in nmr_lines(sys, fld).values():
        assert line.frequency == pytest.approx(MU_N * 0.315 * 0.45, abs=1e-9)


def test_fitted_parameters_transition_lines(ti47, field450):
    lines = nmr_lines(ti47, field450)
    assert abs(lines["I"].frequency - 49.3) <= 3.0
    assert abs(lines["II"].frequency - 85.0) <= 3.0
    lo, hi = lines["I"].frequency, lines["II"].frequency
    for tag in ("III", "IV"):
        assert lo < lines[tag].frequency < hi
    assert lines["III"].frequency < 132.1 / 2 < lines["IV"].frequency
    assert lines["I"].from_state[0] == -0.5 and lines["II"].from_state[0] == 0.5


def test_labels_unique_and_odd_even_manifolds(ti47, field450):
    lines = nmr_lines(ti47, field450)
    assert len(lines) == 10
    for tag, line in lines.items():
        n = ["I", "II", "III", "IV", "V", "VI", "VII", "VIII", "IX", "X"].index(tag) + 1
        assert line.from_state[0] == (-0.5 if n % 2 else 0.5)


def test_catalog_frequency_invariant(ti47, field450):
    sol = diagonalize(ti47, field450)
    for line in transition_catalog(sol):
        e = sol.values
        assert line.frequency == pytest.approx(abs(e[line.to_index] - e[line.from_index]), abs=1e-12)
        assert line.weight >= 0


def test_catalog_weights_phase_invariant(ti47, field450, rng):
    sol = diagonalize(ti47, field450)
    phases = np.exp(1j * rng.uniform(0, 2 * np.pi, sol.dim))
    rotated = type(sol)(sol.values, sol.vectors * phases[None, :], sol.basis_labels)
    a = [ln.weight for ln in transition_catalog(sol)]
    b = [ln.weight for ln in transition_catalog(rotated)]
    assert np.allclose(a, b, atol=1e-14)


def test_catalog_weight_floor(ti47, field450):
    sol = diagonalize(ti47, field450)
    assert transition_catalog(sol, weight_floor=1e9) == []
    with pytest.raises(ValueError):
        transition_catalog(sol, "optical")


def test_esr_six_lines(ti47, field450):
    lines = esr_frequencies(ti47, field450)
    f = np.array([ln.frequency for ln in lines])
    assert len(f) == 6 and np.all(np.diff(f) > 0)
    assert 3600 <= f[0] <= 3900
    assert np.mean(np.diff(f)) == pytest.approx(132.1, abs=2)
    assert [ln.m_i for ln in lines] == [-2.5, -1.5, -0.5, 0.5, 1.5, 2.5]


def test_esr_spacing_first_order(ti47, field450):
    # first-order comb f0 + A_z m_I, with f0 from the exact electron Zeeman term
    f = np.array([ln.frequency for ln in esr_frequencies(ti47, field450)])
    b_eff = np.linalg.norm(np.array(field450.b_ext) + field450.tip_vector)
    first = MU_B * 0.56 * b_eff + 132.1 * np.arange(-2.5, 3)
    assert np.max(np.abs(f - first)) < 2.0


def test_esr_single_line_for_spinless_nucleus():
    sys = SpinSystem(i_nuclear=0, kappa=0.0, g_e=(0.56, 0.56, 0.56))
    fld = FieldConfig(b_ext=(0, 0, 0.45), b_tip=0.0679, phi=0.0)
    (line,) = esr_frequencies(sys, fld)
    assert line.frequency == pytest.approx(MU_B * 0.56 * (0.45 + 0.0679), abs=1e-9)


def test_esr_degenerate_spectrum():
    with pytest.raises(DegenerateSpectrumError):
        esr_frequencies(ti47_system().with_(g_e=(0, 0, 0)), ti47_field())


def test_first_order_nmr_formula():
    sys = ti47_system()
    a_perp = sys.a_hyperfine[0]
    for b in (0.2, 0.45, 1.4):
        fld = ti47_field(b)
        sw = field_sweep(sys, fld, [b])
        gap = MU_B * sys.g_e[2] * (b + fld.tip_vector[2])
        for ms in (-0.5, 0.5):
            for m in np.arange(-2.5, 2.5):
                first = MU_N * sys.g_n * b + sys.a_hyperfine[2] * ms + 3 * sys.kappa / 40 * ((m + 1) ** 2 - m ** 2)
                # the outer lines carry a second-order shift of I * A_perp^2 / (2 gap)
                assert abs(oriented(sw, ms, m)[0] - first) < 1.5 * a_perp**2 / gap
                second = a_perp**2 / (2 * gap) * (m if ms < 0 else -(m + 1))
                third = 4 * a_perp**2 * sys.a_hyperfine[2] / gap**2
                assert abs(oriented(sw, ms, m)[0] - first - second) < third


def test_double_quantum_telescoping(ti47, field450):
    sol = diagonalize(ti47, field450)
    sw = field_sweep(ti47, field450, [0.45])
    dq = double_quantum_frequencies(sol)
    assert len(dq) == 8
    for line in dq:
        a, b = line.label.split("+")
        total = sw.nmr_oriented[a][0] + sw.nmr_oriented[b][0]
        assert line.frequency == pytest.approx(abs(total), abs=1e-9)
        assert line.frequency > 100


def test_double_quantum_spin_half():
    sys = SpinSystem(i_nuclear=0.5, kappa=0.0)
    assert double_quantum_frequencies(diagonalize(sys, ti47_field())) == []


# -- hybridization ------------------------------------------------------------

def test_hybridization_zero_without_transverse_hyperfine():
    sys = ti47_system(a_perp=0.0)
    for b in (0.2, 0.8, 1.4):
        assert hybridization_coefficient(sys, ti47_field(b), -1.5).coefficient == 0.0


def test_hybridization_decreasing():
    sys = ti47_system()
    c = [hybridization_coefficient(sys, ti47_field(b), -1.5).coefficient for b in np.linspace(0.2, 1.4, 25)]
    assert np.all(np.diff(c) < 0)
    assert all(0 <= x <= 1 for x in c)


def test_hybridization_inverse_field_limit():
    sys = ti47_system()
    c1 = hybridization_coefficient(sys, ti47_field(1.0), -1.5).coefficient
    c2 = hybridization_coefficient(sys, ti47_field(2.0), -1.5).coefficient
    # perturbative limit: c ~ A_perp / gap with gap ~ (b + b_tip,z)
    tip = ti47_field().tip_vector[2]
    assert (c1 / c2) == pytest.approx((2.0 + tip) / (1.0 + tip), rel=0.05)


def test_hybridization_first_order_amplitude():
    # <up, m-1| H |down, m> = A_perp/2 * sqrt(I(I+1) - m(m-1)); divide by the gap
    sys = ti47_system()
    fld = ti47_field(1.4)
    sol = diagonalize(sys, fld)
    e = {lab: v for lab, v in zip(sys.basis_labels, np.real(np.diag(build_hamiltonian(sys, fld))))}
    coeff = hybridization_coefficients(sys, fld, sol)
    for m in (-1.5, -0.5, 0.5):
        amp = 12.5 * np.sqrt(8.75 - m * (m - 1)) / abs(e[(0.5, m - 1)] - e[(-0.5, m)])
        assert coeff[m] == pytest.approx(amp, rel=0.03)


def test_hybridization_invalid_sublevel():
    with pytest.raises(ValueError):
        hybridization_coefficient(ti47_system(), ti47_field(), -2.5)


def test_hybridization_too_strong():
    # a transverse field quantizes the electron along x: no state is mostly |down, m>
    fld = FieldConfig(b_ext=(0.45, 0, 0), b_tip=0.0, phi=0.0)
    with pytest.raises(HybridizationTooStrongError):
        hybridization_coefficient(ti47_system(), fld, -1.5)


# -- field sweep --------------------------------------------------------------

def test_sweep_single_point_matches_direct(ti47):
    fld = ti47_field(0.0)
    sw = field_sweep(ti47, fld, [0.0])
    assert np.allclose(np.sort(sw.energies[0]), eigh(build_hamiltonian(ti47, fld)).values, atol=1e-10)


def test_sweep_shape_and_continuity(ti47):
    grid = np.arange(0.2, 1.4001, 0.01)
    sw = field_sweep(ti47, ti47_field(), grid)
    assert sw.energies.shape == (grid.size, 12)
    assert np.all(sw.min_overlap[1:] > 0.9)
    slope = np.diff(sw.nmr_oriented["I"])
    assert np.all(slope > 0)  # oriented frequency rises; |f| of this down-manifold line falls


def test_sweep_rejects_unsorted_grid(ti47):
    with pytest.raises(ValueError):
        field_sweep(ti47, ti47_field(), [0.5, 0.4])


def test_sweep_nuclear_slope_without_transverse_hyperfine():
    # A_perp = 0 and an axial tip remove all mixing: the line is exactly affine
    sys = ti47_system(a_perp=0.0)
    grid = np.linspace(0.2, 1.4, 13)
    sw = field_sweep(sys, ti47_field().with_(phi=0.0), grid)
    coef, res, *_ = np.polyfit(grid, sw.nmr_oriented["I"], 1, full=True)
    assert coef[0] == pytest.approx(MU_N * 0.315, abs=1e-9)
    # the tilted tip adds a small anisotropic-hyperfine curvature
    sw = field_sweep(sys, ti47_field(), grid)
    assert np.polyfit(grid, sw.nmr_oriented["I"], 1)[0] == pytest.approx(MU_N * 0.315, abs=0.1)


def test_sweep_nuclear_slope_fitted_parameters(ti47):
    grid = np.linspace(0.2, 1.4, 13)
    sw = field_sweep(ti47, ti47_field(), grid)
    slope = np.polyfit(grid, sw.nmr_oriented["I"], 1)[0]
    assert slope == pytest.approx(MU_N * 0.315, rel=0.15)
