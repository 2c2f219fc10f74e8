import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from endorsim.errors import DivergedError
from endorsim.lineshapes import FanoParams, LorentzianParams, fano, lorentzian
from endorsim.numerics import MU_B, MU_N, angular_momentum_ops, eigh, kron, least_squares

SPINS = [0.5, 1.0, 1.5, 2.0, 2.5]


def random_hermitian(rng, n):
    a = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return (a + a.conj().T) / 2


# -- spin operators -----------------------------------------------------------

def test_constants():
    assert MU_B == 13996.245
    assert MU_N == 7.622593


def test_spin_half_is_pauli_over_two():
    ops = angular_momentum_ops(0.5)
    assert np.allclose(ops.sz, np.diag([0.5, -0.5]))
    assert np.allclose(ops.sx, [[0, 0.5], [0.5, 0]])
    assert np.allclose(ops.sy, [[0, -0.5j], [0.5j, 0]])


def test_spin_one_matrices():
    ops = angular_momentum_ops(1)
    assert np.allclose(ops.sz, np.diag([1, 0, -1]))
    r = 1 / np.sqrt(2)
    assert np.allclose(ops.sx, [[0, r, 0], [r, 0, r], [0, r, 0]])


@pytest.mark.parametrize("j", SPINS)
def test_commutation_casimir_hermiticity(j):
    o = angular_momentum_ops(j)
    tol = 1e-12
    assert np.max(np.abs(o.sx @ o.sy - o.sy @ o.sx - 1j * o.sz)) < tol
    assert np.max(np.abs(o.sy @ o.sz - o.sz @ o.sy - 1j * o.sx)) < tol
    assert np.max(np.abs(o.sz @ o.sx - o.sx @ o.sz - 1j * o.sy)) < tol
    casimir = o.sx @ o.sx + o.sy @ o.sy + o.sz @ o.sz
    assert np.max(np.abs(casimir - j * (j + 1) * np.eye(o.dim))) < tol
    for m in (o.sx, o.sy, o.sz):
        assert np.max(np.abs(m - m.conj().T)) < tol


def test_casimir_five_halves():
    o = angular_momentum_ops(2.5)
    assert np.allclose(o.sx @ o.sx + o.sy @ o.sy + o.sz @ o.sz, 8.75 * np.eye(6), atol=1e-12)


@pytest.mark.parametrize("j", SPINS)
def test_ladder_elements(j):
    o = angular_momentum_ops(j)
    m = j - np.arange(o.dim)
    for k in range(1, o.dim):
        expected = np.sqrt(j * (j + 1) - m[k] * (m[k] + 1))
        assert o.sp[k - 1, k] == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("bad", [0.3, -0.5, 1.25])
def test_non_half_integer_rejected(bad):
    with pytest.raises(ValueError):
        angular_momentum_ops(bad)


# -- kron ---------------------------------------------------------------------

def test_kron_block_diagonal():
    m = np.arange(9.0).reshape(3, 3)
    out = kron(np.eye(2), m)
    assert np.allclose(out[:3, :3], m) and np.allclose(out[3:, 3:], m)
    assert np.allclose(out[:3, 3:], 0)


def test_kron_electron_outer():
    assert np.allclose(kron(np.diag([1, -1]), np.eye(3)), np.diag([1, 1, 1, -1, -1, -1]))


def test_kron_electron_and_nuclear_operators_commute():
    s, i = angular_momentum_ops(0.5), angular_momentum_ops(2.5)
    a = kron(s.sx, np.eye(6))
    b = kron(np.eye(2), i.sx)
    assert np.max(np.abs(a @ b - b @ a)) < 1e-14


# -- eigh ---------------------------------------------------------------------

def test_eigh_diagonal():
    sol = eigh(np.diag([3.0, 1.0, 2.0]))
    assert np.allclose(sol.values, [1, 2, 3])
    assert np.allclose(np.abs(sol.vectors), [[0, 0, 1], [1, 0, 0], [0, 1, 0]])


def test_eigh_pauli_x():
    assert np.allclose(eigh([[0, 1], [1, 0]]).values, [-1, 1], atol=1e-14)


def test_eigh_random_reconstruction(rng):
    h = random_hermitian(rng, 12)
    sol = eigh(h)
    v = sol.vectors
    assert np.max(np.abs(v.conj().T @ v - np.eye(12))) < 1e-10
    rec = v @ np.diag(sol.values) @ v.conj().T
    assert np.max(np.abs(rec - h)) / np.max(np.abs(h)) < 1e-9
    assert np.all(np.diff(sol.values) >= 0)


def test_eigh_matches_lapack(rng):
    # numpy's LAPACK driver is an independent oracle
    h = random_hermitian(rng, 12)
    assert np.allclose(eigh(h).values, np.linalg.eigvalsh(h), atol=1e-10)


def test_eigh_phase_convention_and_determinism(rng):
    h = random_hermitian(rng, 8)
    a, b = eigh(h), eigh(h.copy())
    assert np.array_equal(a.vectors, b.vectors)
    idx = np.argmax(np.abs(a.vectors), axis=0)
    pivots = a.vectors[idx, np.arange(8)]
    assert np.all(np.abs(pivots.imag) < 1e-12) and np.all(pivots.real > 0)


def test_eigh_rejects_non_hermitian():
    with pytest.raises(ValueError, match="asymmetry"):
        eigh([[0, 1], [0, 0]])


def test_eigh_batched(rng):
    hs = np.stack([random_hermitian(rng, 5) for _ in range(4)])
    sol = eigh(hs)
    for k in range(4):
        assert np.allclose(sol.values[k], np.linalg.eigvalsh(hs[k]), atol=1e-10)


finite = st.floats(-100, 100, allow_nan=False, allow_infinity=False)


@given(a=finite, d=finite, re=finite, im=finite)
def test_eigh_2x2_closed_form(a, d, re, im):
    h = np.array([[a, re + 1j * im], [re - 1j * im, d]])
    tr, det = a + d, a * d - (re * re + im * im)
    disc = np.sqrt(max(tr * tr / 4 - det, 0.0))
    expected = [tr / 2 - disc, tr / 2 + disc]
    scale = max(1.0, np.max(np.abs(h)))
    assert np.allclose(eigh(h).values, expected, atol=1e-12 * scale, rtol=0)


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 12))
def test_eigh_continuity_under_tiny_perturbation(seed, n):
    rng = np.random.default_rng(seed)
    h = random_hermitian(rng, n)
    dh = random_hermitian(rng, n)
    dh *= 1e-13 / np.max(np.abs(dh))
    assert np.max(np.abs(eigh(h).values - eigh(h + dh).values)) < 1e-10


# -- least squares ------------------------------------------------------------

def test_least_squares_linear_exact():
    x = np.linspace(0, 5, 20)
    y = 2 * x + 1
    res = least_squares(lambda p: p[0] * x + p[1] - y, [0.0, 0.0])
    assert res.converged
    assert np.allclose(res.params, [2, 1], atol=1e-8)


def test_least_squares_lorentzian_recovery():
    f = np.linspace(-20, 20, 401)
    truth = LorentzianParams(1.3, 4.2, -0.7)
    y = lorentzian(f, truth)
    res = least_squares(lambda p: lorentzian(f, LorentzianParams(p[0], p[1], p[2])) - y,
                        [0.0, 3.0, -0.5], [(None, None), (0.1, 50), (None, None)])
    assert np.allclose(res.params, [1.3, 4.2, -0.7], rtol=1e-6)


@given(center=st.floats(-5, 5), width=st.floats(2, 10), q=st.floats(-3, 3).filter(lambda v: abs(v) > 0.3),
       amp=st.floats(0.2, 5))
def test_least_squares_fano_recovery(center, width, q, amp):
    f = np.linspace(-40, 40, 321)
    y = fano(f, FanoParams(center, width, q, amp))
    res = least_squares(
        lambda p: fano(f, FanoParams(p[0], p[1], p[2], p[3])) - y,
        [center + 0.5, width * 1.1, q * 0.9, amp * 1.1], [(None, None), (0.5, 50), (None, None), (None, None)])
    assert np.allclose(res.params, [center, width, q, amp], rtol=1e-5, atol=1e-7)


def test_least_squares_bounds_respected():
    x = np.linspace(0, 1, 10)
    seen = []

    def model(p):
        seen.append(p.copy())
        return p[0] * x - 3 * x

    res = least_squares(model, [0.5], [(0.0, 1.0)])
    assert all(0.0 <= s[0] <= 1.0 for s in seen)
    assert res.params[0] == pytest.approx(1.0)
    assert res.at_bound[0]


def test_least_squares_covariance_psd(rng):
    x = np.linspace(0, 1, 50)
    y = 3 * x**2 - x + 0.1 * rng.standard_normal(50)
    res = least_squares(lambda p: p[0] * x**2 + p[1] * x + p[2] - y, [1.0, 0.0, 0.0])
    cov = res.covariance
    assert np.allclose(cov, cov.T)
    assert np.all(np.linalg.eigvalsh(cov) >= -1e-15)
    # matches the closed-form OLS covariance
    design = np.column_stack([x**2, x, np.ones_like(x)])
    s2 = np.sum(res.residuals**2) / (50 - 3)
    assert np.allclose(cov, s2 * np.linalg.inv(design.T @ design), rtol=1e-4)


def test_least_squares_monotone_cost():
    x = np.linspace(0, 4, 30)
    y = np.exp(-0.7 * x)
    costs = []

    def model(p):
        r = np.exp(-p[0] * x) - y
        costs.append(float(r @ r))
        return r

    res = least_squares(model, [3.0])
    assert res.params[0] == pytest.approx(0.7, rel=1e-6)
    assert res.residual_norm <= np.sqrt(costs[0])


def test_least_squares_iteration_cap_not_converged():
    x = np.linspace(0, 4, 30)
    res = least_squares(lambda p: np.exp(-p[0] * x) - np.exp(-0.7 * x), [3.0], max_iter=1)
    assert not res.converged


def test_least_squares_diverged():
    calls = [0]

    def model(p):
        calls[0] += 1
        return np.array([p[0] - 1.0, np.inf if calls[0] > 2 else 0.0])

    with pytest.raises(DivergedError):
        least_squares(model, [5.0])
