"""Numeric kernel: spin matrices, Kronecker products, a cyclic Jacobi
Hermitian eigensolver and a bounded Levenberg-Marquardt solver.

All energies are in MHz (E/h), fields in tesla.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DivergedError

# Bohr and nuclear magneton over Planck's constant, MHz/T
MU_B = 13996.245
MU_N = 7.622593
# Planck over Boltzmann, K/MHz
H_OVER_KB = 4.799243073e-5


@dataclass(frozen=True)
class SpinOperators:
    """Cartesian spin matrices for a single spin ``j`` (hbar = 1)."""

    j: float
    sx: np.ndarray
    sy: np.ndarray
    sz: np.ndarray

    @property
    def dim(self):
        return self.sz.shape[0]

    @property
    def sp(self):
        return self.sx + 1j * self.sy

    @property
    def sm(self):
        return self.sx - 1j * self.sy


@dataclass(frozen=True)
class EigenSolution:
    """Eigenvalues (MHz, ascending) and eigenvectors (columns)."""

    values: np.ndarray
    vectors: np.ndarray
    basis_labels: tuple = ()

    @property
    def dim(self):
        return self.values.shape[-1]


@dataclass
class LeastSquaresResult:
    params: np.ndarray
    covariance: np.ndarray
    residual_norm: float
    iterations: int
    converged: bool
    residuals: np.ndarray = field(repr=False, default=None)
    jacobian: np.ndarray = field(repr=False, default=None)
    at_bound: np.ndarray = field(repr=False, default=None)
    message: str = ""

    @property
    def stderr(self):
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))


def check_spin(j):
    """Return ``j`` as a float after checking that 2j is a nonnegative integer."""
    j = float(j)
    if j < 0 or abs(2 * j - round(2 * j)) > 1e-12:
        raise ValueError(f"spin quantum number must be a nonnegative half-integer, got {j}")
    return round(2 * j) / 2


def angular_momentum_ops(j):
    """Spin matrices in the |j, m> basis ordered m = j, j-1, ..., -j.

    The raising operator has <m+1|S+|m> = sqrt(j(j+1) - m(m+1)).
    """
    j = check_spin(j)
    m = j - np.arange(int(round(2 * j)) + 1)
    # sp[k-1, k] = <m_k + 1| S+ |m_k>
    sp = np.diag(np.sqrt(j * (j + 1) - m[1:] * (m[1:] + 1)), k=1).astype(complex)
    sm = sp.conj().T
    sx = (sp + sm) / 2
    sy = (sp - sm) / 2j
    sz = np.diag(m).astype(complex)
    return SpinOperators(j, sx, sy, sz)


def kron(a, b):
    """Kronecker product with ``a`` as the outer (slow) index."""
    return np.kron(np.asarray(a), np.asarray(b))


def hermitian_asymmetry(h):
    h = np.asarray(h)
    scale = max(1.0, float(np.max(np.abs(h)))) if h.size else 1.0
    return float(np.max(np.abs(h - np.swapaxes(h.conj(), -1, -2)))) / scale


def _fix_phase(vecs):
    # largest-magnitude component real positive; ties go to the lowest index
    mag = np.abs(vecs)
    top = mag.max(axis=-2, keepdims=True)
    idx = np.argmax(mag >= top * (1 - 1e-10), axis=-2)
    pivot = np.take_along_axis(vecs, idx[..., None, :], axis=-2)
    phase = np.where(np.abs(pivot) > 0, pivot.conj() / np.where(pivot == 0, 1, np.abs(pivot)), 1.0)
    return vecs * phase


def eigh(h, basis_labels=(), tol=1e-10, max_sweeps=60):
    """Diagonalise a Hermitian matrix (or a stack of them) by cyclic Jacobi.

    Each rotation first removes the phase of the pivot element, then applies
    a real plane rotation, so only complex arithmetic on two rows/columns is
    needed. A stack of matrices is rotated pair-by-pair in lockstep.

    Parameters
    ----------
    h : array_like, shape (..., n, n)
    basis_labels : sequence, optional
        Carried through to the returned solution.
    tol : float
        Maximum relative asymmetry accepted as Hermitian.

    Returns
    -------
    EigenSolution
        ``values`` ascending along the last axis; ``vectors[..., :, k]`` is
        the eigenvector of ``values[..., k]``.
    """
    h = np.asarray(h, dtype=complex)
    if h.ndim < 2 or h.shape[-1] != h.shape[-2]:
        raise ValueError(f"expected square matrix, got shape {h.shape}")
    asym = hermitian_asymmetry(h)
    if asym > tol:
        raise ValueError(f"matrix is not Hermitian (max relative asymmetry {asym:.3e})")

    batch_shape = h.shape[:-2]
    n = h.shape[-1]
    a = h.reshape(-1, n, n).copy()
    a = (a + np.swapaxes(a.conj(), -1, -2)) / 2
    nb = a.shape[0]
    v = np.broadcast_to(np.eye(n, dtype=complex), (nb, n, n)).copy()
    fro = np.sqrt(np.sum(np.abs(a) ** 2, axis=(1, 2)))
    floor = 1e-18 * np.where(fro > 0, fro, 1.0)
    offdiag = ~np.eye(n, dtype=bool)

    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.abs(a[:, offdiag]) ** 2, axis=1))
        if np.all(off <= 1e-15 * fro):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[:, p, q]
                mag = np.abs(apq)
                active = mag > floor
                if not active.any():
                    continue
                safe = np.where(active, mag, 1.0)
                phase = np.where(active, apq / safe, 1.0)
                app = a[:, p, p].real.copy()
                aqq = a[:, q, q].real.copy()
                theta = (aqq - app) / (2 * safe)
                t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.sqrt(theta**2 + 1))
                t = np.where(active, t, 0.0)
                c = 1 / np.sqrt(1 + t**2)
                s = t * c
                # U = diag(1, e^{-i alpha}) . [[c, s], [-s, c]]
                u_qp = -s * phase.conj()
                u_qq = c * phase.conj()
                c_, s_, u_qp_, u_qq_ = (x[:, None] for x in (c, s, u_qp, u_qq))

                col_p = a[:, :, p].copy()
                col_q = a[:, :, q]
                a[:, :, p] = c_ * col_p + u_qp_ * col_q
                a[:, :, q] = s_ * col_p + u_qq_ * col_q
                row_p = a[:, p, :].copy()
                row_q = a[:, q, :]
                a[:, p, :] = c_ * row_p + u_qp_.conj() * row_q
                a[:, q, :] = s_ * row_p + u_qq_.conj() * row_q
                a[:, p, p] = np.where(active, app - t * mag, a[:, p, p])
                a[:, q, q] = np.where(active, aqq + t * mag, a[:, q, q])
                a[:, p, q] = np.where(active, 0.0, a[:, p, q])
                a[:, q, p] = np.where(active, 0.0, a[:, q, p])

                vp = v[:, :, p].copy()
                vq = v[:, :, q]
                v[:, :, p] = c_ * vp + u_qp_ * vq
                v[:, :, q] = s_ * vp + u_qq_ * vq
    else:
        raise RuntimeError("Jacobi eigensolver did not converge")

    values = np.real(np.diagonal(a, axis1=1, axis2=2)).copy()
    order = np.argsort(values, axis=1, kind="stable")
    values = np.take_along_axis(values, order, axis=1)
    vectors = np.take_along_axis(v, order[:, None, :], axis=2)
    vectors = _fix_phase(vectors)
    return EigenSolution(
        values.reshape(batch_shape + (n,)),
        vectors.reshape(batch_shape + (n, n)),
        tuple(basis_labels),
    )


def _normalise_bounds(bounds, n):
    if bounds is None:
        return np.full(n, -np.inf), np.full(n, np.inf)
    bounds = list(bounds)
    if len(bounds) != n:
        raise ValueError(f"expected {n} bounds, got {len(bounds)}")
    lo = np.array([-np.inf if b is None or b[0] is None else b[0] for b in bounds], float)
    hi = np.array([np.inf if b is None or b[1] is None else b[1] for b in bounds], float)
    if np.any(lo > hi):
        raise ValueError("lower bound exceeds upper bound")
    return lo, hi


def numeric_jacobian(fun, p, r0, lo, hi, rel_step=1e-6):
    """Forward-difference Jacobian; steps backwards when at an upper bound."""
    jac = np.empty((r0.size, p.size))
    for k in range(p.size):
        h = rel_step * abs(p[k]) if p[k] != 0 else rel_step
        if p[k] + h > hi[k]:
            h = -h
        pk = p.copy()
        pk[k] += h
        rk = np.asarray(fun(pk), float).ravel()
        if not np.all(np.isfinite(rk)):
            raise DivergedError(f"non-finite residual while differentiating parameter {k}")
        jac[:, k] = (rk - r0) / h
    return jac


def least_squares(model, init, bounds=None, *, max_iter=500, xtol=1e-9, ftol=1e-12,
                  rel_step=1e-6, lam0=1e-3, absolute_sigma=False):
    """Minimise ``sum(model(p)**2)`` by damped Gauss-Newton (Levenberg-Marquardt).

    Parameters
    ----------
    model : callable
        Maps a parameter vector to a residual vector (already weighted).
    init : array_like
        Starting point; must lie inside ``bounds``.
    bounds : sequence of (lo, hi), optional
        Per-parameter interval; ``None`` entries mean unbounded. Every trial
        point is clipped into the box.
    absolute_sigma : bool
        If true the residuals are taken as unit-variance and the covariance
        is not rescaled by the reduced chi-square.

    Returns
    -------
    LeastSquaresResult
        ``converged`` is false when the iteration cap was hit.
    """
    p = np.array(init, dtype=float).ravel()
    n = p.size
    lo, hi = _normalise_bounds(bounds, n)
    if np.any(p < lo) or np.any(p > hi):
        raise ValueError("initial parameters outside bounds")
    r = np.asarray(model(p), float).ravel()
    if not np.all(np.isfinite(r)):
        raise ValueError("model returns non-finite residuals at the initial point")
    cost = float(r @ r)
    lam = lam0
    converged = False
    message = "iteration cap reached"
    jac = numeric_jacobian(model, p, r, lo, hi, rel_step)
    it = 0
    while it < max_iter:
        it += 1
        if cost == 0.0:
            converged, message = True, "exact fit"
            break
        jtj = jac.T @ jac
        grad = jac.T @ r
        if np.max(np.abs(grad)) <= 1e-14 * max(cost, 1e-300) ** 0.5 * max(1.0, np.max(np.abs(jac))):
            converged, message = True, "gradient vanished"
            break
        diag = np.diag(jtj).copy()
        diag[diag <= 0] = 1.0
        try:
            step = np.linalg.solve(jtj + lam * np.diag(diag), -grad)
        except np.linalg.LinAlgError:
            step = -np.linalg.lstsq(jtj + lam * np.diag(diag), grad, rcond=None)[0]
        trial = np.clip(p + step, lo, hi)
        r_new = np.asarray(model(trial), float).ravel()
        if not np.all(np.isfinite(r_new)):
            raise DivergedError(f"non-finite residual at iteration {it}")
        cost_new = float(r_new @ r_new)
        if cost_new <= cost:
            dp = trial - p
            rel_step_size = np.linalg.norm(dp) / (np.linalg.norm(p) + xtol)
            rel_drop = (cost - cost_new) / cost
            p, r, cost = trial, r_new, cost_new
            lam = max(lam / 10, 1e-15)
            if rel_step_size < xtol or rel_drop < ftol:
                converged, message = True, "step or residual decrease below tolerance"
                jac = numeric_jacobian(model, p, r, lo, hi, rel_step)
                break
            jac = numeric_jacobian(model, p, r, lo, hi, rel_step)
        else:
            lam *= 10
            if lam > 1e16:
                converged, message = True, "no further decrease possible"
                break

    m = r.size
    jtj = jac.T @ jac
    cov = np.linalg.pinv(jtj, rcond=1e-13, hermitian=True)
    if not absolute_sigma:
        cov = cov * (cost / (m - n) if m > n else 0.0)
    cov = (cov + cov.T) / 2
    span = np.where(np.isfinite(hi - lo), hi - lo, 1.0)
    at_bound = (np.abs(p - lo) <= 1e-9 * span) | (np.abs(hi - p) <= 1e-9 * span)
    return LeastSquaresResult(p, cov, float(np.sqrt(cost)), it, converged, r, jac, at_bound, message)
