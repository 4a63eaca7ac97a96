"""Small dense solvers used by the alternating code optimization."""

from __future__ import annotations

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

RIDGE_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
MAX_SWEEPS = 100


class SingularMatrixError(np.linalg.LinAlgError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


def solve_spd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``a @ x = b`` for symmetric positive definite ``a``.

    The input is symmetrized first.  If the Cholesky factorization breaks
    down, an increasing ridge is added to the diagonal (1e-10 up to 1e-6)
    before giving up.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"solve_spd needs a square matrix, got {a.shape}")
    if b.shape[0] != a.shape[0]:
        raise ValueError(f"right-hand side {b.shape} does not match matrix {a.shape}")
    sym = 0.5 * (a + a.T)
    eye = np.eye(a.shape[0])
    for ridge in RIDGE_LADDER:
        try:
            factor = cho_factor(sym + ridge * eye if ridge else sym, lower=True)
        except LinAlgError:
            continue
        x = cho_solve(factor, b)
        if np.all(np.isfinite(x)):
            return x
    raise SingularMatrixError(
        f"matrix of shape {a.shape} not positive definite even with ridge {RIDGE_LADDER[-1]}"
    )


def _complete_basis(u: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace the columns of ``u`` not flagged in ``keep`` with an orthonormal completion."""
    k = u.shape[0]
    basis = [u[:, i] for i in range(u.shape[1]) if keep[i]]
    out = u.copy()
    for i in range(u.shape[1]):
        if keep[i]:
            continue
        best, best_norm = None, -1.0
        for j in range(k):
            v = np.zeros(k)
            v[j] = 1.0
            for _ in range(2):
                for q in basis:
                    v -= (q @ v) * q
            nv = np.linalg.norm(v)
            if nv > best_norm + 1e-12:
                best, best_norm = v, nv
        col = best / best_norm
        basis.append(col)
        out[:, i] = col
    return out


def svd_small(m: np.ndarray, tol: float = 10 * np.finfo(float).eps):
    """Singular value decomposition of a small square matrix by one-sided Jacobi.

    Returns ``(U, S, V)`` with ``m = U @ diag(S) @ V.T``, ``S`` sorted in
    descending order.  Columns of ``U`` belonging to numerically zero singular
    values are completed to an orthonormal basis, so ``U`` is always orthogonal.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"svd_small needs a square matrix, got {m.shape}")
    k = m.shape[0]
    if k > 64:
        raise ValueError(f"svd_small is meant for k <= 64, got {k}")
    a = m.copy()
    v = np.eye(k)
    # columns below this squared norm are rounding noise and never rotated
    negligible = (np.finfo(float).eps * np.linalg.norm(m)) ** 2
    for _ in range(MAX_SWEEPS):
        rotated = False
        for p in range(k - 1):
            for q in range(p + 1, k):
                ap, aq = a[:, p], a[:, q]
                alpha = ap @ ap
                beta = aq @ aq
                gamma = ap @ aq
                if alpha <= negligible or beta <= negligible:
                    continue
                if gamma == 0.0 or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                a[:, p] = new_p
                vp, vq = v[:, p].copy(), v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        if not rotated:
            break
    else:
        residual = np.linalg.norm(a.T @ a - np.diag(np.sum(a * a, axis=0)))
        raise ConvergenceError(f"one-sided Jacobi did not converge in {MAX_SWEEPS} sweeps", residual)

    s = np.linalg.norm(a, axis=0)
    order = np.argsort(-s, kind="stable")
    s, a, v = s[order], a[:, order], v[:, order]
    keep = s > (s[0] if k else 0.0) * k * np.finfo(float).eps
    u = np.zeros((k, k))
    u[:, keep] = a[:, keep] / s[keep]
    if not keep.all():
        s = np.where(keep, s, 0.0)
        u = _complete_basis(u, keep)
    return u, s, v
