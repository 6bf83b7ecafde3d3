"""Piecewise-linear finite elements on triangles and a Jacobi-preconditioned CG."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

# degree-5 rule on the reference triangle (Dunavant, 7 points)
_S15 = np.sqrt(15.0)
_A1, _B1 = (9 - 2 * _S15) / 21, (6 + _S15) / 21
_A2, _B2 = (9 + 2 * _S15) / 21, (6 - _S15) / 21
_BARY = np.array(
    [
        [1 / 3, 1 / 3, 1 / 3],
        [_A1, _B1, _B1],
        [_B1, _A1, _B1],
        [_B1, _B1, _A1],
        [_A2, _B2, _B2],
        [_B2, _A2, _B2],
        [_B2, _B2, _A2],
    ]
)
_WQ = np.array([9 / 40, *[(155 + _S15) / 1200] * 3, *[(155 - _S15) / 1200] * 3])


class SolverError(RuntimeError):
    pass


def triangle_geometry(vertices, triangles):
    """Signed areas and barycentric gradients, shape ``(nt,)`` and ``(nt, 3, 2)``."""
    p = vertices[triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    area = 0.5 * det
    # gradient of lambda_i is the inward-rotated opposite edge over 2|T|
    e0 = p[:, 2] - p[:, 1]
    e1 = p[:, 0] - p[:, 2]
    e2 = p[:, 1] - p[:, 0]
    rot = lambda e: np.stack([-e[:, 1], e[:, 0]], axis=1)
    grads = np.stack([rot(e0), rot(e1), rot(e2)], axis=1) / det[:, None, None]
    return area, grads


def stiffness(vertices, triangles, coef, n=None) -> sp.csr_matrix:
    """``K_ab = sum_T coef_T |T| grad(phi_a).grad(phi_b)``."""
    area, grads = triangle_geometry(vertices, triangles)
    local = np.einsum("tik,tjk->tij", grads, grads) * (np.asarray(coef) * area)[:, None, None]
    rows = np.repeat(triangles, 3, axis=1).ravel()
    cols = np.tile(triangles, (1, 3)).ravel()
    n = n or len(vertices)
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def gradient_load(vertices, triangles, coef, direction, n=None) -> np.ndarray:
    """``b_a = -sum_T coef_T |T| grad(phi_a).direction`` (constant-flux load)."""
    area, grads = triangle_geometry(vertices, triangles)
    vals = -(grads @ np.asarray(direction, dtype=float)) * (np.asarray(coef) * area)[:, None]
    return np.bincount(triangles.ravel(), vals.ravel(), minlength=n or len(vertices))


def quadrature_points(vertices, triangles):
    """Physical quadrature points ``(nt, 7, 2)`` and weights ``(nt, 7)``."""
    area, _ = triangle_geometry(vertices, triangles)
    p = vertices[triangles]
    pts = np.einsum("qi,tik->tqk", _BARY, p)
    return pts, area[:, None] * _WQ[None, :]


def source_load(vertices, triangles, values_at_qp, n=None) -> np.ndarray:
    """``b_a = int f phi_a`` with ``f`` given at the quadrature points."""
    _, w = quadrature_points(vertices, triangles)
    vals = np.einsum("tq,qi->ti", w * values_at_qp, _BARY)
    return np.bincount(triangles.ravel(), vals.ravel(), minlength=n or len(vertices))


def integrate_qp(vertices, triangles, values_at_qp) -> float:
    _, w = quadrature_points(vertices, triangles)
    return float(np.sum(w * values_at_qp))


def integrate_p1(vertices, triangles, u) -> float:
    area, _ = triangle_geometry(vertices, triangles)
    return float(np.sum(area * u[triangles].mean(axis=1)))


def l2_norm_p1(vertices, triangles, u) -> float:
    """Exact L2 norm of a P1 field."""
    area, _ = triangle_geometry(vertices, triangles)
    ut = u[triangles]
    # int u^2 over T = |T|/6 (sum u_i^2 + sum_{i<j} u_i u_j)
    s = (ut**2).sum(axis=1) + ut[:, 0] * ut[:, 1] + ut[:, 1] * ut[:, 2] + ut[:, 0] * ut[:, 2]
    return float(np.sqrt(np.sum(area * s) / 6.0))


def p1_gradients(vertices, triangles, u) -> np.ndarray:
    """Constant gradient of a P1 field on every triangle, ``(nt, 2)``."""
    _, grads = triangle_geometry(vertices, triangles)
    return np.einsum("tik,ti->tk", grads, u[triangles])


def pcg(A, b, rtol: float = 1e-12, maxiter: int | None = None, nullspace=None, x0=None):
    """Conjugate gradients with diagonal preconditioning.

    ``nullspace`` is a single vector spanning the kernel of a singular
    symmetric ``A``; the right-hand side and every residual are projected
    orthogonally to it, so the iteration stays in the range of ``A``.
    Returns ``(x, iterations)``; raises :class:`SolverError` if the relative
    residual does not reach ``rtol``.
    """
    A = sp.csr_matrix(A)
    b = np.asarray(b, dtype=float)
    n = len(b)
    maxiter = maxiter or max(1000, 20 * n)
    d = A.diagonal()
    if np.any(d <= 0):
        raise SolverError("matrix has a non-positive diagonal entry")
    dinv = 1.0 / d
    if nullspace is not None:
        z = np.asarray(nullspace, dtype=float)
        z = z / np.linalg.norm(z)
        project = lambda v: v - z * (z @ v)
    else:
        project = lambda v: v
    b = project(b)
    bnorm = np.linalg.norm(b)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    if bnorm == 0.0:
        return x * 0.0, 0
    r = project(b - A @ x)
    y = dinv * r
    p = y.copy()
    ry = r @ y
    tol = rtol * bnorm
    for it in range(1, maxiter + 1):
        Ap = A @ p
        alpha = ry / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        if it % 50 == 0:
            r = project(b - A @ x)  # guard against drift of the recursive residual
        else:
            r = project(r)
        if np.linalg.norm(r) <= tol:
            true_r = np.linalg.norm(project(b - A @ x))
            if true_r <= tol:
                return x, it
            r = project(b - A @ x)
        y = dinv * r
        ry_new = r @ y
        p = y + (ry_new / ry) * p
        ry = ry_new
    raise SolverError(f"CG did not converge in {maxiter} iterations (residual {np.linalg.norm(r) / bnorm:.3e})")


def solve_spd(A, b, rtol=1e-12, nullspace=None, method="cg"):
    """Solve a symmetric (semi-)definite system by CG or a sparse direct method."""
    if method == "cg":
        return pcg(A, b, rtol=rtol, nullspace=nullspace)[0]
    if method == "direct":
        from scipy.sparse.linalg import spsolve

        if nullspace is not None:
            raise ValueError("direct solve does not handle singular systems")
        x = spsolve(sp.csc_matrix(A), b)
        res = np.linalg.norm(A @ x - b)
        if res > 1e-10 * max(np.linalg.norm(b), 1e-300):
            raise SolverError(f"direct solve residual {res:.3e} too large")
        return x
    raise ValueError(f"unknown solver method {method!r}")
