"""Block preconditioned conjugate gradients for symmetric positive (semi)definite systems."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NotConverged(RuntimeError):
    pass


@dataclass
class PCGResult:
    x: np.ndarray
    iterations: int
    residual: np.ndarray  # final true residual b - A x, one column per right-hand side
    converged: bool


def block_pcg(A, B, tol, maxiter=10_000, x0=None, diag=None, deflate_constants=False,
              recompute_every=50, check_every=4) -> PCGResult:
    """Solve ``A X = B`` column by column with a Jacobi preconditioner.

    Iteration stops when every column satisfies ``max|b - A x| <= tol``, measured on
    the true residual, which is recomputed every ``recompute_every`` steps and at the
    end.  With ``deflate_constants`` the system is treated as a graph Laplacian whose
    kernel is the constant vector: the right-hand side, iterates and residuals are
    kept orthogonal to it.
    """
    B = np.asarray(B, dtype=np.float64)
    vec = B.ndim == 1
    if vec:
        B = B[:, None]
    n, k = B.shape
    if diag is None:
        diag = A.diagonal()
    dinv = np.where(diag > 0, 1.0 / np.where(diag > 0, diag, 1.0), 0.0)[:, None]

    def center(v):
        return v - v.mean(axis=0) if deflate_constants else v

    B = center(B)
    X = np.zeros((n, k)) if x0 is None else center(np.array(x0, dtype=np.float64).reshape(n, k))
    R = B - A @ X
    active = np.abs(R).max(axis=0) > tol
    Z = dinv * R
    P = Z.copy()
    rz = np.einsum("ij,ij->j", R, Z)
    it = 0
    while active.any() and it < maxiter:
        it += 1
        AP = A @ P
        pap = np.einsum("ij,ij->j", P, AP)
        alpha = np.where(active & (pap > 0), rz / np.where(pap > 0, pap, 1.0), 0.0)
        X += alpha * P
        if it % recompute_every == 0:
            R = center(B - A @ X)
        else:
            # A annihilates constants, so the update keeps R orthogonal to them
            R -= alpha * AP
        if it % check_every == 0:
            active &= np.abs(R).max(axis=0) > tol
            if not active.any():
                break
        Z = dinv * R
        rz_new = np.einsum("ij,ij->j", R, Z)
        beta = np.where(active, rz_new / np.where(rz > 0, rz, 1.0), 0.0)
        P = Z + beta * P
        rz = rz_new
    R = center(B - A @ X)
    ok = bool(np.abs(R).max(initial=0.0) <= tol)
    if not ok and it < maxiter:
        # the recursive residual drifted; finish with a restart from the current iterate
        more = block_pcg(A, B, tol, maxiter - it, X, diag, deflate_constants, recompute_every,
                         check_every)
        return PCGResult(more.x[:, 0] if vec else more.x, it + more.iterations,
                         more.residual[:, 0] if vec else more.residual, more.converged)
    if vec:
        return PCGResult(X[:, 0], it, R[:, 0], ok)
    return PCGResult(X, it, R, ok)
