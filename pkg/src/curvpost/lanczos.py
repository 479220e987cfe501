"""Top-k eigenpairs of symmetric PSD operators via Lanczos iteration.

The iteration keeps every Krylov vector and reorthogonalizes twice per
step (modified Gram-Schmidt against the full stored basis), trading
memory for the numerical stability needed when spectra are dominated by
a few large eigenvalues. Matrix access is through a matvec callable, so
Gauss-Newton operators never have to be materialized.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ShapeMismatchError

BREAKDOWN_TOL = 1e-14


@dataclass(frozen=True)
class LowRankEigen:
    """Top eigenpairs of a symmetric PSD operator.

    ``U`` is D x k with orthonormal columns, ``lambdas`` is sorted
    descending, and ``residuals[i]`` reports ||A u_i - lambda_i u_i||.
    ``truncated`` is set when the iteration stopped early (exact
    invariant subspace found) or unconverged trailing pairs were dropped.
    """

    U: np.ndarray
    lambdas: np.ndarray
    residuals: np.ndarray
    truncated: bool = False

    def __post_init__(self):
        U = np.atleast_2d(np.asarray(self.U, dtype=np.float64))
        lam = np.asarray(self.lambdas, dtype=np.float64).reshape(-1)
        res = np.asarray(self.residuals, dtype=np.float64).reshape(-1)
        if U.shape[1] != lam.shape[0] or lam.shape[0] != res.shape[0]:
            raise ShapeMismatchError(
                f"inconsistent eigenpair shapes: U {U.shape}, lambdas {lam.shape}, residuals {res.shape}"
            )
        if lam.size > 1 and np.any(np.diff(lam) > 0):
            raise ValueError("eigenvalues must be sorted descending")
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "lambdas", lam)
        object.__setattr__(self, "residuals", res)

    @property
    def k(self) -> int:
        return self.lambdas.shape[0]

    @property
    def dim(self) -> int:
        return self.U.shape[0]


def empty_eigen(d: int) -> LowRankEigen:
    return LowRankEigen(U=np.zeros((d, 0)), lambdas=np.zeros(0), residuals=np.zeros(0))


def lanczos_topk(matvec, d: int, k: int, iters: int, seed: int,
                 tol: float = 1e-8, explicit_residuals: bool = False) -> LowRankEigen:
    """Top-k Ritz pairs of a symmetric PSD operator on R^d.

    Parameters
    ----------
    matvec : callable mapping a length-d vector to a length-d vector.
    d : operator dimension.
    k : number of eigenpairs requested.
    iters : Lanczos steps; must satisfy k <= iters <= d.
    seed : seeds the starting vector (unit-normalized Gaussian draw).
    tol : pairs with residual above ``tol * lambda_max`` are dropped.
    explicit_residuals : recompute residual norms with extra matvecs
        instead of the standard ``|beta_m y_m|`` estimate.

    Deterministic given the seed. On breakdown (an exact invariant
    subspace was found) the pairs found so far are returned with the
    ``truncated`` flag set.
    """
    if not 1 <= k <= iters <= d:
        raise ValueError(f"need 1 <= k <= iters <= d, got k={k}, iters={iters}, d={d}")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(d)
    v /= np.linalg.norm(v)

    V = np.empty((iters, d))
    V[0] = v
    alphas: list[float] = []
    betas: list[float] = []
    broke_down = False
    m = 0
    for j in range(iters):
        u = np.asarray(matvec(V[j]), dtype=np.float64)
        if u.shape != (d,):
            raise ShapeMismatchError(f"matvec returned shape {u.shape}, expected ({d},)")
        a = float(V[j] @ u)
        alphas.append(a)
        u = u - a * V[j]
        if j > 0:
            u -= betas[-1] * V[j - 1]
        # full reorthogonalization: MGS against all stored vectors, twice
        for _ in range(2):
            for q in V[:j + 1]:
                u -= (q @ u) * q
        m = j + 1
        b = float(np.linalg.norm(u))
        if b < BREAKDOWN_TOL:
            broke_down = True
            break
        if j + 1 < iters:
            betas.append(b)
            V[j + 1] = u / b

    if m > 1:
        theta, Y = scipy.linalg.eigh_tridiagonal(np.asarray(alphas[:m]), np.asarray(betas[:m - 1]))
    else:
        theta, Y = np.asarray(alphas[:1]), np.ones((1, 1))

    order = np.argsort(theta)[::-1]
    theta = theta[order]
    Y = Y[:, order]
    ritz = V[:m].T @ Y

    # residual estimates; beta_m is 0 after a breakdown
    beta_m = 0.0 if broke_down else (float(np.linalg.norm(u)) if m == iters else 0.0)
    est = np.abs(beta_m * Y[-1, :])
    if explicit_residuals:
        est = np.array([np.linalg.norm(np.asarray(matvec(ritz[:, i])) - theta[i] * ritz[:, i])
                        for i in range(m)])

    lam_max = float(theta[0]) if m else 0.0
    keep = est <= tol * max(lam_max, np.finfo(float).tiny)
    idx = [i for i in range(m) if keep[i]][:k]
    truncated = broke_down or len(idx) < k
    if not idx:
        out = empty_eigen(d)
        return LowRankEigen(out.U, out.lambdas, out.residuals, truncated=True)
    U = ritz[:, idx]
    # one orthonormalization pass on the returned block absorbs rounding
    U, _ = np.linalg.qr(U)
    return LowRankEigen(U=U, lambdas=theta[idx], residuals=est[idx], truncated=truncated)


def inv_sqrt_apply(eig: LowRankEigen, alpha: float, v: np.ndarray) -> np.ndarray:
    """(A + alpha I)^(-1/2) v under the low-rank eigenmodel of A.

    Exact when ``eig`` holds every nonzero eigenpair: directions outside
    the captured span are treated as kernel and scaled by 1/sqrt(alpha).
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    v = np.asarray(v, dtype=np.float64)
    root_alpha = np.sqrt(alpha)
    if eig.k == 0:
        return v / root_alpha
    if v.shape[-1] != eig.dim:
        raise ShapeMismatchError(f"vector has shape {v.shape}, expected length {eig.dim}")
    coeff = 1.0 / np.sqrt(eig.lambdas + alpha) - 1.0 / root_alpha
    proj = v @ eig.U
    return v / root_alpha + (coeff * proj) @ eig.U.T


def save_spectrum_csv(path, eig: LowRankEigen) -> None:
    """Dump the eigenspectrum as (index, lambda, residual) rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "lambda", "residual"])
        for i, (lam, res) in enumerate(zip(eig.lambdas, eig.residuals)):
            writer.writerow([i, f"{lam:.17g}", f"{res:.17g}"])
