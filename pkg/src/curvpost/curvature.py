"""Gauss-Newton curvature: matrix-free operators, dense oracles, rank,
and the low-rank posterior covariance decomposition.

The central object is the regularized Gauss-Newton map

    v  ->  sum_n J_n^T H_n J_n v  +  alpha v

streamed through jvp/vjp products so the Jacobian is never materialized.
Dense constructions exist for small problems and serve as oracles; they
refuse to run past configurable size budgets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetExceededError, ShapeMismatchError
from .lanczos import LowRankEigen
from .likelihoods import Likelihood
from .network import (
    Dataset,
    NetworkSpec,
    check_params,
    dense_jacobian,
    forward_batch,
    jvp_batch,
    vjp_batch,
)

DEFAULT_DENSE_DIM_BUDGET = 2000


@dataclass(frozen=True)
class CurvatureOperator:
    """Matrix-free regularized Gauss-Newton operator at fixed weights.

    Immutable after construction; ``matvec`` is pure and reentrant. The
    per-datum predictions (which fix the output Hessians) are cached once.
    An empty dataset (``dataset=None``) gives the pure prior map alpha*v.
    """

    spec: NetworkSpec
    w: np.ndarray
    dataset: Dataset | None
    likelihood: Likelihood
    alpha: float = 0.0
    _predictions: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        w = check_params(self.spec, self.w)
        if not np.all(np.isfinite(w)):
            raise ValueError("weights contain non-finite entries")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        object.__setattr__(self, "w", w)
        if self.dataset is not None:
            preds = forward_batch(self.spec, w, self.dataset.inputs)
            object.__setattr__(self, "_predictions", preds)

    @property
    def dim(self) -> int:
        return self.spec.num_params

    def matvec(self, v: np.ndarray) -> np.ndarray:
        """(GGN + alpha I) v, accumulated over the dataset."""
        v = check_params(self.spec, v, "v")
        out = self.alpha * v
        if self.dataset is None:
            return out
        Z = jvp_batch(self.spec, self.w, self.dataset.inputs, v)
        HZ = self.likelihood.hessian_apply_batch(self._predictions, Z)
        return out + vjp_batch(self.spec, self.w, self.dataset.inputs, HZ)

    def with_alpha(self, alpha: float) -> "CurvatureOperator":
        return CurvatureOperator(self.spec, self.w, self.dataset, self.likelihood, alpha)


def _stacked_sqrt_hessian_jacobian(op: CurvatureOperator, budget: int) -> np.ndarray:
    """H^(1/2) J with per-datum blocks, shape (N*O, D)."""
    J = dense_jacobian(op.spec, op.w, op.dataset, budget=budget)
    O = op.spec.output_dim
    out = np.empty_like(J)
    for n in range(op.dataset.n):
        R = op.likelihood.sqrt_hessian(op._predictions[n])
        out[n * O:(n + 1) * O] = R @ J[n * O:(n + 1) * O]
    return out


def dense_ggn(op: CurvatureOperator, dim_budget: int = DEFAULT_DENSE_DIM_BUDGET) -> np.ndarray:
    """Materialize the D x D matrix GGN + alpha I (oracle path, small D only)."""
    D = op.dim
    if D > dim_budget:
        raise BudgetExceededError(f"dense GGN needs D={D} <= budget {dim_budget}")
    G = op.alpha * np.eye(D)
    if op.dataset is None:
        return G
    Jh = _stacked_sqrt_hessian_jacobian(op, budget=op.dataset.n * op.spec.output_dim * D)
    G += Jh.T @ Jh
    return 0.5 * (G + G.T)


def ntk_matrix(spec: NetworkSpec, w: np.ndarray, dataset: Dataset,
               likelihood: Likelihood,
               dim_budget: int = DEFAULT_DENSE_DIM_BUDGET) -> np.ndarray:
    """The NO x NO Gram matrix H^(1/2) J J^T H^(1/2).

    Shares its nonzero spectrum with the (unregularized) Gauss-Newton
    matrix of the same weights and data.
    """
    no = dataset.n * spec.output_dim
    if no > dim_budget:
        raise BudgetExceededError(f"dense NTK needs N*O={no} <= budget {dim_budget}")
    op = CurvatureOperator(spec, w, dataset, likelihood, alpha=0.0)
    Jh = _stacked_sqrt_hessian_jacobian(op, budget=no * spec.num_params)
    K = Jh @ Jh.T
    return 0.5 * (K + K.T)


def ggn_rank(op: CurvatureOperator, tol: float = 1e-10,
             dim_budget: int = DEFAULT_DENSE_DIM_BUDGET) -> int:
    """Numerical rank of the unregularized Gauss-Newton matrix.

    Counts eigenvalues above ``tol * lambda_max``; the all-zero case has
    rank 0 by convention. Works through whichever of the D x D or NO x NO
    materializations fits the budget.
    """
    if op.dataset is None:
        return 0
    D = op.dim
    no = op.dataset.n * op.spec.output_dim
    bare = op.with_alpha(0.0)
    if min(D, no) > dim_budget:
        raise BudgetExceededError(
            f"rank needs min(D, N*O)={min(D, no)} <= budget {dim_budget}"
        )
    if D <= no and D <= dim_budget:
        lam = np.linalg.eigvalsh(dense_ggn(bare, dim_budget))
    else:
        lam = np.linalg.eigvalsh(ntk_matrix(op.spec, op.w, op.dataset, op.likelihood, dim_budget))
    lam_max = float(lam[-1]) if lam.size else 0.0
    if lam_max <= 0.0:
        return 0
    return int(np.sum(lam > tol * lam_max))


def eigenpairs_via_ntk(spec: NetworkSpec, w: np.ndarray, dataset: Dataset,
                       likelihood: Likelihood, tol: float = 1e-10,
                       dim_budget: int = DEFAULT_DENSE_DIM_BUDGET) -> LowRankEigen:
    """Every nonzero Gauss-Newton eigenpair, computed on the NO x NO side.

    For N*O << D this is far cheaper than iterating on the D-dimensional
    operator: if (lambda, y) is an NTK eigenpair then
    J^T H^(1/2) y / sqrt(lambda) is a unit GGN eigenvector for lambda.
    """
    no = dataset.n * spec.output_dim
    if no > dim_budget:
        raise BudgetExceededError(f"NTK eigenpairs need N*O={no} <= budget {dim_budget}")
    op = CurvatureOperator(spec, w, dataset, likelihood, alpha=0.0)
    Jh = _stacked_sqrt_hessian_jacobian(op, budget=no * spec.num_params)
    K = Jh @ Jh.T
    K = 0.5 * (K + K.T)
    theta, Y = np.linalg.eigh(K)
    theta, Y = theta[::-1], Y[:, ::-1]
    lam_max = float(theta[0]) if theta.size else 0.0
    if lam_max <= 0.0:
        return LowRankEigen(np.zeros((spec.num_params, 0)), np.zeros(0), np.zeros(0))
    keep = theta > tol * lam_max
    theta, Y = theta[keep], Y[:, keep]
    U = Jh.T @ (Y / np.sqrt(theta))
    # eigh backward error on the NTK side bounds the GGN-side residual
    ntk_res = np.linalg.norm(K @ Y - Y * theta, axis=0)
    residuals = np.sqrt(lam_max) * ntk_res / np.sqrt(theta)
    return LowRankEigen(U=U, lambdas=theta, residuals=residuals)


@dataclass(frozen=True)
class CovarianceDecomposition:
    """Laplace covariance (GGN + alpha I)^(-1) in split form.

    Held as an orthonormal image basis ``U1`` with eigenvalues
    ``lambdas`` plus the prior precision: the covariance is
    U1 (Lambda + alpha I)^(-1) U1^T + (1/alpha) (I - U1 U1^T), so kernel
    directions carry pure prior variance.
    """

    U1: np.ndarray
    lambdas: np.ndarray
    alpha: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        U1 = np.atleast_2d(np.asarray(self.U1, dtype=np.float64))
        lam = np.asarray(self.lambdas, dtype=np.float64).reshape(-1)
        if U1.shape[1] != lam.shape[0]:
            raise ShapeMismatchError(f"U1 has {U1.shape[1]} columns for {lam.shape[0]} eigenvalues")
        if lam.size and np.any(lam <= 0):
            raise ValueError("image eigenvalues must be positive")
        if lam.size:
            gram_err = np.max(np.abs(U1.T @ U1 - np.eye(lam.size)))
            if gram_err > 1e-8:
                raise ValueError(f"U1 is not orthonormal (max Gram deviation {gram_err:.2e})")
        object.__setattr__(self, "U1", U1)
        object.__setattr__(self, "lambdas", lam)

    @property
    def rank(self) -> int:
        return self.lambdas.shape[0]

    @property
    def dim(self) -> int:
        return self.U1.shape[0]

    def apply_sigma(self, v: np.ndarray) -> np.ndarray:
        """Covariance product Sigma v."""
        v = np.asarray(v, dtype=np.float64)
        proj = v @ self.U1
        coeff = 1.0 / (self.lambdas + self.alpha) - 1.0 / self.alpha
        return v / self.alpha + (coeff * proj) @ self.U1.T

    def apply_precision(self, v: np.ndarray) -> np.ndarray:
        """Precision product (GGN + alpha I) v under the low-rank model."""
        v = np.asarray(v, dtype=np.float64)
        proj = v @ self.U1
        return self.alpha * v + (self.lambdas * proj) @ self.U1.T

    def apply_sqrt_sigma(self, v: np.ndarray) -> np.ndarray:
        """Sigma^(1/2) v = (GGN + alpha I)^(-1/2) v; maps white noise to samples."""
        v = np.asarray(v, dtype=np.float64)
        proj = v @ self.U1
        coeff = 1.0 / np.sqrt(self.lambdas + self.alpha) - 1.0 / np.sqrt(self.alpha)
        return v / np.sqrt(self.alpha) + (coeff * proj) @ self.U1.T

    def dense_sigma(self) -> np.ndarray:
        """Materialized covariance, for oracle comparisons."""
        D = self.dim
        P = self.U1 @ self.U1.T
        return self.U1 @ np.diag(1.0 / (self.lambdas + self.alpha)) @ self.U1.T \
            + (np.eye(D) - P) / self.alpha


def decompose_covariance(eig: LowRankEigen, alpha: float) -> CovarianceDecomposition:
    """Build the covariance split from computed eigenpairs.

    Eigenpairs with nonpositive eigenvalues are folded into the kernel
    term (their covariance 1/alpha is what the kernel formula yields).
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    lam = eig.lambdas
    floor = max(float(lam[0]), 0.0) * 1e-14 if lam.size else 0.0
    keep = lam > floor
    return CovarianceDecomposition(U1=eig.U[:, keep], lambdas=lam[keep], alpha=alpha)


def split_sample(decomp: CovarianceDecomposition, w_sample: np.ndarray,
                 w_hat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split a posterior draw's displacement into kernel and image parts.

    Returns ``(w_ker, w_im)`` with w_sample - w_hat = w_ker + w_im and
    w_im the orthogonal projection onto the image basis.
    """
    w_sample = np.asarray(w_sample, dtype=np.float64)
    w_hat = np.asarray(w_hat, dtype=np.float64)
    if w_sample.shape != w_hat.shape or w_sample.shape != (decomp.dim,):
        raise ShapeMismatchError(
            f"sample shape {w_sample.shape} and mean shape {w_hat.shape} "
            f"must both be ({decomp.dim},)"
        )
    delta = w_sample - w_hat
    w_im = decomp.U1 @ (decomp.U1.T @ delta)
    return delta - w_im, w_im
