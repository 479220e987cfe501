"""Observation likelihoods and their output-space curvature.

Each likelihood knows its log density, the gradient of the log density in
the network output (used for MAP training), and the output-space Hessian
H(x) = -d^2 log p / df^2 that enters the Gauss-Newton matrix. For these
exponential families H does not depend on the target.

Predictions are raw network outputs: means for ``gaussian``, logits for
``categorical`` and ``bernoulli``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatchError


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _softplus(z):
    return np.logaddexp(0.0, z)


class Likelihood:
    """Interface shared by the concrete likelihood kinds."""

    kind = "base"

    def log_lik(self, prediction: np.ndarray, target) -> float:
        """Exact log density / log mass of ``target`` given one prediction."""
        raise NotImplementedError

    def grad_log_lik_batch(self, predictions: np.ndarray, targets) -> np.ndarray:
        """d log p / d f, rowwise over an (N, O) prediction batch."""
        raise NotImplementedError

    def output_hessian(self, prediction: np.ndarray) -> np.ndarray:
        """O x O symmetric PSD matrix -d^2 log p / df^2 at one prediction."""
        raise NotImplementedError

    def hessian_apply_batch(self, predictions: np.ndarray, V: np.ndarray) -> np.ndarray:
        """Apply the per-datum output Hessian to each row of V."""
        raise NotImplementedError

    def sqrt_hessian(self, prediction: np.ndarray) -> np.ndarray:
        """Symmetric PSD square root of :meth:`output_hessian`."""
        H = self.output_hessian(prediction)
        lam, Q = np.linalg.eigh(H)
        lam = np.clip(lam, 0.0, None)
        return (Q * np.sqrt(lam)) @ Q.T

    def predictive_params(self, predictions: np.ndarray) -> np.ndarray:
        """Map raw outputs to likelihood parameters (probabilities or means)."""
        raise NotImplementedError


@dataclass(frozen=True)
class Gaussian(Likelihood):
    """Homoscedastic Gaussian with isotropic variance ``sigma2``.

    The default sigma2=1 makes the output Hessian an identity.
    """

    sigma2: float = 1.0
    kind = "gaussian"

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")

    def log_lik(self, prediction, target):
        f = np.asarray(prediction, dtype=np.float64)
        y = np.asarray(target, dtype=np.float64)
        if y.shape != f.shape:
            raise ShapeMismatchError(f"target shape {y.shape} != prediction shape {f.shape}")
        o = f.shape[-1] if f.ndim else 1
        return float(
            -0.5 * np.sum((y - f) ** 2) / self.sigma2
            - 0.5 * o * np.log(2.0 * np.pi * self.sigma2)
        )

    def grad_log_lik_batch(self, predictions, targets):
        return (np.asarray(targets, dtype=np.float64) - predictions) / self.sigma2

    def output_hessian(self, prediction):
        o = np.asarray(prediction).shape[-1]
        return np.eye(o) / self.sigma2

    def hessian_apply_batch(self, predictions, V):
        return V / self.sigma2

    def sqrt_hessian(self, prediction):
        o = np.asarray(prediction).shape[-1]
        return np.eye(o) / np.sqrt(self.sigma2)

    def predictive_params(self, predictions):
        return predictions


@dataclass(frozen=True)
class Categorical(Likelihood):
    """Softmax-categorical over O classes; predictions are logits."""

    kind = "categorical"

    def log_lik(self, prediction, target):
        z = np.asarray(prediction, dtype=np.float64)
        c = int(target)
        if not 0 <= c < z.shape[-1]:
            raise ValueError(f"class index {c} outside [0, {z.shape[-1]})")
        zs = z - np.max(z)
        return float(zs[c] - np.log(np.exp(zs).sum()))

    def grad_log_lik_batch(self, predictions, targets):
        p = softmax(predictions)
        onehot = np.zeros_like(p)
        labels = np.asarray(targets)
        if np.any(labels < 0) or np.any(labels >= p.shape[1]):
            raise ValueError("class index outside [0, O)")
        onehot[np.arange(p.shape[0]), labels] = 1.0
        return onehot - p

    def output_hessian(self, prediction):
        p = softmax(np.asarray(prediction, dtype=np.float64))
        return np.diag(p) - np.outer(p, p)

    def hessian_apply_batch(self, predictions, V):
        p = softmax(predictions)
        return p * V - p * np.sum(p * V, axis=1, keepdims=True)

    def predictive_params(self, predictions):
        return softmax(predictions)


@dataclass(frozen=True)
class Bernoulli(Likelihood):
    """Bernoulli with a single logit output; targets in {0, 1}."""

    kind = "bernoulli"

    def log_lik(self, prediction, target):
        z = float(np.asarray(prediction).reshape(-1)[0])
        t = int(target)
        if t not in (0, 1):
            raise ValueError(f"bernoulli target must be 0 or 1, got {t}")
        return float(t * z - _softplus(z))

    def grad_log_lik_batch(self, predictions, targets):
        p = 1.0 / (1.0 + np.exp(-predictions))
        t = np.asarray(targets, dtype=np.float64).reshape(p.shape)
        return t - p

    def output_hessian(self, prediction):
        z = float(np.asarray(prediction).reshape(-1)[0])
        p = 1.0 / (1.0 + np.exp(-z))
        return np.array([[p * (1.0 - p)]])

    def hessian_apply_batch(self, predictions, V):
        p = 1.0 / (1.0 + np.exp(-predictions))
        return p * (1.0 - p) * V

    def predictive_params(self, predictions):
        return 1.0 / (1.0 + np.exp(-predictions))


def log_lik_sum(likelihood: Likelihood, predictions: np.ndarray, targets) -> float:
    """Total log-likelihood of a prediction batch."""
    predictions = np.asarray(predictions, dtype=np.float64)
    total = 0.0
    if isinstance(likelihood, Gaussian):
        y = np.asarray(targets, dtype=np.float64)
        n, o = predictions.shape
        return float(
            -0.5 * np.sum((y - predictions) ** 2) / likelihood.sigma2
            - 0.5 * n * o * np.log(2.0 * np.pi * likelihood.sigma2)
        )
    if isinstance(likelihood, Categorical):
        z = predictions - np.max(predictions, axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        labels = np.asarray(targets)
        return float(np.sum(z[np.arange(len(labels)), labels] - lse))
    for pred, t in zip(predictions, np.asarray(targets)):
        total += likelihood.log_lik(pred, t)
    return total


def likelihood_from_config(cfg) -> Likelihood:
    """Build a likelihood from ``{"kind": ..., ...}`` or a kind string."""
    if isinstance(cfg, Likelihood):
        return cfg
    if isinstance(cfg, str):
        cfg = {"kind": cfg}
    kind = cfg.get("kind")
    if kind == "gaussian":
        extra = set(cfg) - {"kind", "sigma2"}
        if extra:
            raise ValueError(f"unknown gaussian likelihood keys {sorted(extra)}")
        return Gaussian(sigma2=float(cfg.get("sigma2", 1.0)))
    if kind == "categorical":
        if set(cfg) - {"kind"}:
            raise ValueError("categorical likelihood takes no extra keys")
        return Categorical()
    if kind == "bernoulli":
        if set(cfg) - {"kind"}:
            raise ValueError("bernoulli likelihood takes no extra keys")
        return Bernoulli()
    raise ValueError(f"unknown likelihood kind {kind!r}")
