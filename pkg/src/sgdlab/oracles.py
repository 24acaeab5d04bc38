"""Closed-form least-squares and logistic-regression quantities.

These serve as ground truth for the network oracles: loss, full gradient,
loss Hessian, gradient second moment, and the decomposition residual, all
in explicit matrix form. A central finite-difference gradient/Hessian
rounds out the toolbox for spot checks of anything differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError


@dataclass
class RegressionProblem:
    X: np.ndarray  # (n, p) design matrix
    Y: np.ndarray  # (n,) responses; {0,1} for logistic
    noise_sigma: float = 1.0  # least squares only

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.float64)
        if self.X.ndim != 2 or self.Y.shape != (self.X.shape[0],):
            raise InputError("X must be (n, p) with matching (n,) Y")

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1]


def ls_quantities(prob: RegressionProblem, theta) -> dict:
    """Gaussian-noise linear model: f, mu, H_f, M, H_p in closed form."""
    if not prob.noise_sigma > 0:
        raise InputError("noise_sigma must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    X, Y, s2 = prob.X, prob.Y, prob.noise_sigma ** 2
    n = prob.n
    r = X @ theta - Y
    f = float(r @ r / (2.0 * n * s2))
    mu = X.T @ r / (n * s2)
    hf = X.T @ X / (n * s2)
    m2 = (X.T * (r ** 2)) @ X / (n * s2 ** 2)
    return {"f": f, "mu": mu, "hf": hf, "m2": m2, "hp": m2 - hf}


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logit_quantities(prob: RegressionProblem, theta) -> dict:
    """Binary logistic regression: f, mu, H_f, M, H_p in closed form."""
    Y = prob.Y
    if not np.all((Y == 0) | (Y == 1)):
        raise InputError("logistic labels must be 0 or 1")
    theta = np.asarray(theta, dtype=np.float64)
    X = prob.X
    n = prob.n
    z = X @ theta
    p = _sigmoid(z)
    # loss via log1p(exp(-|z|)) for stability at large margins
    f = float(np.mean(Y * np.logaddexp(0.0, -z) + (1.0 - Y) * np.logaddexp(0.0, z)))
    resid = p - Y
    var = p * (1.0 - p)
    mu = X.T @ resid / n
    hf = (X.T * var) @ X / n
    m2 = (X.T * (resid ** 2)) @ X / n
    return {"f": f, "mu": mu, "hf": hf, "m2": m2, "hp": m2 - hf}


def descent_premises(prob: RegressionProblem) -> dict:
    """Premise constants for the prescribed-step descent check.

    alpha uses sigma_min(X X^T / n); the /n^2 normalization variant is
    reported alongside but drives no test. beta is max_i ||x_i||^2.
    """
    X = prob.X
    n = prob.n
    gram = X @ X.T
    smin = float(np.linalg.eigvalsh(gram).min())
    return {
        "alpha": smin / n,
        "alpha_n2": smin / n ** 2,
        "beta": float((X ** 2).sum(axis=1).max()),
    }


# ---------------------------------------------------------------------------
# finite differences


def fd_gradient(fn, theta, h=None) -> np.ndarray:
    """Central-difference gradient of a scalar function, O(h^2)."""
    theta = np.asarray(theta, dtype=np.float64)
    if h is None:
        h = 1e-5 * (1.0 + np.abs(theta).max())
    g = np.empty_like(theta)
    e = np.zeros_like(theta)
    for j in range(theta.size):
        e[j] = h
        g[j] = (fn(theta + e) - fn(theta - e)) / (2.0 * h)
        e[j] = 0.0
    return g


def fd_hessian(fn, theta, h=None) -> np.ndarray:
    """Central-difference Hessian via the 4-point stencil, O(h^2)."""
    theta = np.asarray(theta, dtype=np.float64)
    if h is None:
        h = 1e-5 * (1.0 + np.abs(theta).max())
    p = theta.size
    H = np.empty((p, p))
    ei = np.zeros(p)
    ej = np.zeros(p)
    for i in range(p):
        ei[i] = h
        H[i, i] = (fn(theta + ei) - 2.0 * fn(theta) + fn(theta - ei)) / h ** 2
        for j in range(i + 1, p):
            ej[j] = h
            val = (fn(theta + ei + ej) - fn(theta + ei - ej)
                   - fn(theta - ei + ej) + fn(theta - ei - ej)) / (4.0 * h ** 2)
            H[i, j] = H[j, i] = val
            ej[j] = 0.0
        ei[i] = 0.0
    return H
