"""Stochastic-gradient moments and the Hessian decomposition residual.

The decomposition of interest writes the loss Hessian as the gradient
second moment minus a residual, H_f = M - H_p. Dense forms of Sigma and M
are kept only up to the dense parameter limit; the trace scalars and all
norms needed by the deviation bounds are computed without materializing
M, so they remain available at any scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import netcore, oracles
from .errors import CapacityError, InputError


@dataclass
class GradMoments:
    mu: np.ndarray            # (p,) mean gradient
    sigma: np.ndarray         # (p, p) covariance, or None above the dense limit
    m2: np.ndarray            # (p, p) second moment, or None above the dense limit
    trace_m2: float
    trace_sigma: float
    batch_size_for_m: int = None
    m2_batch: np.ndarray = None   # Sigma/m + mu mu^T when a batch size was given
    # scalars used by the deviation bounds; matrix-free friendly
    mu_sigma_mu: float = 0.0      # mu^T Sigma mu = ||Sigma^{1/2} mu||^2
    sigma_fro: float = 0.0
    sigma_spec: float = 0.0


@dataclass
class ResidualHp:
    hp: np.ndarray


def compute_moments(spec, theta, dataset, m=None, dense_limit=netcore.DENSE_LIMIT,
                    chunk=2048) -> GradMoments:
    """Gradient mean/covariance/second moment over the full training set."""
    X, y = dataset.features, dataset.labels
    if X.shape[0] == 0:
        raise InputError("dataset must be nonempty")
    n = X.shape[0]
    p = spec.param_count()
    if m is not None and not 1 <= m <= n:
        raise InputError("batch size must lie in [1, n]")

    if p <= dense_limit:
        G = netcore.per_sample_gradients(spec, theta, X, y)
        mu = G.mean(axis=0)
        m2 = G.T @ G / n
        C = G - mu
        sigma = C.T @ C / n
        trace_m2 = float(np.einsum("ij,ij->", G, G) / n)
        trace_sigma = trace_m2 - float(mu @ mu)
        # n x n Gram of centered rows shares Sigma's nonzero spectrum
        K = C @ C.T / n
        sigma_fro = float(np.linalg.norm(K, "fro"))
        sigma_spec = float(max(np.linalg.eigvalsh(K).max(), 0.0))
        mu_sigma_mu = float(mu @ sigma @ mu)
        m2_batch = sigma / m + np.outer(mu, mu) if m is not None else None
        return GradMoments(mu=mu, sigma=sigma, m2=m2, trace_m2=trace_m2,
                           trace_sigma=trace_sigma, batch_size_for_m=m,
                           m2_batch=m2_batch, mu_sigma_mu=max(mu_sigma_mu, 0.0),
                           sigma_fro=sigma_fro, sigma_spec=sigma_spec)

    # matrix-free: stream per-sample gradients, keep scalars only
    mu = np.zeros(p)
    trace_m2 = 0.0
    for s in range(0, n, chunk):
        rows = netcore.per_sample_gradients(spec, theta, X[s:s + chunk], y[s:s + chunk])
        mu += rows.sum(axis=0)
        trace_m2 += float(np.einsum("ij,ij->", rows, rows))
    mu /= n
    trace_m2 /= n
    trace_sigma = trace_m2 - float(mu @ mu)
    # mu^T Sigma mu from one more streaming pass
    acc = 0.0
    for s in range(0, n, chunk):
        rows = netcore.per_sample_gradients(spec, theta, X[s:s + chunk], y[s:s + chunk])
        acc += float(((rows @ mu) ** 2).sum())
    mu_sigma_mu = acc / n - float(mu @ mu) ** 2
    return GradMoments(mu=mu, sigma=None, m2=None, trace_m2=trace_m2,
                       trace_sigma=trace_sigma, batch_size_for_m=m,
                       mu_sigma_mu=max(mu_sigma_mu, 0.0),
                       sigma_fro=float("nan"), sigma_spec=float("nan"))


def sigma_matvec(spec, theta, dataset, v, chunk=2048) -> np.ndarray:
    """Sigma v without forming Sigma: (1/n) sum_i g_i <g_i, v> - mu <mu, v>."""
    X, y = dataset.features, dataset.labels
    n = X.shape[0]
    p = spec.param_count()
    v = np.asarray(v, dtype=np.float64)
    mu = np.zeros(p)
    gv = np.zeros(p)
    for s in range(0, n, chunk):
        rows = netcore.per_sample_gradients(spec, theta, X[s:s + chunk], y[s:s + chunk])
        mu += rows.sum(axis=0)
        gv += rows.T @ (rows @ v)
    mu /= n
    return gv / n - mu * float(mu @ v)


def residual_hp(spec, theta, dataset, dense_limit=netcore.DENSE_LIMIT) -> ResidualHp:
    """M - H_f, the subtraction form of the decomposition residual."""
    p = spec.param_count()
    if p > dense_limit:
        raise CapacityError(f"p={p} exceeds dense limit {dense_limit}")
    mom = compute_moments(spec, theta, dataset, dense_limit=dense_limit)
    hf = netcore.dense_hessian(spec, theta, dataset.features, dataset.labels,
                               dense_limit=dense_limit).dense
    return ResidualHp(hp=mom.m2 - hf)


def residual_hp_direct(spec, theta, dataset, dense_limit=netcore.DENSE_LIMIT) -> ResidualHp:
    """The residual from probability-seeded Hessians, independent of M and H_f."""
    hp = netcore.probability_weighted_hessian(spec, theta, dataset.features,
                                              dataset.labels, dense_limit=dense_limit)
    return ResidualHp(hp=hp)


def fisher_residual_check(p=5, ns=(100, 1000, 10000, 100000), trials=3, seed=0,
                          misspecify=0.0) -> dict:
    """Residual norm of a well-specified logistic model at the true parameter.

    Draws n samples from the model at theta*, computes ||H_p(theta*)||_F in
    closed form, and fits the log-log decay slope across n. misspecify > 0
    evaluates at theta* + misspecify instead, where the residual does not
    vanish with n.
    """
    if p > 20:
        raise InputError("keep the check low-dimensional (p <= 20)")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 777]))
    theta_star = rng.standard_normal(p)
    theta_eval = theta_star + misspecify
    norms = []
    for n in ns:
        vals = []
        for _ in range(trials):
            X = rng.standard_normal((n, p))
            probs = 1.0 / (1.0 + np.exp(-(X @ theta_star)))
            Y = (rng.random(n) < probs).astype(np.float64)
            q = oracles.logit_quantities(oracles.RegressionProblem(X, Y), theta_eval)
            vals.append(np.linalg.norm(q["hp"], "fro"))
        norms.append(float(np.mean(vals)))
    slope = float(np.polyfit(np.log(np.asarray(ns, dtype=float)), np.log(norms), 1)[0])
    return {"ns": list(ns), "norms": norms, "slope": slope,
            "theta_star": theta_star, "misspecify": misspecify}


def moments_summary(mom: GradMoments) -> dict:
    """JSON-ready scalar summary (norms and traces, no matrices)."""
    return {
        "mu_norm": float(np.linalg.norm(mom.mu)),
        "trace_m2": mom.trace_m2,
        "trace_sigma": mom.trace_sigma,
        "mu_sigma_mu": mom.mu_sigma_mu,
        "sigma_fro": mom.sigma_fro,
        "sigma_spec": mom.sigma_spec,
        "batch_size_for_m": mom.batch_size_for_m,
        "dense": mom.sigma is not None,
    }


def save_moments(path_json, mom: GradMoments, matrices_path=None):
    """Scalar summary as JSON; optional dense matrices to a sidecar .npz."""
    import json

    summary = moments_summary(mom)
    if matrices_path is not None and mom.sigma is not None:
        arrays = {"mu": mom.mu, "sigma": mom.sigma, "m2": mom.m2}
        if mom.m2_batch is not None:
            arrays["m2_batch"] = mom.m2_batch
        np.savez(matrices_path, **arrays)
        summary["matrices"] = str(matrices_path)
    with open(path_json, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
