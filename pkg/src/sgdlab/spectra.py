"""Eigen-analysis: dense decomposition, Lanczos over HVPs, subspace overlap.

Principal angles between two column-orthonormal bases U, V are recovered
from the singular values of U^T V; the perturbation bound on the top-s
eigenspace uses 2 min(sqrt(s) ||D||_2, ||D||_F) / (lambda_s - lambda_{s+1}).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGapError, InputError


@dataclass
class SpectrumReport:
    eigenvalues: np.ndarray       # descending
    eigenvectors: np.ndarray      # (p, q) column-orthonormal, or None
    method: str                   # "dense" | "lanczos"
    residuals: np.ndarray         # per reported pair ||A v - lambda v||
    converged: np.ndarray = None  # lanczos only


@dataclass
class SubspaceOverlap:
    cosines: np.ndarray  # descending in [0, 1]
    dims: tuple


@dataclass
class DavisKahanReport:
    s: int
    sin_theta_frob: float
    bound: float
    eigengap: float


def _check_symmetric(H, tol=1e-8):
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise InputError("matrix must be square")
    scale = 1.0 + np.abs(H).max(initial=0.0)
    if np.abs(H - H.T).max(initial=0.0) > tol * scale:
        raise InputError("matrix is not symmetric within tolerance")
    return H


def dense_eigs(H, top_q=None) -> SpectrumReport:
    """Full symmetric eigendecomposition, eigenvalues descending.

    Ties keep the ascending-order index order of the LAPACK output, which
    makes snapshot diffs stable.
    """
    H = _check_symmetric(H)
    w, V = np.linalg.eigh(H)
    order = np.argsort(-w, kind="stable")
    w = w[order]
    V = V[:, order]
    res = np.linalg.norm(H @ V - V * w, axis=0)
    if top_q is not None:
        V = V[:, :top_q]
    return SpectrumReport(eigenvalues=w, eigenvectors=V, method="dense", residuals=res)


def lanczos_top_k(hvp, p, k, iters, seed, residual_tol=1e-6) -> SpectrumReport:
    """Top-k Ritz pairs of a symmetric operator with full reorthogonalization.

    Deterministic given the seed. A breakdown (beta below 1e-14) returns
    early with whatever converged; `converged` flags residuals below
    residual_tol * (1 + |lambda|).
    """
    if not 1 <= k <= iters <= p:
        raise InputError(f"need 1 <= k <= iters <= p; got k={k}, iters={iters}, p={p}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 4242]))
    v = rng.standard_normal(p)
    v /= np.linalg.norm(v)
    V = np.empty((p, iters))
    alphas = np.empty(iters)
    betas = np.empty(max(iters - 1, 0))
    V[:, 0] = v
    steps = 0
    w = None
    for j in range(iters):
        w = np.asarray(hvp(V[:, j]), dtype=np.float64)
        alphas[j] = float(V[:, j] @ w)
        w -= alphas[j] * V[:, j]
        if j > 0:
            w -= betas[j - 1] * V[:, j - 1]
        # full reorthogonalization, twice for good measure
        basis = V[:, :j + 1]
        w -= basis @ (basis.T @ w)
        w -= basis @ (basis.T @ w)
        steps = j + 1
        if j + 1 == iters:
            break
        beta = np.linalg.norm(w)
        if beta < 1e-14:
            break
        betas[j] = beta
        V[:, j + 1] = w / beta

    T = np.diag(alphas[:steps])
    if steps > 1:
        off = betas[:steps - 1]
        T += np.diag(off, 1) + np.diag(off, -1)
    theta, S = np.linalg.eigh(T)
    order = np.argsort(-theta, kind="stable")[:min(k, steps)]
    ritz_vals = theta[order]
    ritz_vecs = V[:, :steps] @ S[:, order]
    res = np.empty(len(order))
    for i in range(len(order)):
        res[i] = np.linalg.norm(hvp(ritz_vecs[:, i]) - ritz_vals[i] * ritz_vecs[:, i])
    converged = res <= residual_tol * (1.0 + np.abs(ritz_vals))
    return SpectrumReport(eigenvalues=ritz_vals, eigenvectors=ritz_vecs,
                          method="lanczos", residuals=res, converged=converged)


def principal_angles(U, V) -> SubspaceOverlap:
    """Cosines of the principal angles: singular values of U^T V, descending."""
    U = np.asarray(U, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if U.ndim != 2 or V.ndim != 2 or U.shape[0] != V.shape[0]:
        raise InputError("bases must be (p, q) with a shared p")
    for name, B in (("U", U), ("V", V)):
        norms = np.linalg.norm(B, axis=0)
        if np.any(norms == 0.0):
            raise InputError(f"{name} contains a zero column")
    U = _reorthonormalize(U)
    V = _reorthonormalize(V)
    svals = np.linalg.svd(U.T @ V, compute_uv=False)
    return SubspaceOverlap(cosines=np.clip(svals, 0.0, 1.0), dims=(U.shape[1], V.shape[1]))


def _reorthonormalize(B, tol=1e-6):
    gram = B.T @ B
    if np.abs(gram - np.eye(B.shape[1])).max() <= tol:
        return B
    Q, _ = np.linalg.qr(B)
    return Q


def davis_kahan(H, Delta, s, base=None, pert=None) -> DavisKahanReport:
    """Top-s eigenspace perturbation of H under H + Delta.

    Precomputed SpectrumReports for H and H + Delta may be passed to avoid
    repeating the decompositions.
    """
    H = _check_symmetric(H)
    Delta = _check_symmetric(Delta)
    if not 1 <= s < H.shape[0]:
        raise InputError("need 1 <= s < p")
    if base is None:
        base = dense_eigs(H)
    if pert is None:
        pert = dense_eigs(H + Delta)
    gap = float(base.eigenvalues[s - 1] - base.eigenvalues[s])
    if gap <= 0.0:
        raise DegenerateGapError(f"eigengap at s={s} is not positive")
    dnorm2 = float(np.linalg.norm(Delta, 2))
    dnormf = float(np.linalg.norm(Delta, "fro"))
    bound = 2.0 * min(np.sqrt(s) * dnorm2, dnormf) / gap
    # ||sin Theta||_F as ||(I - U U^T) V||_F, which stays accurate near 0
    U = base.eigenvectors[:, :s]
    V = pert.eigenvectors[:, :s]
    resid = V - U @ (U.T @ V)
    return DavisKahanReport(s=s, sin_theta_frob=float(np.linalg.norm(resid, "fro")),
                            bound=bound, eigengap=gap)


def layer_loadings(eigvec, layout) -> list:
    """Per-layer squared mass of a unit eigenvector, raw and size-normalized."""
    v = np.asarray(eigvec, dtype=np.float64)
    out = []
    for h, rec in enumerate(layout):
        raw = float(np.sum(v[rec.offset:rec.end] ** 2))
        out.append({"layer": h, "raw": raw, "normalized": raw / rec.size})
    return out


# ---------------------------------------------------------------------------
# CSV snapshot rows: (iteration, rank, eigenvalue, method, residual)

SPECTRUM_FIELDS = ("iteration", "rank", "eigenvalue", "method", "residual")


def append_spectrum_csv(path, iteration, report: SpectrumReport, write_header=False):
    mode = "w" if write_header else "a"
    with open(path, mode, newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if write_header:
            writer.writerow(SPECTRUM_FIELDS)
        for rank, (val, res) in enumerate(zip(report.eigenvalues, report.residuals)):
            writer.writerow([iteration, rank, f"{val:.17g}", report.method, f"{res:.17g}"])
