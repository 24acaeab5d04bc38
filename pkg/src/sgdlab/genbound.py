"""Scale-invariant PAC-Bayes generalization bound.

The posterior is an anisotropic diagonal Gaussian centered at the learned
parameters whose per-coordinate precision is the loss-Hessian diagonal
capped below by the prior precision: nu_j = max(H[j,j], 1/sigma_j^2). The
bound combines an effective-curvature term (log precision ratios over
coordinates where the Hessian crosses the prior precision), a precision-
weighted distance from initialization, and a confidence term, and is then
inverted through the binary relative entropy to an upper bound on the
population 0-1 loss. A per-layer positive rescaling with unit product
changes the Hessian but leaves every bound term unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import netcore
from .errors import InputError


@dataclass
class PriorSpec:
    theta0: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        self.theta0 = np.asarray(self.theta0, dtype=np.float64)
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64)
        if self.sigmas.shape != self.theta0.shape:
            raise InputError("sigmas must match theta0 in shape")
        if not np.all(self.sigmas > 0):
            raise InputError("prior standard deviations must be positive")


@dataclass
class PosteriorSpec:
    theta: np.ndarray
    nus: np.ndarray  # per-coordinate precisions


@dataclass
class AlphaTransform:
    """Per-layer positive scalars with unit product.

    bias_mode "cumulative" scales the layer-l bias by prod_{j<=l} alpha_j,
    which preserves the network function; "flat" applies alpha_l to the
    whole layer, the literal per-layer rule.
    """

    alphas: np.ndarray
    bias_mode: str = "cumulative"

    def __post_init__(self):
        self.alphas = np.asarray(self.alphas, dtype=np.float64)
        if not np.all(self.alphas > 0):
            raise InputError("all layer scales must be positive")
        if abs(float(np.prod(self.alphas)) - 1.0) > 1e-12:
            raise InputError("layer scales must multiply to 1")
        if self.bias_mode not in ("cumulative", "flat"):
            raise InputError("bias_mode must be 'cumulative' or 'flat'")


@dataclass
class BoundReport:
    effective_dim: int
    effective_curvature: float
    weighted_frob: float
    conf_term: float
    kl_rhs: float
    kl_exact: float            # full KL / n + confidence, before dropping the trace slack
    train_loss_mc: float
    pop_loss_upper: float
    vacuous: bool
    test_loss_mc: float = None
    point_train_err: float = None
    point_test_err: float = None
    delta: float = 0.05
    mc_draws: int = 0


def build_posterior(hess_diag, prior: PriorSpec, theta) -> PosteriorSpec:
    """Precisions nu_j = max(H[j,j], 1/sigma_j^2); flat directions keep the prior."""
    hess_diag = np.asarray(hess_diag, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if hess_diag.shape != prior.theta0.shape or theta.shape != prior.theta0.shape:
        raise InputError("hess_diag, theta, and prior must share one shape")
    nus = np.maximum(hess_diag, 1.0 / prior.sigmas ** 2)
    return PosteriorSpec(theta=theta, nus=nus)


def kl_gaussians(q: PosteriorSpec, p: PriorSpec) -> float:
    """KL(Q || P) for diagonal Gaussians, Q given by precisions."""
    if not np.all(q.nus > 0):
        raise InputError("posterior precisions must be positive")
    s2 = p.sigmas ** 2
    trace_term = float(np.sum(1.0 / (s2 * q.nus) - 1.0))
    quad = float(np.sum((q.theta - p.theta0) ** 2 / s2))
    logdet = float(np.sum(np.log(q.nus * s2)))
    return 0.5 * (trace_term + quad + logdet)


def kl_bernoulli(p, q) -> float:
    """Binary relative entropy kl(p || q) with 0 log 0 = 0 conventions."""
    if not (0.0 <= p <= 1.0 and 0.0 <= q <= 1.0):
        raise InputError("kl arguments must lie in [0, 1]")
    if q in (0.0, 1.0):
        return 0.0 if p == q else math.inf
    out = 0.0
    if p > 0.0:
        out += p * math.log(p / q)
    if p < 1.0:
        out += (1.0 - p) * math.log((1.0 - p) / (1.0 - q))
    return out


def kl_inv_upper(p_hat, budget, tol=1e-10):
    """Largest x with kl(p_hat || x) <= budget, by bisection on [p_hat, 1).

    Returns (x, vacuous); vacuous means the budget exceeds the bracket and
    the bound degenerates to 1.
    """
    if budget < 0:
        raise InputError("budget must be nonnegative")
    hi = 1.0 - 1e-15
    if p_hat >= hi:
        return 1.0, True
    if kl_bernoulli(p_hat, hi) <= budget:
        return 1.0, True
    lo = p_hat
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if kl_bernoulli(p_hat, mid) <= budget:
            lo = mid
        else:
            hi = mid
    return lo, False


# ---------------------------------------------------------------------------
# alpha-scale transformation


def param_scale_vector(layout, t: AlphaTransform) -> np.ndarray:
    """Per-parameter diagonal of the induced linear map."""
    if len(t.alphas) != len(layout):
        raise InputError(f"expected {len(layout)} layer scales, got {len(t.alphas)}")
    p = layout[-1].end
    s = np.empty(p)
    cum = 1.0
    for rec, a in zip(layout, t.alphas):
        cum *= a
        s[rec.offset:rec.offset + rec.weight_size] = a
        if rec.bias_offset >= 0:
            s[rec.bias_offset:rec.bias_offset + rec.rows] = cum if t.bias_mode == "cumulative" else a
    return s


def alpha_transform(theta: netcore.ParamVector, t: AlphaTransform) -> netcore.ParamVector:
    s = param_scale_vector(theta.layout, t)
    return netcore.ParamVector(theta.values * s, theta.layout)


def transform_prior(prior: PriorSpec, layout, t: AlphaTransform) -> PriorSpec:
    """Prior pushed through the induced diagonal map: mean and sigmas scale."""
    s = param_scale_vector(layout, t)
    return PriorSpec(theta0=prior.theta0 * s, sigmas=prior.sigmas * s)


def random_alpha(num_layers, rng, spread=0.5, bias_mode="cumulative") -> AlphaTransform:
    """Random positive scales normalized in log space to unit product."""
    logs = rng.uniform(-spread, spread, size=num_layers)
    logs -= logs.mean()
    return AlphaTransform(alphas=np.exp(logs), bias_mode=bias_mode)


# ---------------------------------------------------------------------------
# Hessian diagonal and the bound report


def hessian_diag_estimate(spec, theta, X, y, dense_limit=netcore.DENSE_LIMIT,
                          probes=10000, seed=0):
    """Exact diagonal below the dense limit; Hutchinson-style Rademacher
    probes above it, with a standard-error track."""
    p = spec.param_count()
    if p <= dense_limit:
        return netcore.hessian_diagonal(spec, theta, X, y, dense_limit=dense_limit), None
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 90210]))
    mean = np.zeros(p)
    msq = np.zeros(p)
    for i in range(1, probes + 1):
        z = rng.integers(0, 2, size=p) * 2.0 - 1.0
        est = z * netcore.hessian_vector_product(spec, theta, X, y, z)
        d = est - mean
        mean += d / i
        msq += d * (est - mean)
    stderr = np.sqrt(msq / (probes * max(probes - 1, 1)))
    return mean, stderr


def bound_terms(hess_diag, prior: PriorSpec, theta, n, delta):
    """The three scalar pieces of the bound plus the exact-KL reference."""
    if not 0.0 < delta < 1.0:
        raise InputError("delta must lie in (0, 1)")
    post = build_posterior(hess_diag, prior, theta)
    crossing = np.asarray(hess_diag) > 1.0 / prior.sigmas ** 2
    eff_dim = int(crossing.sum())
    eff_curv = float(np.sum(np.log(post.nus[crossing] * prior.sigmas[crossing] ** 2)))
    wfrob = float(np.sum((np.asarray(theta) - prior.theta0) ** 2 / prior.sigmas ** 2))
    conf = math.log((n + 1) / delta) / n
    kl_rhs = (eff_curv + wfrob) / (2.0 * n) + conf
    kl_exact = kl_gaussians(post, prior) / n + conf
    return post, eff_dim, eff_curv, wfrob, conf, kl_rhs, kl_exact


def _zero_one_error(spec, theta, X, y):
    rep = netcore.forward_loss(spec, theta, X, y)
    pred = rep.logits.argmax(axis=1) if spec.loss == "xent" else (rep.logits[:, 0] > 0)
    return float(np.mean(pred != y))


def bound_report(spec, theta, prior: PriorSpec, ds_train, ds_test=None,
                 delta=0.05, mc_draws=200, seed=0, hess_diag=None,
                 dense_limit=netcore.DENSE_LIMIT) -> BoundReport:
    """Full report: bound terms, Monte-Carlo posterior 0-1 losses, and the
    inverted population-loss upper bound."""
    theta = np.asarray(theta, dtype=np.float64)
    if hess_diag is None:
        hess_diag, _ = hessian_diag_estimate(spec, theta, ds_train.features,
                                             ds_train.labels, dense_limit=dense_limit,
                                             seed=seed)
    n = ds_train.n
    post, eff_dim, eff_curv, wfrob, conf, kl_rhs, kl_exact = bound_terms(
        hess_diag, prior, theta, n, delta)

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 31337]))
    scale = 1.0 / np.sqrt(post.nus)
    train_errs = []
    test_errs = []
    for _ in range(mc_draws):
        draw = theta + scale * rng.standard_normal(theta.size)
        train_errs.append(_zero_one_error(spec, draw, ds_train.features, ds_train.labels))
        if ds_test is not None:
            test_errs.append(_zero_one_error(spec, draw, ds_test.features, ds_test.labels))
    train_mc = float(np.mean(train_errs)) if train_errs else 0.0
    pop_upper, vacuous = kl_inv_upper(train_mc, kl_rhs)
    return BoundReport(
        effective_dim=eff_dim, effective_curvature=eff_curv, weighted_frob=wfrob,
        conf_term=conf, kl_rhs=kl_rhs, kl_exact=kl_exact, train_loss_mc=train_mc,
        pop_loss_upper=pop_upper, vacuous=vacuous,
        test_loss_mc=float(np.mean(test_errs)) if test_errs else None,
        point_train_err=_zero_one_error(spec, theta, ds_train.features, ds_train.labels),
        point_test_err=(_zero_one_error(spec, theta, ds_test.features, ds_test.labels)
                        if ds_test is not None else None),
        delta=delta, mc_draws=mc_draws)


def report_to_dict(rep: BoundReport) -> dict:
    return {k: getattr(rep, k) for k in (
        "effective_dim", "effective_curvature", "weighted_frob", "conf_term",
        "kl_rhs", "kl_exact", "train_loss_mc", "pop_loss_upper", "vacuous",
        "test_loss_mc", "point_train_err", "point_test_err", "delta", "mc_draws")}
