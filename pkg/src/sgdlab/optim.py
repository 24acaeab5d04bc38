"""SGD variants and the deviation/convergence quantities that describe them.

Four update rules: vanilla constant-step SGD, adaptive step-size SGD with
eta_t = ||mu_t||^2 / (L tr M_t) (the midpoint of the super-martingale
window), diagonal-preconditioned SGD with a_j = mu_j^2 / (L M_jj), and
ADAM without bias correction. Mini-batches are drawn with replacement.
The calculators produce the one-step conditional-expectation interval and
tail parameters, the process-level Bernstein constant, and the horizon
after which the minimum expected gradient norm crosses a target.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import netcore
from .errors import DivergenceError, InputError, NumericError

VARIANTS = ("vanilla", "adaptive", "precond", "adam")


@dataclass
class OptimConfig:
    variant: str = "vanilla"
    eta: float = 0.1
    batch_m: int = 5
    L: float = None          # exact for oracle problems; estimated when None
    gamma1: float = 0.9
    gamma2: float = 0.999
    adam_eps: float = 1e-8
    max_iters: int = 400
    seed: int = 0
    l_estimate_every: int = 10   # power-iteration cadence when L is None
    l_safety: float = 1.1
    keep_gradients: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InputError(f"unknown variant {self.variant!r}")
        if not self.eta > 0:
            raise InputError("eta must be positive")
        if self.batch_m < 1:
            raise InputError("batch size must be at least 1")
        if not (0 < self.gamma1 < 1 and 0 < self.gamma2 < 1):
            raise InputError("decay rates must lie in (0, 1)")
        if self.max_iters < 0:
            raise InputError("max_iters must be nonnegative")


@dataclass
class StepRecord:
    t: int
    loss: float
    grad_norm: float
    cos_prev: float
    delta_f: float
    step_used: float
    halt: str = None
    grad_sg: np.ndarray = field(default=None, repr=False)


@dataclass
class RunTrace:
    records: list
    final_theta: np.ndarray
    final_loss: float
    halted: str = None


@dataclass
class DeviationParams:
    alpha1: float
    beta1: float
    alpha2: float
    alpha3: float
    interval_lo: float
    interval_hi: float


@dataclass
class BernsteinParams:
    eta: float
    mu_bound: float
    sigma_bound: float
    L: float
    L1: float
    m: int
    p: int
    K1: float = 0.0
    K_inner: float = 0.0
    K2: float = 0.0


@dataclass
class HorizonReport:
    T: int               # 2L (f0-f*) (sigma^2/m + eps) / eps^2
    T_conservative: int  # looser variant: 4L (f0-f*) (sigma^2 + eps) / eps^2


@dataclass
class AdamState:
    g: np.ndarray
    nu: np.ndarray


def _cos(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _sample_batch(dataset, m, rng):
    # m == n means the exact full batch; smaller batches draw with replacement
    if m >= dataset.n:
        return dataset.features, dataset.labels
    idx = rng.integers(0, dataset.n, size=m)
    return dataset.features[idx], dataset.labels[idx]


def _full_stats(spec, theta, dataset):
    """Full-set mean gradient, tr M, and diag M in one pass."""
    G = netcore.per_sample_gradients(spec, theta, dataset.features, dataset.labels)
    mu = G.mean(axis=0)
    diag_m = (G ** 2).mean(axis=0)
    return mu, float(diag_m.sum()), diag_m


def adam_update(state: AdamState, g, eta, gamma1, gamma2, eps):
    """One step of the moving-average scheme, no bias correction.

    Returns (new state, parameter increment).
    """
    g_avg = gamma1 * state.g + (1.0 - gamma1) * g
    nu = gamma2 * state.nu + (1.0 - gamma2) * g ** 2
    update = -eta * g_avg / (np.sqrt(nu) + eps)
    return AdamState(g=g_avg, nu=nu), update


def estimate_spectral_norm(spec, theta, dataset, rng, iters=30):
    """Power iteration on the loss Hessian; returns |lambda|_max estimate."""
    p = spec.param_count()
    v = rng.standard_normal(p)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = netcore.hessian_vector_product(spec, theta, dataset.features,
                                           dataset.labels, v)
        lam = float(abs(v @ w))
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
    return lam


class SGDRun:
    """Stateful driver for one run; step() advances a single iteration."""

    def __init__(self, spec, dataset, cfg: OptimConfig, rng, theta0=None):
        self.spec = spec
        self.dataset = dataset
        self.cfg = cfg
        self.rng = rng
        if theta0 is None:
            theta0 = netcore.random_params(spec, rng).values
        self.theta = np.asarray(theta0, dtype=np.float64).copy()
        self.loss = netcore.forward_loss(spec, self.theta, dataset.features,
                                         dataset.labels).loss
        self.prev_g = None
        self.adam = AdamState(g=np.zeros(self.theta.size), nu=np.zeros(self.theta.size))
        self.L_run = cfg.L
        self.t = 0
        self.halted = None

    def _current_L(self):
        if self.cfg.L is not None:
            return self.cfg.L
        if self.L_run is None or self.t % self.cfg.l_estimate_every == 0:
            lam = estimate_spectral_norm(self.spec, self.theta, self.dataset, self.rng)
            cand = self.cfg.l_safety * lam
            self.L_run = cand if self.L_run is None else max(self.L_run, cand)
        return self.L_run

    def step(self) -> StepRecord:
        cfg = self.cfg
        t = self.t
        halt = None
        step_used = cfg.eta
        g = None

        if cfg.variant == "vanilla":
            bx, by = _sample_batch(self.dataset, cfg.batch_m, self.rng)
            g = netcore.batch_gradient(self.spec, self.theta, bx, by)
            theta_next = self.theta - cfg.eta * g
        elif cfg.variant == "adaptive":
            mu, tr_m, _ = _full_stats(self.spec, self.theta, self.dataset)
            mu_sq = float(mu @ mu)
            if tr_m == 0.0:
                halt = "global_min"
            elif mu_sq == 0.0:
                halt = "stationary"
            if halt is not None:
                rec = StepRecord(t=t, loss=self.loss, grad_norm=0.0, cos_prev=0.0,
                                 delta_f=0.0, step_used=0.0, halt=halt)
                self.halted = halt
                self.t += 1
                return rec
            L = self._current_L()
            step_used = mu_sq / (L * tr_m)
            bx, by = _sample_batch(self.dataset, cfg.batch_m, self.rng)
            g = netcore.batch_gradient(self.spec, self.theta, bx, by)
            theta_next = self.theta - step_used * g
        elif cfg.variant == "precond":
            mu, tr_m, diag_m = _full_stats(self.spec, self.theta, self.dataset)
            if tr_m == 0.0:
                rec = StepRecord(t=t, loss=self.loss, grad_norm=0.0, cos_prev=0.0,
                                 delta_f=0.0, step_used=0.0, halt="global_min")
                self.halted = "global_min"
                self.t += 1
                return rec
            L = self._current_L()
            a = np.zeros_like(mu)
            nz = diag_m > 0.0
            a[nz] = mu[nz] ** 2 / (L * diag_m[nz])
            if not np.any(a > 0.0):
                rec = StepRecord(t=t, loss=self.loss, grad_norm=0.0, cos_prev=0.0,
                                 delta_f=0.0, step_used=0.0, halt="stationary")
                self.halted = "stationary"
                self.t += 1
                return rec
            bx, by = _sample_batch(self.dataset, cfg.batch_m, self.rng)
            g = netcore.batch_gradient(self.spec, self.theta, bx, by)
            theta_next = self.theta - a * g
            step_used = float(a.mean())
        else:  # adam
            bx, by = _sample_batch(self.dataset, cfg.batch_m, self.rng)
            g = netcore.batch_gradient(self.spec, self.theta, bx, by)
            self.adam, update = adam_update(self.adam, g, cfg.eta, cfg.gamma1,
                                            cfg.gamma2, cfg.adam_eps)
            theta_next = self.theta + update

        if not np.all(np.isfinite(theta_next)):
            raise DivergenceError("non-finite parameter update",
                                  last_theta=self.theta.copy(), iteration=t)
        try:
            loss_next = netcore.forward_loss(self.spec, theta_next,
                                             self.dataset.features,
                                             self.dataset.labels).loss
        except NumericError as exc:
            raise DivergenceError(f"non-finite loss after update: {exc}",
                                  last_theta=self.theta.copy(), iteration=t) from exc
        rec = StepRecord(
            t=t, loss=self.loss, grad_norm=float(np.linalg.norm(g)),
            cos_prev=_cos(g, self.prev_g) if self.prev_g is not None else 0.0,
            delta_f=loss_next - self.loss, step_used=step_used,
            grad_sg=g.copy() if cfg.keep_gradients else None)
        self.prev_g = g
        self.theta = theta_next
        self.loss = loss_next
        self.t += 1
        return rec


def run_sgd(spec, dataset, cfg: OptimConfig, rng=None, theta0=None,
            snapshot_hook=None) -> RunTrace:
    """Drive a full run; snapshot_hook(t, theta) fires before step t and once
    more after the last step with t = iterations completed."""
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed)]))
    run = SGDRun(spec, dataset, cfg, rng, theta0=theta0)
    records = []
    for t in range(cfg.max_iters):
        if snapshot_hook is not None:
            snapshot_hook(t, run.theta)
        records.append(run.step())
        if run.halted:
            break
    if snapshot_hook is not None:
        snapshot_hook(run.t, run.theta)
    return RunTrace(records=records, final_theta=run.theta, final_loss=run.loss,
                    halted=run.halted)


# ---------------------------------------------------------------------------
# theoretical quantities


def deviation_params(mom, eta, L, m) -> DeviationParams:
    """One-step conditional-expectation interval and tail parameters.

    mom is a GradMoments; all norms come from its matrix-free scalars.
    """
    if m < 1:
        raise InputError("batch size must be at least 1")
    root = math.sqrt(max(mom.mu_sigma_mu, 0.0))
    mu_sq = float(mom.mu @ mom.mu)
    alpha1 = eta * abs(1.0 - eta * L) * root / math.sqrt(m)
    beta1 = eta * abs(1.0 + eta * L) * root / math.sqrt(m)
    alpha2 = eta ** 2 * L / (2.0 * m) * mom.sigma_fro
    alpha3 = eta ** 2 * L / (2.0 * m) * mom.sigma_spec
    lift = 0.5 * eta ** 2 * L * mom.trace_m2
    return DeviationParams(alpha1=alpha1, beta1=beta1, alpha2=alpha2, alpha3=alpha3,
                           interval_lo=-eta * mu_sq - lift,
                           interval_hi=-eta * mu_sq + lift)


def bernstein_k2(eta, mu_bound, sigma_bound, L, L1, m, p) -> BernsteinParams:
    """Process-level sub-exponential constant K2 = max(K1, K_inner)."""
    if min(eta, mu_bound, sigma_bound, L, L1) < 0 or m < 1 or p < 1:
        raise InputError("all bounds must be nonnegative, m and p positive")
    k1 = 2.0 * L1 * eta * (mu_bound + math.sqrt(sigma_bound * p / m))
    k_inner = (eta ** 2 * L * (sigma_bound + mu_bound ** 2)
               + (eta * mu_bound ** 2 / math.sqrt(m)) * (1.0 + eta * L)
               * math.sqrt(sigma_bound)
               + (m + 1) * eta ** 2 * L * sigma_bound / (2.0 * m))
    return BernsteinParams(eta=eta, mu_bound=mu_bound, sigma_bound=sigma_bound,
                           L=L, L1=L1, m=m, p=p, K1=k1, K_inner=k_inner,
                           K2=max(k1, k_inner))


def theorem_horizon(L, f0, fstar, sigma2, m, eps) -> HorizonReport:
    """Iterations until min_t E||grad f||^2 <= eps under the adaptive windows.

    Two published forms of the constant circulate, (2L, sigma^2/m) and the
    looser (4L, sigma^2); both are reported and neither is corrected.
    """
    if eps <= 0:
        raise InputError("eps must be positive")
    gap = max(f0 - fstar, 0.0)
    t_main = math.ceil(2.0 * L * gap * (sigma2 / m + eps) / eps ** 2)
    t_loose = math.ceil(4.0 * L * gap * (sigma2 + eps) / eps ** 2)
    return HorizonReport(T=t_main, T_conservative=t_loose)


# ---------------------------------------------------------------------------
# exhaustive batch enumeration (the conditional-expectation oracle)


def enumerate_expected_delta(loss_fn, grad_rows, theta, step, m) -> float:
    """Exact E[f(theta') - f(theta) | theta] over all n^m ordered batches.

    Batches are drawn with replacement, so the expectation averages over
    ordered index tuples. step is a scalar step size or a diagonal vector.
    """
    grad_rows = np.asarray(grad_rows, dtype=np.float64)
    n = grad_rows.shape[0]
    if n ** m > 200000:
        raise InputError(f"enumeration of {n}^{m} batches is too large")
    f0 = loss_fn(theta)
    total = 0.0
    for combo in itertools.product(range(n), repeat=m):
        g = grad_rows[np.fromiter(combo, dtype=np.int64)].mean(axis=0)
        total += loss_fn(theta - step * g) - f0
    return total / n ** m
