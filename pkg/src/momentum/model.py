"""Hierarchical logistic regression for winner-loser effects.

The win probability of player j's game i is

    p_ij = logistic(alpha_j + beta_j * xtilde_ij + gamma1 * color_ij
                    + gamma2 * rating_diff_ij)

with per-player effects (alpha_j, beta_j) partially pooled through a
bivariate normal with mean (0, mu_beta), scales (tau1, tau2) and correlation
rho. mu_beta is the population-level experiential effect; gamma1 and gamma2
are fixed color and rating-difference effects. Hyperpriors: normal on the
fixed effects and mu_beta, half-normal(0,1) on all scales (inverse-gamma(1,1)
available as a switch), and an LKJ(2) prior on the 2x2 correlation.

Sampling happens on an unconstrained vector: scales are log-transformed, the
correlation goes through atanh, and the per-player effects use a non-centered
parameterization (standardized deviates scaled by the Cholesky factor of the
covariance), which removes most of the funnel geometry these models otherwise
develop.

Unconstrained layout (dimension 2J+9):
    [mu_beta, gamma1, gamma2, log tau1, log tau2, atanh rho,
     log sigma, log sigma_g1, log sigma_g2, u_alpha (J), u_beta (J)]
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import gammaln

from .features import Dataset, ModelObservation

try:
    from numba import njit as _njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

    def _njit(*args, **kwargs):
        def wrap(f):
            return f

        if args and callable(args[0]):
            return args[0]
        return wrap

N_SCALARS = 9
SCALAR_NAMES = (
    "mu_beta", "gamma1", "gamma2", "tau1", "tau2", "rho",
    "sigma", "sigma_g1", "sigma_g2",
)
SCALE_PRIORS = ("half_normal", "inv_gamma")

_LOG_2PI = math.log(2.0 * math.pi)
_HALF_NORMAL_LOGNORM = 0.5 * math.log(2.0 / math.pi)


def dim_for(n_players: int) -> int:
    return 2 * n_players + N_SCALARS


def param_names(n_players: int) -> list[str]:
    names = list(SCALAR_NAMES)
    names += [f"alpha[{j}]" for j in range(n_players)]
    names += [f"beta[{j}]" for j in range(n_players)]
    return names


@dataclass
class ModelParams:
    """Constrained parameter set; alpha/beta hold one entry per player.

    Scales may be zero here (useful for degenerate synthetic truths); the
    density functions require them strictly positive and raise otherwise.
    """

    mu_beta: float
    gamma1: float
    gamma2: float
    tau1: float
    tau2: float
    rho: float
    sigma: float
    sigma_g1: float
    sigma_g2: float
    alpha: np.ndarray = field(default_factory=lambda: np.zeros(0))
    beta: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if self.alpha.shape != self.beta.shape or self.alpha.ndim != 1:
            raise ValueError("alpha and beta must be 1-d arrays of equal length")
        for name in ("tau1", "tau2", "sigma", "sigma_g1", "sigma_g2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not -1.0 < self.rho < 1.0:
            raise ValueError("rho must lie strictly inside (-1, 1)")

    @property
    def n_players(self) -> int:
        return self.alpha.shape[0]


def params_to_vector(p: ModelParams) -> np.ndarray:
    """Constrained-scale flat vector in `param_names` order."""
    return np.concatenate((
        [p.mu_beta, p.gamma1, p.gamma2, p.tau1, p.tau2, p.rho,
         p.sigma, p.sigma_g1, p.sigma_g2],
        p.alpha, p.beta,
    ))


def vector_to_params(v: np.ndarray, n_players: int) -> ModelParams:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (dim_for(n_players),):
        raise ValueError(f"expected vector of length {dim_for(n_players)}, got {v.shape}")
    return ModelParams(
        mu_beta=float(v[0]), gamma1=float(v[1]), gamma2=float(v[2]),
        tau1=float(v[3]), tau2=float(v[4]), rho=float(v[5]),
        sigma=float(v[6]), sigma_g1=float(v[7]), sigma_g2=float(v[8]),
        alpha=v[N_SCALARS:N_SCALARS + n_players].copy(),
        beta=v[N_SCALARS + n_players:].copy(),
    )


# --- Stable logistic helpers ----------------------------------------------

def logistic(x):
    """1/(1+exp(-x)), stable for |x| up to and beyond 700 (no overflow)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    with np.errstate(over="ignore"):
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def log_sigmoid(x):
    """log(logistic(x)) as min(x, 0) - log(1 + exp(-|x|)); never overflows."""
    x = np.asarray(x, dtype=np.float64)
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    if out.ndim == 0:
        return float(out)
    return out


# --- Constraining transform -------------------------------------------------

def constrain(u: np.ndarray, n_players: int) -> tuple[ModelParams, float]:
    """Map an unconstrained vector to constrained parameters.

    Scales go through exp, the correlation through tanh, and the per-player
    standardized deviates through (0, mu_beta) + L u_j with L the lower
    Cholesky factor of the effect covariance. Returns the parameters together
    with the log absolute determinant of the full map's Jacobian.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (dim_for(n_players),):
        raise ValueError(f"expected vector of length {dim_for(n_players)}, got {u.shape}")
    mu_beta, gamma1, gamma2 = u[0], u[1], u[2]
    lt1, lt2, arho, ls, lsg1, lsg2 = u[3], u[4], u[5], u[6], u[7], u[8]
    # clamp float saturation of exp/tanh so extreme proposals map to a huge
    # negative density (rejected by the sampler) instead of raising
    tiny = 5e-324
    tau1, tau2 = max(math.exp(lt1), tiny), max(math.exp(lt2), tiny)
    rho = math.tanh(arho)
    if abs(rho) >= 1.0:
        rho = math.copysign(math.nextafter(1.0, 0.0), rho)
    one_m_rho2 = 1.0 - rho * rho
    s = math.sqrt(one_m_rho2)
    u1 = u[N_SCALARS:N_SCALARS + n_players]
    u2 = u[N_SCALARS + n_players:]

    alpha = tau1 * u1
    beta = mu_beta + tau2 * (rho * u1 + s * u2)

    log_1m_rho2 = math.log(one_m_rho2) if one_m_rho2 > 0 else -math.inf
    log_jacobian = (
        lt1 + lt2 + ls + lsg1 + lsg2          # exp maps of the five scales
        + log_1m_rho2                         # tanh map of the correlation
        + n_players * (lt1 + lt2 + 0.5 * log_1m_rho2)  # |det L| per player
    )
    params = ModelParams(
        mu_beta=float(mu_beta), gamma1=float(gamma1), gamma2=float(gamma2),
        tau1=tau1, tau2=tau2, rho=rho,
        sigma=max(math.exp(ls), tiny),
        sigma_g1=max(math.exp(lsg1), tiny),
        sigma_g2=max(math.exp(lsg2), tiny),
        alpha=alpha, beta=beta,
    )
    return params, log_jacobian


def unconstrain(p: ModelParams) -> np.ndarray:
    """Inverse of :func:`constrain` (requires strictly positive scales)."""
    for name in ("tau1", "tau2", "sigma", "sigma_g1", "sigma_g2"):
        if getattr(p, name) <= 0:
            raise ValueError(f"{name} must be positive to unconstrain")
    rho = p.rho
    s = math.sqrt(1.0 - rho * rho)
    u1 = p.alpha / p.tau1
    u2 = (p.beta - p.mu_beta - p.tau2 * rho * u1) / (p.tau2 * s)
    head = [p.mu_beta, p.gamma1, p.gamma2,
            math.log(p.tau1), math.log(p.tau2), math.atanh(rho),
            math.log(p.sigma), math.log(p.sigma_g1), math.log(p.sigma_g2)]
    return np.concatenate((head, u1, u2))


# --- Densities ---------------------------------------------------------------

def _half_normal_logpdf(x: float) -> float:
    if x <= 0:
        raise ValueError("half-normal support is x > 0")
    return _HALF_NORMAL_LOGNORM - 0.5 * x * x


def _inv_gamma_logpdf(x: float) -> float:
    # shape 1, scale 1
    if x <= 0:
        raise ValueError("inverse-gamma support is x > 0")
    return -2.0 * math.log(x) - 1.0 / x


@lru_cache(maxsize=8)
def _lkj_log_norm(eta: float) -> float:
    return float(0.5 * math.log(math.pi) + gammaln(eta) - gammaln(eta + 0.5))


def lkj_2x2_logpdf(rho: float, eta: float = 2.0) -> float:
    """Log density of the correlation of a 2x2 LKJ(eta) matrix, normalized
    over rho in (-1, 1)."""
    one_m_rho2 = 1.0 - rho * rho
    if one_m_rho2 <= 0:
        return -math.inf
    return (eta - 1.0) * math.log(one_m_rho2) - _lkj_log_norm(eta)


def log_prior(p: ModelParams, scale_prior: str = "half_normal",
              lkj_eta: float = 2.0) -> float:
    """Joint log prior density at constrained parameters.

    Per-player effects get the bivariate normal given the hyperparameters;
    mu_beta and the fixed effects get their normal hyperpriors; the five
    scales get half-normal(0,1) or inverse-gamma(1,1); the correlation gets
    LKJ(eta).
    """
    if scale_prior not in SCALE_PRIORS:
        raise ValueError(f"unknown scale prior {scale_prior!r}")
    scale_lp = _half_normal_logpdf if scale_prior == "half_normal" else _inv_gamma_logpdf
    for name in ("tau1", "tau2", "sigma", "sigma_g1", "sigma_g2"):
        if getattr(p, name) <= 0:
            raise ValueError(f"{name} must be positive in log_prior")

    one_m_rho2 = 1.0 - p.rho * p.rho
    s = math.sqrt(one_m_rho2)
    # bivariate normal of (alpha_j, beta_j) via the Cholesky solve; degenerate
    # scales push the quadratic form to +inf, i.e. a log density of -inf
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        z1 = p.alpha / p.tau1
        z2 = (p.beta - p.mu_beta - p.tau2 * p.rho * z1) / (p.tau2 * s)
    J = p.n_players
    lp = (-J * (_LOG_2PI + math.log(p.tau1) + math.log(p.tau2) + 0.5 * math.log(one_m_rho2))
          - 0.5 * float(z1 @ z1 + z2 @ z2))

    lp += -0.5 * _LOG_2PI - math.log(p.sigma) - 0.5 * (p.mu_beta / p.sigma) ** 2
    lp += -0.5 * _LOG_2PI - math.log(p.sigma_g1) - 0.5 * (p.gamma1 / p.sigma_g1) ** 2
    lp += -0.5 * _LOG_2PI - math.log(p.sigma_g2) - 0.5 * (p.gamma2 / p.sigma_g2) ** 2
    for name in ("tau1", "tau2", "sigma", "sigma_g1", "sigma_g2"):
        lp += scale_lp(getattr(p, name))
    lp += lkj_2x2_logpdf(p.rho, lkj_eta)
    return float(lp)


def log_likelihood(p: ModelParams, data: Dataset) -> float:
    """Bernoulli log likelihood, numerically stable for |linear predictor|
    well past 700."""
    a = data.arrays
    idx = a["player_index"]
    if p.n_players != len(data.player_ids):
        raise ValueError("parameter/player dimension mismatch")
    eta = p.alpha[idx] + p.beta[idx] * a["xtilde"] \
        + p.gamma1 * a["z_color"] + p.gamma2 * a["z_rating_diff"]
    # y*eta - softplus(eta), softplus(eta) = max(eta,0) + log(1+exp(-|eta|))
    return float(a["y"] @ eta - np.maximum(eta, 0.0).sum()
                 - np.log1p(np.exp(-np.abs(eta))).sum())


def win_probability(p: ModelParams, obs: ModelObservation) -> float:
    """Model win probability for one observation."""
    j = obs.player_index
    if not 0 <= j < p.n_players:
        raise ValueError(f"player_index {j} out of range")
    eta = (p.alpha[j] + p.beta[j] * obs.xtilde
           + p.gamma1 * obs.z_color + p.gamma2 * obs.z_rating_diff)
    return float(logistic(eta))


def effect_to_delta_win_prob(beta_j: float, xbar_j: float,
                             baseline_logodds: float = 0.0) -> float:
    """Win-probability change from a fully-lost to a fully-won history window.

    For n=1 this is the previous-game loss -> win contrast; for n>1 it is the
    full loss-streak -> win-streak contrast (the centered ratio moves from
    -xbar to 1-xbar), everything else held fixed.
    """
    if not 0.0 <= xbar_j <= 1.0:
        raise ValueError("xbar_j must lie in [0, 1]")
    hi = logistic(baseline_logodds + beta_j * (1.0 - xbar_j))
    lo = logistic(baseline_logodds - beta_j * xbar_j)
    return float(hi - lo)


# --- Log posterior with analytic gradient ------------------------------------

@_njit(cache=True)
def _eta_fill(alpha, beta, g1, g2, xt, zc, zd, idx, eta, neg_abs):  # pragma: no cover
    for i in range(eta.shape[0]):
        j = idx[i]
        e = alpha[j] + beta[j] * xt[i] + g1 * zc[i] + g2 * zd[i]
        eta[i] = e
        neg_abs[i] = -e if e >= 0.0 else e


@_njit(cache=True)
def _accum(y, eta, q, log1q, xt, zc, zd, idx, galpha, gbeta):  # pragma: no cover
    # q = exp(-|eta|), log1q = log(1+q); p = logistic(eta) branchlessly
    ll = 0.0
    gg1 = 0.0
    gg2 = 0.0
    for i in range(y.shape[0]):
        e = eta[i]
        t = 1.0 / (1.0 + q[i])
        p = t if e >= 0.0 else q[i] * t
        ll += y[i] * e - log1q[i]
        if e > 0.0:
            ll -= e
        r = y[i] - p
        j = idx[i]
        galpha[j] += r
        gbeta[j] += r * xt[i]
        gg1 += r * zc[i]
        gg2 += r * zd[i]
    return ll, gg1, gg2


class LogPosterior:
    """Callable computing the unconstrained-space log posterior and its exact
    analytic gradient in one pass over the data.

    The value is assembled as log_likelihood + log_prior + log|Jacobian| at
    the constrained point, so it decomposes exactly against the standalone
    density functions. Hot-path buffers are preallocated; transcendentals run
    through numpy's vectorized kernels and the gather/accumulate passes are
    JIT-fused when numba is present.
    """

    def __init__(self, data: Dataset, scale_prior: str = "half_normal",
                 lkj_eta: float = 2.0, flip_xtilde: bool = False):
        if scale_prior not in SCALE_PRIORS:
            raise ValueError(f"unknown scale prior {scale_prior!r}")
        a = data.arrays
        self.n_players = len(data.player_ids)
        self.dim = dim_for(self.n_players)
        self.scale_prior = scale_prior
        self.lkj_eta = lkj_eta
        self._y = np.ascontiguousarray(a["y"], dtype=np.int8)
        xt = a["xtilde"]
        self._xt = np.ascontiguousarray(-xt if flip_xtilde else xt)
        self._zc = np.ascontiguousarray(a["z_color"], dtype=np.int8)
        self._zd = np.ascontiguousarray(a["z_rating_diff"])
        self._idx = np.ascontiguousarray(a["player_index"], dtype=np.int32)
        n = self._y.shape[0]
        self._eta = np.empty(n)
        self._neg_abs = np.empty(n)
        self._log1q = np.empty(n)

    def names(self) -> list[str]:
        return param_names(self.n_players)

    def constrain_vector(self, u: np.ndarray) -> np.ndarray:
        """Constrained-scale vector for one unconstrained draw."""
        params, _ = constrain(u, self.n_players)
        return params_to_vector(params)

    def __call__(self, u: np.ndarray) -> tuple[float, np.ndarray]:
        J = self.n_players
        params, log_jac = constrain(u, J)
        mu_beta, g1, g2 = params.mu_beta, params.gamma1, params.gamma2
        tau1, tau2, rho = params.tau1, params.tau2, params.rho
        sigma, sg1, sg2 = params.sigma, params.sigma_g1, params.sigma_g2
        one_m_rho2 = 1.0 - rho * rho
        s = math.sqrt(one_m_rho2)
        u1 = u[N_SCALARS:N_SCALARS + J]
        u2 = u[N_SCALARS + J:]
        alpha, beta = params.alpha, params.beta

        # likelihood value and gradient w.r.t. (alpha, beta, gamma1, gamma2)
        eta, neg_abs, log1q = self._eta, self._neg_abs, self._log1q
        galpha = np.zeros(J)
        gbeta = np.zeros(J)
        if _HAVE_NUMBA:
            _eta_fill(alpha, beta, g1, g2, self._xt, self._zc, self._zd,
                      self._idx, eta, neg_abs)
            q = np.exp(neg_abs, out=neg_abs)   # argument <= 0: cannot overflow
            np.add(q, 1.0, out=log1q)
            np.log(log1q, out=log1q)
            ll, gg1, gg2 = _accum(self._y, eta, q, log1q, self._xt, self._zc,
                                  self._zd, self._idx, galpha, gbeta)
        else:
            eta[:] = alpha[self._idx]
            eta += beta[self._idx] * self._xt
            eta += g1 * self._zc
            eta += g2 * self._zd
            np.negative(np.abs(eta), out=neg_abs)
            q = np.exp(neg_abs, out=neg_abs)
            np.add(q, 1.0, out=log1q)
            np.log(log1q, out=log1q)
            prob = np.where(eta >= 0.0, 1.0 / (1.0 + q), q / (1.0 + q))
            ll = float(self._y @ eta - np.maximum(eta, 0.0).sum() - log1q.sum())
            resid = self._y - prob
            galpha += np.bincount(self._idx, weights=resid, minlength=J)
            gbeta += np.bincount(self._idx, weights=resid * self._xt, minlength=J)
            gg1 = float(resid @ self._zc)
            gg2 = float(resid @ self._zd)

        grad = np.zeros(self.dim)
        # chain rule of the likelihood through the non-centered map
        grad[0] = gbeta.sum()
        grad[1] = gg1
        grad[2] = gg2
        grad[3] = float(galpha @ alpha)
        grad[4] = float(gbeta @ (beta - mu_beta))
        grad[5] = tau2 * float(gbeta @ (u1 * one_m_rho2 - rho * s * u2))
        grad[N_SCALARS:N_SCALARS + J] = galpha * tau1 + gbeta * (tau2 * rho)
        grad[N_SCALARS + J:] = gbeta * (tau2 * s)

        # prior gradient, expressed directly in the unconstrained space
        grad[N_SCALARS:N_SCALARS + J] -= u1
        grad[N_SCALARS + J:] -= u2
        grad[0] += -mu_beta / sigma ** 2
        grad[6] += mu_beta ** 2 / sigma ** 2 - 1.0
        grad[1] += -g1 / sg1 ** 2
        grad[7] += g1 ** 2 / sg1 ** 2 - 1.0
        grad[2] += -g2 / sg2 ** 2
        grad[8] += g2 ** 2 / sg2 ** 2 - 1.0
        if self.scale_prior == "half_normal":
            for pos, val in ((3, tau1), (4, tau2), (6, sigma), (7, sg1), (8, sg2)):
                grad[pos] += 1.0 - val * val
        else:
            for pos, val in ((3, tau1), (4, tau2), (6, sigma), (7, sg1), (8, sg2)):
                grad[pos] += 1.0 / val - 1.0
        grad[5] += -2.0 * self.lkj_eta * rho

        value = ll + log_prior(params, self.scale_prior, self.lkj_eta) + log_jac
        return value, grad
