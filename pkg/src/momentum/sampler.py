"""Gradient-based MCMC: dynamic-trajectory HMC with dual-averaging warmup.

The transition is the no-U-turn scheme: the trajectory doubles in a random
direction until the endpoints start moving toward each other (or a depth cap
is hit), and the next state is drawn from the whole trajectory with
multinomial weights. Warmup adapts the step size by dual averaging toward a
target acceptance statistic and estimates a diagonal mass matrix over
expanding windows; sampling runs with the adaptation frozen.

Chains are independent: chain k's generator is derived from (seed, k), so
results are bit-reproducible for a fixed (seed, config, data) regardless of
execution order.
"""

from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtri

from ._rng import derived_rng

DIVERGENCE_THRESHOLD = 1000.0  # energy error that flags a divergent leapfrog
_DA_GAMMA = 0.05
_DA_T0 = 10.0
_DA_KAPPA = 0.75


@dataclass(frozen=True)
class SamplerConfig:
    """Defaults reproduce the standard fit setup: 4 chains, 1000/1000."""

    chains: int = 4
    warmup_iters: int = 1000
    sampling_iters: int = 1000
    target_accept: float = 0.8
    max_tree_depth: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.chains < 1 or self.warmup_iters < 1 or self.sampling_iters < 1:
            raise ValueError("chains and iteration counts must be positive")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")


@dataclass
class PosteriorDraws:
    """Post-warmup draws plus adaptation metadata.

    `draws` has shape (chains, sampling_iters, n_params) on the constrained
    scale when the sampled space was transformed, otherwise the raw space.
    """

    draws: np.ndarray
    names: list[str]
    divergences: np.ndarray       # (chains, iters) bool
    tree_depths: np.ndarray       # (chains, iters) int8
    step_sizes: np.ndarray        # per-chain adapted step size
    config: SamplerConfig
    warnings: list[str] = field(default_factory=list)

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_iters(self) -> int:
        return self.draws.shape[1]

    def column(self, name: str) -> np.ndarray:
        """(chains, iters) matrix for one named parameter."""
        return self.draws[:, :, self.names.index(name)]

    def flat(self, name: str) -> np.ndarray:
        return self.column(name).reshape(-1)

    def flat_matrix(self) -> np.ndarray:
        """(chains*iters, n_params), chain-major order."""
        return self.draws.reshape(-1, self.draws.shape[2])


# --- Leapfrog and tree building ----------------------------------------------

class _TreeAccum:
    """Per-iteration accumulators shared down the recursion."""

    __slots__ = ("sum_alpha", "n_alpha", "divergent")

    def __init__(self) -> None:
        self.sum_alpha = 0.0
        self.n_alpha = 0
        self.divergent = False


class _Node:
    """A built subtree: time-ordered endpoints, a sampled point, and its
    total multinomial weight relative to the initial energy."""

    __slots__ = ("u_minus", "r_minus", "grad_minus", "u_plus", "r_plus",
                 "grad_plus", "sample_u", "sample_logp", "sample_grad",
                 "log_sum_w", "valid")

    def __init__(self, u_minus, r_minus, grad_minus, u_plus, r_plus, grad_plus,
                 sample_u, sample_logp, sample_grad, log_sum_w, valid):
        self.u_minus = u_minus
        self.r_minus = r_minus
        self.grad_minus = grad_minus
        self.u_plus = u_plus
        self.r_plus = r_plus
        self.grad_plus = grad_plus
        self.sample_u = sample_u
        self.sample_logp = sample_logp
        self.sample_grad = sample_grad
        self.log_sum_w = log_sum_w
        self.valid = valid


def _leapfrog(f, u, r, grad, eps, inv_mass):
    r_half = r + 0.5 * eps * grad
    u_new = u + eps * (inv_mass * r_half)
    logp_new, grad_new = f(u_new)
    r_new = r_half + 0.5 * eps * grad_new
    return u_new, r_new, grad_new, logp_new


def _energy_diff(logp, r, inv_mass, h0: float) -> float:
    if not math.isfinite(logp):
        return -math.inf
    with np.errstate(over="ignore", invalid="ignore"):
        h = logp - 0.5 * float(r @ (inv_mass * r))
    if not math.isfinite(h):
        return -math.inf
    return h - h0


def _no_uturn(node: _Node, inv_mass) -> bool:
    du = node.u_plus - node.u_minus
    return (float(du @ (inv_mass * node.r_minus)) >= 0.0
            and float(du @ (inv_mass * node.r_plus)) >= 0.0)


def _build_tree(f, u, r, grad, direction, depth, eps, inv_mass, h0, rng,
                acc: _TreeAccum) -> _Node:
    if depth == 0:
        u1, r1, grad1, logp1 = _leapfrog(f, u, r, grad, direction * eps, inv_mass)
        d_h = _energy_diff(logp1, r1, inv_mass, h0)
        acc.sum_alpha += min(1.0, math.exp(d_h)) if d_h < 0 else 1.0
        acc.n_alpha += 1
        divergent = d_h < -DIVERGENCE_THRESHOLD
        if divergent:
            acc.divergent = True
        return _Node(u1, r1, grad1, u1, r1, grad1, u1, logp1, grad1,
                     d_h, not divergent)

    first = _build_tree(f, u, r, grad, direction, depth - 1, eps, inv_mass,
                        h0, rng, acc)
    if not first.valid:
        return first
    if direction == 1:
        u0, r0, g0 = first.u_plus, first.r_plus, first.grad_plus
    else:
        u0, r0, g0 = first.u_minus, first.r_minus, first.grad_minus
    second = _build_tree(f, u0, r0, g0, direction, depth - 1, eps, inv_mass,
                         h0, rng, acc)

    log_sum_w = np.logaddexp(first.log_sum_w, second.log_sum_w)
    # multinomial draw between the two halves
    if math.log(rng.random() + 1e-300) < second.log_sum_w - log_sum_w:
        sample = (second.sample_u, second.sample_logp, second.sample_grad)
    else:
        sample = (first.sample_u, first.sample_logp, first.sample_grad)
    if direction == 1:
        node = _Node(first.u_minus, first.r_minus, first.grad_minus,
                     second.u_plus, second.r_plus, second.grad_plus,
                     *sample, log_sum_w, second.valid)
    else:
        node = _Node(second.u_minus, second.r_minus, second.grad_minus,
                     first.u_plus, first.r_plus, first.grad_plus,
                     *sample, log_sum_w, second.valid)
    if node.valid:
        node.valid = _no_uturn(node, inv_mass)
    return node


def _nuts_transition(f, u, logp, grad, eps, inv_mass, mass_chol, max_depth, rng):
    """One trajectory: returns (u, logp, grad, divergent, depth, accept_stat)."""
    r0 = mass_chol * rng.standard_normal(u.shape[0])
    h0 = logp - 0.5 * float(r0 @ (inv_mass * r0))

    tree = _Node(u, r0, grad, u, r0, grad, u, logp, grad, 0.0, True)
    acc = _TreeAccum()
    depth = 0
    for depth in range(1, max_depth + 1):
        direction = 1 if rng.integers(0, 2) else -1
        if direction == 1:
            sub = _build_tree(f, tree.u_plus, tree.r_plus, tree.grad_plus,
                              1, depth - 1, eps, inv_mass, h0, rng, acc)
        else:
            sub = _build_tree(f, tree.u_minus, tree.r_minus, tree.grad_minus,
                              -1, depth - 1, eps, inv_mass, h0, rng, acc)
        if not sub.valid:
            break
        # biased progressive sampling toward the fresh subtree
        attempt = math.log(rng.random() + 1e-300)
        if attempt < sub.log_sum_w - tree.log_sum_w:
            tree.sample_u = sub.sample_u
            tree.sample_logp = sub.sample_logp
            tree.sample_grad = sub.sample_grad
        tree.log_sum_w = np.logaddexp(tree.log_sum_w, sub.log_sum_w)
        if direction == 1:
            tree.u_plus, tree.r_plus, tree.grad_plus = sub.u_plus, sub.r_plus, sub.grad_plus
        else:
            tree.u_minus, tree.r_minus, tree.grad_minus = sub.u_minus, sub.r_minus, sub.grad_minus
        if not _no_uturn(tree, inv_mass):
            break
    accept_stat = acc.sum_alpha / max(acc.n_alpha, 1)
    return (tree.sample_u, tree.sample_logp, tree.sample_grad,
            acc.divergent, depth, accept_stat)


def _find_reasonable_eps(f, u, logp, grad, inv_mass, mass_chol, rng) -> float:
    """Double/halve the step size until the one-step acceptance crosses 1/2."""
    eps = 1.0
    r0 = mass_chol * rng.standard_normal(u.shape[0])
    h0 = logp - 0.5 * float(r0 @ (inv_mass * r0))
    _, r1, _, logp1 = _leapfrog(f, u, r0, grad, eps, inv_mass)
    d_h = _energy_diff(logp1, r1, inv_mass, h0)
    direction = 1 if d_h > math.log(0.5) else -1
    for _ in range(60):
        eps *= 2.0 ** direction
        _, r1, _, logp1 = _leapfrog(f, u, r0, grad, eps, inv_mass)
        d_h = _energy_diff(logp1, r1, inv_mass, h0)
        if direction == 1 and d_h <= math.log(0.5):
            break
        if direction == -1 and d_h >= math.log(0.5):
            break
    return min(max(eps, 1e-10), 1e7)


def _mass_window_ends(warmup: int) -> tuple[list[int], int]:
    """Iteration indices (1-based) at which the mass matrix is re-estimated.

    75/25/50 initial, first-window, and terminal buffer sizes at 1000 warmup
    iterations, scaled proportionally otherwise; windows double in size and
    the last one absorbs the remainder.
    """
    scale = warmup / 1000.0
    init_buf = max(1, round(75 * scale))
    term_buf = max(1, round(50 * scale))
    base = max(1, round(25 * scale))
    if warmup < 20 or init_buf + base + term_buf > warmup:
        # too short to estimate a metric: step-size adaptation only
        return [], warmup
    ends = []
    start, size = init_buf, base
    while start < warmup - term_buf:
        end = start + size
        size *= 2
        if end + size > warmup - term_buf:
            end = warmup - term_buf
        ends.append(end)
        start = end
    return ends, init_buf


class _DualAveraging:
    def __init__(self, eps0: float, target: float):
        self.mu = math.log(10.0 * eps0)
        self.target = target
        self.log_eps = math.log(eps0)
        self.log_eps_bar = 0.0
        self.h_bar = 0.0
        self.count = 0

    def update(self, accept_stat: float) -> float:
        self.count += 1
        w = 1.0 / (self.count + _DA_T0)
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept_stat)
        self.log_eps = self.mu - math.sqrt(self.count) / _DA_GAMMA * self.h_bar
        eta = self.count ** (-_DA_KAPPA)
        self.log_eps_bar = eta * self.log_eps + (1.0 - eta) * self.log_eps_bar
        return math.exp(self.log_eps)

    def adapted(self) -> float:
        return math.exp(self.log_eps_bar)


class _RunningVariance:
    def __init__(self, dim: int):
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def add(self, x: np.ndarray) -> None:
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)

    def regularized(self) -> np.ndarray | None:
        if self.count < 2:
            return None
        var = self.m2 / (self.count - 1)
        n = self.count
        return (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))


def _init_chain(f, dim, rng, attempts: int = 100):
    for _ in range(attempts):
        u = rng.uniform(-2.0, 2.0, dim)
        logp, grad = f(u)
        if math.isfinite(logp) and np.all(np.isfinite(grad)):
            return u, logp, grad
    raise RuntimeError(
        f"no finite initialization found in {attempts} uniform(-2,2) draws; "
        "the log posterior may be improper or mis-scaled")


def _run_chain(f, dim, config: SamplerConfig, chain: int):
    rng = derived_rng(config.seed, chain)
    u, logp, grad = _init_chain(f, dim, rng)

    inv_mass = np.ones(dim)
    mass_chol = np.ones(dim)
    eps = _find_reasonable_eps(f, u, logp, grad, inv_mass, mass_chol, rng)
    da = _DualAveraging(eps, config.target_accept)
    window_ends, init_buf = _mass_window_ends(config.warmup_iters)
    window_ends_set = set(window_ends)
    accum = _RunningVariance(dim)

    for it in range(1, config.warmup_iters + 1):
        u, logp, grad, _, _, accept_stat = _nuts_transition(
            f, u, logp, grad, eps, inv_mass, mass_chol, config.max_tree_depth, rng)
        eps = da.update(accept_stat)
        if window_ends and it > init_buf:
            accum.add(u)
        if it in window_ends_set:
            var = accum.regularized()
            if var is not None:
                inv_mass = var
                mass_chol = 1.0 / np.sqrt(var)
                accum = _RunningVariance(dim)
                eps = _find_reasonable_eps(f, u, logp, grad, inv_mass, mass_chol, rng)
                da = _DualAveraging(eps, config.target_accept)
    eps = da.adapted()

    draws = np.empty((config.sampling_iters, dim))
    divergent = np.zeros(config.sampling_iters, dtype=bool)
    depths = np.zeros(config.sampling_iters, dtype=np.int8)
    for it in range(config.sampling_iters):
        u, logp, grad, div, depth, _ = _nuts_transition(
            f, u, logp, grad, eps, inv_mass, mass_chol, config.max_tree_depth, rng)
        draws[it] = u
        divergent[it] = div
        depths[it] = depth
    return draws, divergent, depths, eps


def sample(
    logpost_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    dim: int,
    config: SamplerConfig,
    *,
    transform: Callable[[np.ndarray], np.ndarray] | None = None,
    names: Sequence[str] | None = None,
) -> PosteriorDraws:
    """Run independent chains of the no-U-turn transition.

    `logpost_grad(u) -> (value, gradient)` defines the target on an
    unconstrained space. When `transform` is given, each stored draw is
    mapped through it (e.g. onto the constrained parameter scale) and `names`
    must label the transformed coordinates.
    """
    chain_draws = []
    chain_div = []
    chain_depths = []
    step_sizes = np.zeros(config.chains)
    for chain in range(config.chains):
        draws, div, depths, eps = _run_chain(logpost_grad, dim, config, chain)
        if transform is not None:
            draws = np.stack([transform(row) for row in draws])
        chain_draws.append(draws)
        chain_div.append(div)
        chain_depths.append(depths)
        step_sizes[chain] = eps

    all_draws = np.stack(chain_draws)
    divergences = np.stack(chain_div)
    depths = np.stack(chain_depths)
    out_names = list(names) if names is not None else [f"p{i}" for i in range(all_draws.shape[2])]
    if len(out_names) != all_draws.shape[2]:
        raise ValueError("names length does not match draw dimension")

    warns = []
    div_frac = float(divergences.mean())
    if div_frac > 0.10:
        warns.append(f"{div_frac:.1%} of transitions were divergent; "
                     "estimates may be unreliable")
    return PosteriorDraws(all_draws, out_names, divergences, depths,
                          step_sizes, config, warns)


# --- Convergence diagnostics --------------------------------------------------

def _split_chains(x: np.ndarray) -> np.ndarray:
    m, n = x.shape
    half = n // 2
    return np.vstack([x[:, :half], x[:, n - half:]])


def split_rhat(x: np.ndarray) -> float:
    """Split-chain potential scale reduction factor.

    `x` is (chains, iters). Chains are halved, and the between/within
    variance ratio of the 2m half-chains is folded into the usual statistic.
    Returns NaN (with a warning) when the within-chain variance vanishes.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 4:
        raise ValueError("need at least 2 chains and 4 iterations")
    s = _split_chains(x)
    n = s.shape[1]
    chain_means = s.mean(axis=1)
    chain_vars = s.var(axis=1, ddof=1)
    w = chain_vars.mean()
    b = n * chain_means.var(ddof=1)
    if w <= 0.0:
        warnings.warn("split_rhat: zero within-chain variance", RuntimeWarning)
        return math.nan
    var_plus = (n - 1) / n * w + b / n
    return float(math.sqrt(var_plus / w))


def _autocovariance(row: np.ndarray) -> np.ndarray:
    """Biased (1/n) autocovariance for all lags via FFT."""
    n = row.shape[0]
    centered = row - row.mean()
    size = 1
    while size < 2 * n:
        size <<= 1
    fft = np.fft.rfft(centered, size)
    acov = np.fft.irfft(fft * np.conj(fft), size)[:n].real
    return acov / n


def _ess_base(x: np.ndarray) -> float:
    """ESS of split chains with Geyer initial-monotone truncation."""
    s = _split_chains(np.asarray(x, dtype=np.float64))
    m, n = s.shape
    chain_vars = s.var(axis=1, ddof=1)
    w = chain_vars.mean()
    if w <= 0.0 or not math.isfinite(w):
        return math.nan
    b = n * s.mean(axis=1).var(ddof=1) if m > 1 else 0.0
    var_plus = (n - 1) / n * w + b / n
    acov = np.mean([_autocovariance(s[c]) for c in range(m)], axis=0)
    rho = 1.0 - (w - acov) / var_plus

    # Geyer: sum consecutive pairs while positive, then enforce monotone decay
    max_pairs = (n - 1) // 2
    pair_sums = []
    for k in range(max_pairs):
        p = rho[2 * k] + rho[2 * k + 1]
        if p <= 0.0:
            break
        pair_sums.append(p)
    if pair_sums:
        for k in range(1, len(pair_sums)):
            pair_sums[k] = min(pair_sums[k], pair_sums[k - 1])
        tau = -1.0 + 2.0 * sum(pair_sums)
    else:
        tau = 1.0 / math.log10(m * n + 10.0)
    total = m * n
    tau = max(tau, 1.0 / math.log10(total + 10.0))  # antithetic chains: ESS may exceed N, stays finite
    return float(total / tau)


def _rank_normalize(x: np.ndarray) -> np.ndarray:
    from scipy.stats import rankdata

    flat = x.reshape(-1)
    ranks = rankdata(flat, method="average")
    z = ndtri((ranks - 0.375) / (flat.size + 0.25))
    return z.reshape(x.shape)


def effective_sample_size(x: np.ndarray) -> tuple[float, float]:
    """(bulk, tail) effective sample sizes for one parameter.

    Bulk ESS is computed on rank-normalized draws; tail ESS is the smaller of
    the ESS of the 5% and 95% exceedance indicators. NaN on degenerate input.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 4:
        raise ValueError("need at least 2 chains and 4 iterations")
    if np.var(x) == 0.0:
        return math.nan, math.nan
    bulk = _ess_base(_rank_normalize(x))
    tails = []
    for q in (0.05, 0.95):
        indicator = (x <= np.quantile(x, q)).astype(np.float64)
        tails.append(_ess_base(indicator))
    tail = math.nan if any(math.isnan(t) for t in tails) else min(tails)
    return bulk, tail


@dataclass(frozen=True)
class SummaryRow:
    name: str
    mean: float
    sd: float
    q2_5: float
    q17: float
    q50: float
    q83: float
    q97_5: float
    rhat: float
    ess_bulk: float
    ess_tail: float


def summarize(draws: PosteriorDraws) -> list[SummaryRow]:
    """Per-parameter summary: moments, central 66%/95% interval bounds, and
    convergence diagnostics."""
    rows = []
    for i, name in enumerate(draws.names):
        mat = draws.draws[:, :, i]
        pooled = mat.reshape(-1)
        qs = np.quantile(pooled, [0.025, 0.17, 0.5, 0.83, 0.975])
        if mat.shape[0] >= 2 and mat.shape[1] >= 4:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                rhat = split_rhat(mat)
            ess_bulk, ess_tail = effective_sample_size(mat)
        else:
            rhat, ess_bulk, ess_tail = math.nan, math.nan, math.nan
        rows.append(SummaryRow(
            name=name, mean=float(pooled.mean()),
            sd=float(pooled.std(ddof=1)) if pooled.size > 1 else 0.0,
            q2_5=float(qs[0]), q17=float(qs[1]), q50=float(qs[2]),
            q83=float(qs[3]), q97_5=float(qs[4]),
            rhat=rhat, ess_bulk=ess_bulk, ess_tail=ess_tail,
        ))
    return rows


SUMMARY_HEADER = "name,mean,sd,q2.5,q17,q50,q83,q97.5,rhat,ess_bulk,ess_tail"


def write_summary_csv(rows: Sequence[SummaryRow], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(SUMMARY_HEADER + "\n")
        for r in rows:
            f.write(",".join([r.name] + [repr(v) for v in (
                r.mean, r.sd, r.q2_5, r.q17, r.q50, r.q83, r.q97_5,
                r.rhat, r.ess_bulk, r.ess_tail)]) + "\n")


# --- Persistence ---------------------------------------------------------

def save_draws(draws: PosteriorDraws, out_dir, runtime_seconds: float | None = None) -> None:
    """One CSV per chain (columns = parameter names) plus a metadata JSON.

    Wall-clock timing lives in its own metadata field so everything else is
    reproducible byte-for-byte for a fixed seed.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = ",".join(draws.names)
    for c in range(draws.n_chains):
        with open(out / f"chain_{c}.csv", "w", encoding="utf-8") as f:
            f.write(header + "\n")
            for row in draws.draws[c]:
                f.write(",".join(repr(float(v)) for v in row) + "\n")
    meta = {
        "config": asdict(draws.config),
        "names": draws.names,
        "divergences_per_chain": [int(d.sum()) for d in draws.divergences],
        "step_sizes": [float(s) for s in draws.step_sizes],
        "warnings": draws.warnings,
        "timing": {"runtime_seconds": runtime_seconds},
    }
    with open(out / "metadata.json", "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
        f.write("\n")
    np.save(out / "divergences.npy", draws.divergences)
    np.save(out / "tree_depths.npy", draws.tree_depths)


def load_draws(in_dir) -> PosteriorDraws:
    src = Path(in_dir)
    with open(src / "metadata.json", "r", encoding="utf-8") as f:
        meta = json.load(f)
    config = SamplerConfig(**meta["config"])
    names = list(meta["names"])
    chains = []
    for c in range(config.chains):
        path = src / f"chain_{c}.csv"
        chains.append(np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2))
    draws = np.stack(chains)
    divergences = np.load(src / "divergences.npy")
    depths = np.load(src / "tree_depths.npy")
    return PosteriorDraws(draws, names, divergences, depths,
                          np.asarray(meta["step_sizes"]), config,
                          list(meta.get("warnings", [])))


# --- Model fitting entry point -----------------------------------------------

def fit_model(dataset, config: SamplerConfig, *, scale_prior: str = "half_normal",
              lkj_eta: float = 2.0, flip_xtilde: bool = False) -> PosteriorDraws:
    """Sample the winner-loser model posterior for `dataset`; draws are
    returned on the constrained scale with named columns."""
    from .model import LogPosterior

    lp = LogPosterior(dataset, scale_prior=scale_prior, lkj_eta=lkj_eta,
                      flip_xtilde=flip_xtilde)
    return sample(lp, lp.dim, config, transform=lp.constrain_vector,
                  names=lp.names())


def fit_runtime(dataset, config: SamplerConfig, **kwargs):
    """fit_model plus wall-clock seconds, for run manifests."""
    t0 = time.time()
    draws = fit_model(dataset, config, **kwargs)
    return draws, time.time() - t0
