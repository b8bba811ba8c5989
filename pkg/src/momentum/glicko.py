"""Glicko-2 rating engine.

Tracks (rating, deviation, volatility) per player and applies the standard
rating-period update. Online servers rate game-by-game, so the replay helper
treats every game as its own rating period; with the default constants this
tracks the major sites' published behavior closely even though their exact
parameters are not public.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence


class GlickoError(RuntimeError):
    """Volatility root-finder failed; carries a dump of the offending state."""


@dataclass(frozen=True)
class GlickoState:
    rating: float = 1500.0
    rd: float = 350.0
    volatility: float = 0.06

    def __post_init__(self) -> None:
        if self.rd <= 0:
            raise ValueError("rating deviation must be positive")
        if self.volatility <= 0:
            raise ValueError("volatility must be positive")


@dataclass(frozen=True)
class GlickoConfig:
    tau: float = 0.5
    scale: float = 173.7178
    offset: float = 1500.0
    convergence_tol: float = 1e-6
    max_iterations: int = 100
    # exports rarely carry the opponent's deviation; 45 is typical of an
    # active established player
    default_opponent_rd: float = 45.0


def _g(phi: float) -> float:
    return 1.0 / math.sqrt(1.0 + 3.0 * phi * phi / (math.pi * math.pi))


def _expect(mu: float, mu_j: float, phi_j: float) -> float:
    return 1.0 / (1.0 + math.exp(-_g(phi_j) * (mu - mu_j)))


def glicko2_update(
    state: GlickoState,
    results: Sequence[tuple[float, float, float]],
    config: GlickoConfig = GlickoConfig(),
) -> GlickoState:
    """One rating-period update against `results` = (opp_rating, opp_rd, score).

    Scores are 1 (win), 0.5 (draw), 0 (loss). With no games the rating and
    volatility are unchanged and the deviation inflates by one period.
    """
    scale, offset, tau = config.scale, config.offset, config.tau
    mu = (state.rating - offset) / scale
    phi = state.rd / scale
    sigma = state.volatility

    if not results:
        phi_star = math.sqrt(phi * phi + sigma * sigma)
        return GlickoState(state.rating, phi_star * scale, sigma)

    v_inv = 0.0
    delta_sum = 0.0
    for opp_rating, opp_rd, score in results:
        mu_j = (opp_rating - offset) / scale
        phi_j = opp_rd / scale
        g_j = _g(phi_j)
        e_j = _expect(mu, mu_j, phi_j)
        v_inv += g_j * g_j * e_j * (1.0 - e_j)
        delta_sum += g_j * (score - e_j)
    v = 1.0 / v_inv
    delta = v * delta_sum

    sigma_new = _solve_volatility(delta, phi, v, sigma, tau,
                                  config.convergence_tol, config.max_iterations)

    phi_star = math.sqrt(phi * phi + sigma_new * sigma_new)
    phi_new = 1.0 / math.sqrt(1.0 / (phi_star * phi_star) + 1.0 / v)
    mu_new = mu + phi_new * phi_new * delta_sum

    return GlickoState(mu_new * scale + offset, phi_new * scale, sigma_new)


def _solve_volatility(delta: float, phi: float, v: float, sigma: float,
                      tau: float, tol: float, max_iter: int) -> float:
    """Bracketed root solve of the volatility equation (Illinois-style)."""
    a = math.log(sigma * sigma)
    delta2 = delta * delta
    phi2v = phi * phi + v

    def f(x: float) -> float:
        ex = math.exp(x)
        num = ex * (delta2 - phi2v - ex)
        den = 2.0 * (phi2v + ex) ** 2
        return num / den - (x - a) / (tau * tau)

    big_a = a
    if delta2 > phi2v:
        big_b = math.log(delta2 - phi2v)
    else:
        k = 1
        while f(a - k * tau) < 0.0:
            k += 1
            if k > 1000:
                raise GlickoError(
                    f"volatility bracket not found: delta={delta}, phi={phi}, "
                    f"v={v}, sigma={sigma}, tau={tau}")
        big_b = a - k * tau

    f_a, f_b = f(big_a), f(big_b)
    iterations = 0
    while abs(big_b - big_a) > tol:
        iterations += 1
        if iterations > max_iter:
            raise GlickoError(
                f"volatility iteration did not converge: A={big_a}, B={big_b}, "
                f"delta={delta}, phi={phi}, v={v}, sigma={sigma}")
        big_c = big_a + (big_a - big_b) * f_a / (f_b - f_a)
        f_c = f(big_c)
        if f_c * f_b <= 0.0:
            big_a, f_a = big_b, f_b
        else:
            f_a /= 2.0
        big_b, f_b = big_c, f_c
    return math.exp(big_a / 2.0)


def replay_ratings(
    initial: GlickoState,
    games: Iterable[tuple[float, float, float]],
    config: GlickoConfig = GlickoConfig(),
) -> list[GlickoState]:
    """Apply one update per game (one game per rating period), returning the
    state after each game, in order."""
    states: list[GlickoState] = []
    state = initial
    for game in games:
        state = glicko2_update(state, [game], config)
        states.append(state)
    return states


def write_trajectory(states: Sequence[GlickoState], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("game_index,rating,rd,volatility\n")
        for i, s in enumerate(states):
            f.write(f"{i},{s.rating!r},{s.rd!r},{s.volatility!r}\n")
