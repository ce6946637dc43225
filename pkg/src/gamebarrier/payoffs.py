"""Payoff families, barrier gating, discounting and the game settlement kernel."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .lattice import (KNOCK_OUT, BarrierSpec, MarketModel, PathPrefix,
                      StepParams, barrier_exit_index, prices_along)

PER_LEG = "per-leg"
MIN_TIME = "min-time"

GAME_PUT = "game-put"
GAME_CALL = "game-call"
RUSSIAN = "russian"
INTEGRAL_PUT = "integral-put"
INTEGRAL_CALL = "integral-call"

_KINDS = (GAME_PUT, GAME_CALL, RUSSIAN, INTEGRAL_PUT, INTEGRAL_CALL)

__all__ = [
    "PER_LEG", "MIN_TIME",
    "GAME_PUT", "GAME_CALL", "RUSSIAN", "INTEGRAL_PUT", "INTEGRAL_CALL",
    "PayoffFamily", "GatedPayoffs",
    "intrinsic", "gated_discounted", "dynkin_kernel", "default_convention",
]


@dataclass(frozen=True)
class PayoffFamily:
    """One of the supported Lipschitz payoff pairs (F, Delta), G = F + Delta.

    game-put / game-call: F = (K - S)^+ or (S - K)^+, constant penalty.
    russian:              F = max(floor, running max of S), penalty_rate * S.
    integral-put / -call: F = (K -/+ int f(S) du)^+ with f(x) = f_coef * x and
                          the penalty integrating penalty_coef * x; the path is
                          piecewise constant across lattice intervals, so the
                          left-endpoint rule is exact.
    """

    kind: str
    strike: float = 0.0
    penalty: float = 0.0
    floor: float = 0.0
    penalty_rate: float = 0.0
    f_coef: float = 0.0
    penalty_coef: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise ValueError(f"unknown payoff kind {self.kind!r}")
        for name in ("strike", "penalty", "floor", "penalty_rate",
                     "f_coef", "penalty_coef"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be nonnegative")

    @classmethod
    def game_put(cls, strike: float, penalty: float) -> "PayoffFamily":
        return cls(GAME_PUT, strike=strike, penalty=penalty)

    @classmethod
    def game_call(cls, strike: float, penalty: float) -> "PayoffFamily":
        return cls(GAME_CALL, strike=strike, penalty=penalty)

    @classmethod
    def russian(cls, floor: float, penalty_rate: float) -> "PayoffFamily":
        return cls(RUSSIAN, floor=floor, penalty_rate=penalty_rate)

    @classmethod
    def integral_put(cls, strike: float, f_coef: float,
                     penalty_coef: float) -> "PayoffFamily":
        return cls(INTEGRAL_PUT, strike=strike, f_coef=f_coef,
                   penalty_coef=penalty_coef)

    @classmethod
    def integral_call(cls, strike: float, f_coef: float,
                      penalty_coef: float) -> "PayoffFamily":
        return cls(INTEGRAL_CALL, strike=strike, f_coef=f_coef,
                   penalty_coef=penalty_coef)

    @property
    def markov_class(self) -> str:
        """State reduction: "level", "level-max" or "path" (no reduction)."""
        if self.kind in (GAME_PUT, GAME_CALL):
            return "level"
        if self.kind == RUSSIAN:
            return "level-max"
        return "path"

    @property
    def lipschitz_bound(self) -> float:
        """Constant of the uniform-metric Lipschitz property (never below 1)."""
        if self.kind in (GAME_PUT, GAME_CALL):
            return 1.0
        if self.kind == RUSSIAN:
            return 1.0 + self.penalty_rate
        return max(1.0, self.f_coef + self.penalty_coef)

    def evaluate(self, price: np.ndarray, runmax: np.ndarray,
                 acc_f: np.ndarray, acc_d: np.ndarray
                 ) -> tuple[np.ndarray, np.ndarray]:
        """(F, Delta) from precomputed path features at one date.

        price: current price; runmax: running max of the price; acc_f / acc_d:
        running integrals of f_coef * S and penalty_coef * S.
        """
        if self.kind == GAME_PUT:
            return np.maximum(self.strike - price, 0.0), np.full_like(price, self.penalty)
        if self.kind == GAME_CALL:
            return np.maximum(price - self.strike, 0.0), np.full_like(price, self.penalty)
        if self.kind == RUSSIAN:
            return np.maximum(self.floor, runmax), self.penalty_rate * price
        if self.kind == INTEGRAL_PUT:
            return np.maximum(self.strike - acc_f, 0.0), acc_d
        return np.maximum(acc_f - self.strike, 0.0), acc_d


def default_convention(barrier: BarrierSpec) -> str:
    """Knock-out options settle per-leg; knock-in options discount at the
    earlier of the two stopping indices (with an unbarriered cancellation leg)."""
    return PER_LEG if barrier.direction == KNOCK_OUT else MIN_TIME


def _path_features(family: PayoffFamily, prices: np.ndarray, times: np.ndarray
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Running max and running integrals along a piecewise-constant path."""
    runmax = np.maximum.accumulate(prices)
    if family.kind in (INTEGRAL_PUT, INTEGRAL_CALL):
        dts = np.diff(times)
        partial = np.concatenate(([0.0], np.cumsum(prices[:-1] * dts)))
        acc_f = family.f_coef * partial
        acc_d = family.penalty_coef * partial
    else:
        acc_f = np.zeros_like(prices)
        acc_d = acc_f
    return runmax, acc_f, acc_d


def intrinsic(family: PayoffFamily, prices: Sequence[float] | np.ndarray,
              times: Sequence[float] | np.ndarray) -> tuple[float, float, float]:
    """(F_k, Delta_k, G_k) at the last index of a price path observed at `times`."""
    prices = np.asarray(prices, dtype=float)
    times = np.asarray(times, dtype=float)
    if prices.size == 0:
        raise ValueError("prices must be nonempty")
    if prices.shape != times.shape:
        raise ValueError("prices and times must have equal length")
    if np.any(prices <= 0.0):
        raise ValueError("prices must be positive")
    runmax, acc_f, acc_d = _path_features(family, prices, times)
    f, d = family.evaluate(prices[-1:], runmax[-1:], acc_f[-1:], acc_d[-1:])
    return float(f[0]), float(d[0]), float(f[0] + d[0])


def intrinsic_along(family: PayoffFamily, prices: np.ndarray, times: np.ndarray
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Arrays (F_0..F_k, G_0..G_k) along a full path."""
    runmax, acc_f, acc_d = _path_features(family, prices, times)
    f, d = family.evaluate(prices, runmax, acc_f, acc_d)
    return f, f + d


@dataclass(frozen=True)
class GatedPayoffs:
    """Barrier-gated, discounted payoff legs along one full lattice path.

    y_tilde / x_tilde are the discounted buyer / seller legs after gating;
    f / g keep the ungated undiscounted intrinsics for the min-time kernel.
    """

    y_tilde: np.ndarray
    x_tilde: np.ndarray
    tau: int | None
    direction: str
    f: np.ndarray
    g: np.ndarray
    disc: np.ndarray  # (1+r_n)^{-k} per index

    @property
    def n(self) -> int:
        return len(self.y_tilde) - 1

    def buyer_gate(self, k: int) -> bool:
        if self.direction == KNOCK_OUT:
            return self.tau is None or k < self.tau
        return self.tau is not None and k >= self.tau


def gated_discounted(family: PayoffFamily, model: MarketModel, sp: StepParams,
                     prefix: PathPrefix, barrier: BarrierSpec) -> GatedPayoffs:
    """Gate and discount the payoff legs along a full n-step path."""
    if prefix.k != sp.n:
        raise ValueError("gated payoffs require a full-length path")
    prices, _ = prices_along(model, sp, prefix)
    times = np.arange(sp.n + 1) * sp.dt
    f, g = intrinsic_along(family, prices, times)
    tau = barrier_exit_index(prices, barrier)
    disc = (1.0 + sp.r_n) ** (-np.arange(sp.n + 1, dtype=float))
    idx = np.arange(sp.n + 1)
    if barrier.direction == KNOCK_OUT:
        gate = np.ones(sp.n + 1) if tau is None else (idx < tau).astype(float)
        y_tilde = disc * f * gate
        x_tilde = disc * g * gate
    else:
        gate = np.zeros(sp.n + 1) if tau is None else (idx >= tau).astype(float)
        y_tilde = disc * f * gate
        x_tilde = disc * g
    return GatedPayoffs(y_tilde=y_tilde, x_tilde=x_tilde, tau=tau,
                        direction=barrier.direction, f=f, g=g, disc=disc)


def dynkin_kernel(gated: GatedPayoffs, s: int, k: int,
                  convention: str = PER_LEG) -> float:
    """Discounted settlement when the seller stops at s and the buyer at k.

    per-leg: each gated leg carries its own discount index. min-time: both
    legs discount at s^k; the cancellation leg pays the ungated G.
    """
    if s > gated.n or k > gated.n:
        raise ValueError("stopping indices exceed the horizon")
    if convention == PER_LEG:
        return float(gated.x_tilde[s]) if s < k else float(gated.y_tilde[k])
    if convention == MIN_TIME:
        d = float(gated.disc[min(s, k)])
        if s < k:
            return d * float(gated.g[s])
        return d * float(gated.f[k]) * float(gated.buyer_gate(k))
    raise ValueError(f"unknown convention {convention!r}")
