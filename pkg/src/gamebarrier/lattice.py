"""CRR lattice construction: market parameters, path prices, barrier bookkeeping."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

KNOCK_OUT = "knock-out"
KNOCK_IN = "knock-in"

__all__ = [
    "KNOCK_OUT",
    "KNOCK_IN",
    "MarketModel",
    "StepParams",
    "PathPrefix",
    "BarrierSpec",
    "NonRecombiningError",
    "BudgetError",
    "step_params",
    "prices_along",
    "barrier_exit_index",
    "state_space",
]


class NonRecombiningError(ValueError):
    """The payoff family has no recombining state reduction; use the path tree."""


class BudgetError(RuntimeError):
    """A requested computation exceeds the configured numeric budget."""


@dataclass(frozen=True)
class MarketModel:
    """Market parameters: stock s0 with volatility kappa and drift parameter mu,
    bond b0 growing at rate r, horizon T."""

    s0: float
    r: float
    mu: float
    kappa: float
    T: float
    b0: float = 1.0

    def __post_init__(self) -> None:
        if self.s0 <= 0.0:
            raise ValueError("s0 must be positive")
        if self.kappa <= 0.0:
            raise ValueError("kappa must be positive")
        if self.T <= 0.0:
            raise ValueError("T must be positive")
        if self.b0 <= 0.0:
            raise ValueError("b0 must be positive")

    @property
    def log_drift(self) -> float:
        """Drift of the noise process driving log(discounted stock) under the
        objective measure."""
        return self.mu / self.kappa - self.kappa / 2.0


@dataclass(frozen=True)
class StepParams:
    """Per-step quantities of the n-step binomial market."""

    n: int
    h: float        # step width sqrt(T/n)
    dt: float       # T/n
    r_n: float      # per-step rate
    a1: float       # up move of the discounted stock, e^{kappa h} - 1
    a2: float       # down move, e^{-kappa h} - 1
    rho_up: float   # undiscounted up return
    rho_dn: float   # undiscounted down return
    p: float        # objective up-probability
    p_tilde: float  # martingale up-probability

    @property
    def disc(self) -> float:
        """One-step discount factor 1/(1+r_n)."""
        return 1.0 / (1.0 + self.r_n)


def step_params(model: MarketModel, n: int) -> StepParams:
    """Build the n-step binomial market matching `model`."""
    if n < 1:
        raise ValueError("n must be at least 1")
    dt = model.T / n
    h = math.sqrt(dt)
    k = model.kappa
    r_n = math.expm1(model.r * dt)
    a1 = math.expm1(k * h)
    a2 = math.expm1(-k * h)
    rho_up = math.expm1(model.r * dt + k * h)
    rho_dn = math.expm1(model.r * dt - k * h)
    p = 1.0 / (math.exp((k - 2.0 * model.mu / k) * h) + 1.0)
    p_tilde = 1.0 / (math.exp(k * h) + 1.0)
    return StepParams(n=n, h=h, dt=dt, r_n=r_n, a1=a1, a2=a2,
                      rho_up=rho_up, rho_dn=rho_dn, p=p, p_tilde=p_tilde)


@dataclass(frozen=True)
class PathPrefix:
    """A prefix of up/down moves, signs[i] in {+1, -1}."""

    signs: tuple[int, ...]

    def __post_init__(self) -> None:
        if any(s not in (-1, 1) for s in self.signs):
            raise ValueError("signs must be +1 or -1")

    @property
    def k(self) -> int:
        return len(self.signs)

    @classmethod
    def from_iterable(cls, signs) -> "PathPrefix":
        return cls(tuple(int(s) for s in signs))


@dataclass(frozen=True)
class BarrierSpec:
    """Open barrier interval (L, R) with knock-out/knock-in direction.

    R = math.inf means no upper barrier; L = 0 means no lower barrier.
    """

    L: float
    R: float
    direction: str = KNOCK_OUT

    def __post_init__(self) -> None:
        if self.L < 0.0:
            raise ValueError("L must be nonnegative")
        if not self.L < self.R:
            raise ValueError("L < R violated")
        if self.direction not in (KNOCK_OUT, KNOCK_IN):
            raise ValueError(f"unknown barrier direction {self.direction!r}")

    @property
    def is_trivial(self) -> bool:
        """True when (L, R) = (0, inf), i.e. no barrier at all."""
        return self.L == 0.0 and math.isinf(self.R)

    def contains(self, price) -> np.ndarray | bool:
        """Open-interval membership test; a price on a barrier counts as outside."""
        price = np.asarray(price)
        out = (price > self.L) & (price < self.R)
        return bool(out) if out.ndim == 0 else out

    @classmethod
    def none(cls, direction: str = KNOCK_OUT) -> "BarrierSpec":
        return cls(0.0, math.inf, direction)


def prices_along(model: MarketModel, sp: StepParams, prefix: PathPrefix
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Undiscounted and discounted stock prices S_0..S_k along `prefix`.

    Prices are computed from exponent sums so that paths with equal sign sums
    recombine bit-stably.
    """
    if prefix.k > sp.n:
        raise ValueError("prefix longer than the lattice horizon")
    csum = np.concatenate(([0], np.cumsum(prefix.signs, dtype=np.int64)))
    steps = np.arange(prefix.k + 1)
    discounted = model.s0 * np.exp(model.kappa * sp.h * csum)
    undiscounted = model.s0 * np.exp(model.r * sp.dt * steps + model.kappa * sp.h * csum)
    return undiscounted, discounted


def barrier_exit_index(prices: Sequence[float] | np.ndarray,
                       barrier: BarrierSpec) -> int | None:
    """First index k with prices[k] outside the open interval (L, R), else None."""
    prices = np.asarray(prices, dtype=float)
    if prices.size == 0:
        raise ValueError("prices must be nonempty")
    outside = ~barrier.contains(prices)
    hits = np.flatnonzero(outside)
    return int(hits[0]) if hits.size else None


def state_space(sp: StepParams, kind: str) -> list[list]:
    """Recombining state enumeration for each step k = 0..n.

    kind "level": states are sign sums, k+1 per step.
    kind "level-max": states are (sign sum, running max of partial sign sums).
    kind "path": no reduction exists; raises NonRecombiningError.
    """
    if kind == "path":
        raise NonRecombiningError(
            "running-integral payoffs do not recombine; path-tree only")
    if kind == "level":
        return [list(range(-k, k + 1, 2)) for k in range(sp.n + 1)]
    if kind == "level-max":
        levels: list[list] = [[(0, 0)]]
        current = {(0, 0)}
        for _ in range(sp.n):
            nxt = set()
            for j, m in current:
                nxt.add((j + 1, max(m, j + 1)))
                nxt.add((j - 1, m))
            current = nxt
            levels.append(sorted(current))
        return levels
    raise ValueError(f"unknown state kind {kind!r}")
