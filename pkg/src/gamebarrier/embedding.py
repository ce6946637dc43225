"""Monte Carlo transfer between the lattice and the continuous market.

Simulates the drifted noise process on a fine grid, extracts the first-exit
times at which its increments reproduce the +-h walk, and replays lattice
hedges / stopping rules on the embedded signs to estimate continuous-market
shortfalls.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .lattice import KNOCK_OUT, BarrierSpec, MarketModel, step_params
from .payoffs import PER_LEG, PayoffFamily
from .dynkin import FirstHitRule, HedgeStrategy, _resolve_convention

OBJECTIVE = "objective"
MARTINGALE = "martingale"

GRID = "grid"
BRIDGE = "bridge"

__all__ = [
    "OBJECTIVE", "MARTINGALE", "GRID", "BRIDGE",
    "BrownianPath", "EmbeddingRecord", "EmbeddingStats",
    "CandidateEstimate", "ShortfallEstimate", "ConvergenceRow",
    "ConvergenceStudy",
    "simulate_embedding", "map_stopping", "map_strategy",
    "bs_discounted_payoff", "estimate_shortfall_mc", "embedding_statistics",
    "terminal_discounted_mean", "convergence_study",
]


@dataclass
class BrownianPath:
    """Noise-process samples on the simulation grid t = 0, dt, 2dt, ..."""

    dt: float
    values: np.ndarray
    measure: str
    seed: int
    path_index: int

    def times(self) -> np.ndarray:
        return np.arange(len(self.values)) * self.dt


@dataclass
class EmbeddingRecord:
    """Exit times found by the horizon and the +-1 signs of the increments.

    floors[i] is the last grid index at or before theta[i]; exits that would
    occur after the horizon are not materialized.
    """

    theta: np.ndarray
    signs: np.ndarray
    floors: np.ndarray

    @property
    def count(self) -> int:
        return len(self.theta)


def _drift(model: MarketModel, measure: str) -> float:
    if measure == OBJECTIVE:
        return model.log_drift
    if measure == MARTINGALE:
        return -model.kappa / 2.0
    raise ValueError(f"unknown measure {measure!r}")


def _normal_stream(seed: int, path_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed, 2 * path_index]))


def _uniform_stream(seed: int, path_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed, 2 * path_index + 1]))


class _ExitWalker:
    """Incremental +-h first-exit extraction along one simulated path.

    Detection is at the first grid point beyond the band; with a uniform
    stream supplied, sub-step crossings are additionally sampled from the
    bridge crossing probability, which removes the O(sqrt(dt)) level bias.
    The recorded increment is snapped to exactly +-h (anchors stay on the
    lattice of integer multiples of h).

    Feed the cumulative sample array in growing slices via `scan`; state
    (grid position, anchor, exits found) persists between calls.
    """

    def __init__(self, dt: float, h: float, max_exits: int,
                 uniforms: np.random.Generator | None):
        self.dt = dt
        self.h = h
        self.max_exits = max_exits
        self.uniforms = uniforms
        self.window = 4.0 * math.sqrt(dt)
        self.pos = 0
        self.units = 0
        self.last_theta = 0.0
        self.thetas: list[float] = []
        self.signs: list[int] = []
        self.floors: list[int] = []

    @property
    def done(self) -> bool:
        return len(self.thetas) >= self.max_exits

    def scan(self, b: np.ndarray, upto: int) -> None:
        """Process grid points (self.pos, upto]; b must hold them all."""
        dt, h = self.dt, self.h
        while not self.done and self.pos < upto:
            anchor = h * self.units
            seg = b[self.pos + 1:upto + 1] - anchor
            hits = np.flatnonzero(np.abs(seg) >= h)
            jhit = int(hits[0]) if len(hits) else len(seg)
            bridge = None
            if self.uniforms is not None and jhit > 0:
                a = b[self.pos:self.pos + jhit] - anchor
                c = seg[:jhit]
                w = self.window
                near = np.flatnonzero((a > h - w) | (c > h - w)
                                      | (a < w - h) | (c < w - h))
                if len(near):
                    an, cn = a[near], c[near]
                    p_up = np.exp(-2.0 * (h - an) * (h - cn) / dt)
                    p_dn = np.exp(-2.0 * (h + an) * (h + cn) / dt)
                    u = self.uniforms.random(len(near))
                    hit_up = u < p_up
                    hit_dn = ~hit_up & (u < p_up + p_dn)
                    either = np.flatnonzero(hit_up | hit_dn)
                    if len(either):
                        e = int(either[0])
                        bridge = (int(near[e]), 1 if hit_up[e] else -1)
            if bridge is not None:
                j, s = bridge
                theta = (self.pos + j + 0.5) * dt
                self._record(theta, s, self.pos + j)
                self.pos += j
            elif jhit < len(seg):
                g = self.pos + 1 + jhit
                prev = b[g - 1] - anchor
                cur = seg[jhit]
                s = 1 if cur >= h else -1
                frac = (s * h - prev) / (cur - prev) if cur != prev else 1.0
                frac = min(max(frac, 0.0), 1.0)
                theta = (g - 1 + frac) * dt
                self._record(theta, s, g - 1 if frac < 1.0 else g)
                self.pos = g - 1 if frac < 1.0 else g
            else:
                self.pos = upto
        return

    def _record(self, theta: float, sign: int, floor: int) -> None:
        theta = max(theta, self.last_theta + 1e-12 * self.dt)
        self.thetas.append(theta)
        self.signs.append(sign)
        self.floors.append(floor)
        self.units += sign
        self.last_theta = theta

    def result(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (np.array(self.thetas),
                np.array(self.signs, dtype=np.int64),
                np.array(self.floors, dtype=np.int64))


_BLOCK = 4096


def _walk_full(b: np.ndarray, dt: float, h: float, max_exits: int,
               uniforms: np.random.Generator | None
               ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exit extraction over a fully simulated path, scanned block by block."""
    walker = _ExitWalker(dt, h, max_exits, uniforms)
    n_steps = len(b) - 1
    while not walker.done and walker.pos < n_steps:
        walker.scan(b, min(walker.pos + _BLOCK, n_steps))
    return walker.result()


def simulate_embedding(model: MarketModel, n: int, measure: str = OBJECTIVE,
                       n_paths: int = 1, dt: float | None = None,
                       seed: int = 0, refine: str = BRIDGE,
                       max_exits: int | None = None
                       ) -> Iterator[tuple[BrownianPath, EmbeddingRecord]]:
    """Stream simulated noise paths with their embedded exit records.

    One seed-derived random stream per path index, so path i is identical
    regardless of batching or consumption order.
    """
    sp = step_params(model, n)
    if dt is None:
        dt = sp.dt / 400.0
    if dt >= sp.dt:
        raise ValueError("dt must be smaller than the lattice step T/n")
    if refine not in (GRID, BRIDGE):
        raise ValueError(f"unknown refinement {refine!r}")
    if max_exits is None:
        max_exits = n
    n_steps = int(round(model.T / dt))
    m = _drift(model, measure)
    sqdt = math.sqrt(dt)
    for i in range(n_paths):
        normals = _normal_stream(seed, i)
        uni = _uniform_stream(seed, i) if refine == BRIDGE else None
        walker = _ExitWalker(dt, sp.h, max_exits, uni)
        b = np.zeros(1)
        # grow the path lazily; early exits skip most of the grid
        while not walker.done and len(b) - 1 < n_steps:
            take = min(_BLOCK, n_steps - (len(b) - 1))
            z = normals.standard_normal(take)
            ext = b[-1] + np.cumsum(m * dt + sqdt * z)
            b = np.concatenate([b, ext])
            walker.scan(b, len(b) - 1)
        thetas, signs, floors = walker.result()
        record = EmbeddingRecord(theta=thetas, signs=signs, floors=floors)
        yield BrownianPath(dt=dt, values=b, measure=measure, seed=seed,
                           path_index=i), record


def map_stopping(rule: FirstHitRule, record: EmbeddingRecord, T: float) -> float:
    """Continuous stopping time of an embedded lattice rule: T ^ theta_rule,
    and T outright when the rule runs to the horizon index."""
    k = record.count
    idx = int(rule.evaluate(record.signs.reshape(1, -1) if k else
                            np.zeros((1, 0), dtype=np.int64),
                            np.array([k]))[0])
    if idx >= rule.n:
        return T
    if idx == 0:
        return 0.0
    if idx <= k:
        return min(T, float(record.theta[idx - 1]))
    return T


def map_strategy(strategy: HedgeStrategy, record: EmbeddingRecord,
                 path: BrownianPath) -> np.ndarray:
    """Discounted portfolio trajectory on the simulation grid.

    Between exits the position is constant; at each exit the value matches
    the lattice replay of the embedded signs. After the final embedding exit
    the portfolio is frozen.
    """
    n = strategy.sp.n
    k = record.count
    signs = np.ones((1, n), dtype=np.int64)
    if k:
        signs[0, :k] = record.signs
    values, us, _ = strategy.replay(signs)
    csum = np.concatenate(([0], np.cumsum(signs[0])))
    s_til_lat = strategy.model.s0 * np.exp(
        strategy.model.kappa * strategy.sp.h * csum)
    times = path.times()
    s_til_grid = strategy.model.s0 * np.exp(strategy.model.kappa * path.values)
    interval = np.searchsorted(record.theta, times, side="right")
    out = np.empty_like(times)
    for j in range(min(k, n) + 1):
        mask = interval == j
        if not mask.any():
            continue
        if j >= n:
            out[mask] = values[0, n]
        else:
            gamma = us[0, j] / s_til_lat[j]
            out[mask] = values[0, j] + gamma * (s_til_grid[mask] - s_til_lat[j])
    return out


def bs_discounted_payoff(family: PayoffFamily, barrier: BarrierSpec,
                         path: BrownianPath, model: MarketModel,
                         s: float, t: float,
                         convention: str | None = None) -> float:
    """Settlement Q(s, t) in the continuous market along one simulated path.

    Path functionals and the barrier exit are evaluated on the
    piecewise-constant grid path; discounting is e^{-r time}.
    """
    convention = _resolve_convention(barrier, convention)
    times = path.times()
    if s > times[-1] + 1e-12 or t > times[-1] + 1e-12:
        raise ValueError("path does not cover the stopping times")
    prices = model.s0 * np.exp(model.r * times + model.kappa * path.values)
    inside = barrier.contains(prices)
    first_out = np.flatnonzero(~inside)
    tau = times[first_out[0]] if len(first_out) else math.inf

    def leg(time: float) -> tuple[float, float, bool]:
        idx = int(np.searchsorted(times, time + 1e-15) - 1)
        idx = max(idx, 0)
        runmax = float(prices[:idx + 1].max())
        if family.kind in ("integral-put", "integral-call"):
            acc = float(np.sum(prices[:idx]) * path.dt)
            acc_f, acc_d = family.f_coef * acc, family.penalty_coef * acc
        else:
            acc_f = acc_d = 0.0
        fv, dv = family.evaluate(np.array([prices[idx]]), np.array([runmax]),
                                 np.array([acc_f]), np.array([acc_d]))
        alive = time < tau
        return float(fv[0]), float(fv[0] + dv[0]), alive

    if s < t:
        fs, gs, alive = leg(s)
        gated = gs * (1.0 if alive else 0.0)
        pay = gated if (barrier.direction == KNOCK_OUT and convention == PER_LEG) \
            else gs
        return math.exp(-model.r * s) * pay
    ft, gt, alive = leg(t)
    if barrier.direction == KNOCK_OUT:
        gate = 1.0 if alive else 0.0
    else:
        gate = 0.0 if alive else 1.0
    return math.exp(-model.r * t) * ft * gate


# ---------------------------------------------------------------------------
# Batched simulation records for the estimators
# ---------------------------------------------------------------------------

@dataclass
class _BatchPanels:
    thetas: np.ndarray        # (P, n+1), theta_0 = 0, inf beyond found exits
    signs: np.ndarray         # (P, n) padded with +1
    counts: np.ndarray        # (P,)
    f_theta: np.ndarray       # (P, n+1) intrinsic F at theta floors
    g_theta: np.ndarray
    alive_theta: np.ndarray   # (P, n+1) bool
    fixed_times: np.ndarray   # (F,)
    f_fixed: np.ndarray       # (P, F)
    g_fixed: np.ndarray
    alive_fixed: np.ndarray
    stil_fixed: np.ndarray    # discounted stock at the fixed grid times
    k_fixed: np.ndarray       # (P, F) number of exits at or before the time
    tau_time: np.ndarray      # (P,) grid barrier exit time, inf when none
    f_tau: np.ndarray
    g_tau: np.ndarray
    stil_tau: np.ndarray
    k_tau: np.ndarray


def _collect_panels(model: MarketModel, n: int, family: PayoffFamily,
                    barrier: BarrierSpec, measure: str, n_paths: int,
                    dt: float, seed: int, refine: str,
                    fixed_times: np.ndarray) -> _BatchPanels:
    sp = step_params(model, n)
    n_steps = int(round(model.T / dt))
    m = _drift(model, measure)
    sqdt = math.sqrt(dt)
    needs_int = family.kind in ("integral-put", "integral-call")
    fixed_idx = np.round(fixed_times / dt).astype(np.int64)

    P = n_paths
    F = len(fixed_times)
    pan = _BatchPanels(
        thetas=np.full((P, n + 1), math.inf), signs=np.ones((P, n), dtype=np.int64),
        counts=np.zeros(P, dtype=np.int64),
        f_theta=np.zeros((P, n + 1)), g_theta=np.zeros((P, n + 1)),
        alive_theta=np.zeros((P, n + 1), dtype=bool),
        fixed_times=fixed_times,
        f_fixed=np.zeros((P, F)), g_fixed=np.zeros((P, F)),
        alive_fixed=np.zeros((P, F), dtype=bool), stil_fixed=np.zeros((P, F)),
        k_fixed=np.zeros((P, F), dtype=np.int64),
        tau_time=np.full(P, math.inf), f_tau=np.zeros(P), g_tau=np.zeros(P),
        stil_tau=np.zeros(P), k_tau=np.zeros(P, dtype=np.int64))
    pan.thetas[:, 0] = 0.0

    times = np.arange(n_steps + 1) * dt
    for i in range(P):
        z = _normal_stream(seed, i).standard_normal(n_steps)
        b = np.concatenate(([0.0], np.cumsum(m * dt + sqdt * z)))
        uni = _uniform_stream(seed, i) if refine == BRIDGE else None
        thetas, signs, floors = _walk_full(b, dt, sp.h, n, uni)
        k = len(thetas)
        pan.counts[i] = k
        if k:
            pan.thetas[i, 1:k + 1] = thetas
            pan.signs[i, :k] = signs

        prices = model.s0 * np.exp(model.r * times + model.kappa * b)
        runmax = np.maximum.accumulate(prices)
        outs = np.flatnonzero(~barrier.contains(prices))
        tau_idx = int(outs[0]) if len(outs) else n_steps + 1
        if needs_int:
            acc = np.concatenate(([0.0], np.cumsum(prices[:-1] * dt)))
        else:
            acc = None

        def intrinsic_at(idx):
            idx = np.asarray(idx, dtype=np.int64)
            if acc is not None:
                af = family.f_coef * acc[idx]
                ad = family.penalty_coef * acc[idx]
            else:
                af = ad = np.zeros(len(idx))
            fv, dv = family.evaluate(prices[idx], runmax[idx], af, ad)
            return fv, fv + dv

        th_floors = np.concatenate(([0], floors)).astype(np.int64)
        fv, gv = intrinsic_at(th_floors)
        pan.f_theta[i, :k + 1] = fv
        pan.g_theta[i, :k + 1] = gv
        pan.alive_theta[i, :k + 1] = th_floors < tau_idx

        fv, gv = intrinsic_at(fixed_idx)
        pan.f_fixed[i] = fv
        pan.g_fixed[i] = gv
        pan.alive_fixed[i] = fixed_idx < tau_idx
        pan.stil_fixed[i] = model.s0 * np.exp(model.kappa * b[fixed_idx])
        pan.k_fixed[i] = np.searchsorted(np.asarray(thetas), fixed_times,
                                         side="right")

        if tau_idx <= n_steps:
            pan.tau_time[i] = tau_idx * dt
            fv, gv = intrinsic_at([tau_idx])
            pan.f_tau[i] = fv[0]
            pan.g_tau[i] = gv[0]
            pan.stil_tau[i] = model.s0 * math.exp(model.kappa * b[tau_idx])
            pan.k_tau[i] = np.searchsorted(np.asarray(thetas), tau_idx * dt,
                                           side="right")
    return pan


# ---------------------------------------------------------------------------
# Shortfall estimation
# ---------------------------------------------------------------------------

@dataclass
class CandidateEstimate:
    name: str
    estimate: float
    std_err: float
    n_paths: int


@dataclass
class ShortfallEstimate:
    candidates: list[CandidateEstimate]
    max_estimate: float
    max_candidate: str
    max_std_err: float
    n_paths: int

    def by_name(self, name: str) -> CandidateEstimate:
        for c in self.candidates:
            if c.name == name:
                return c
        raise KeyError(name)


def default_candidates(n: int) -> list[tuple]:
    """Buyer-side stopping-time family over which the risk sup is bounded
    below: the embedded saddle rule, a deterministic time grid, the capped
    barrier hitting time, and a spread of embedding-exit indices."""
    cands: list[tuple] = [("saddle",), ("barrier",)]
    cands += [("fixed", j / 10.0) for j in range(11)]
    ks = sorted({max(1, (j * n) // 8) for j in range(1, 9)} | {n})
    cands += [("theta", k) for k in ks]
    return cands


def estimate_shortfall_mc(model: MarketModel, n: int, family: PayoffFamily,
                          barrier: BarrierSpec, strategy: HedgeStrategy,
                          buyer_rule: FirstHitRule | None = None,
                          candidates: Sequence[tuple] | None = None,
                          n_paths: int = 10_000, dt: float | None = None,
                          seed: int = 0, measure: str = OBJECTIVE,
                          refine: str = BRIDGE,
                          convention: str | None = None) -> ShortfallEstimate:
    """Monte Carlo lower bound of the continuous-market shortfall risk of an
    embedded lattice hedge: max over candidate buyer stopping times of the
    mean positive-part shortfall.

    The reported figure bounds the sup over all stopping times from below;
    candidate times use only information available at the time."""
    sp = step_params(model, n)
    if dt is None:
        dt = sp.dt / 400.0
    if dt >= sp.dt:
        raise ValueError("dt must be smaller than the lattice step T/n")
    convention = _resolve_convention(barrier, convention)
    if candidates is None:
        candidates = default_candidates(n)
    if not candidates:
        raise ValueError("candidate set must be nonempty")

    fixed_fracs = sorted({frac for kind, *rest in candidates if kind == "fixed"
                          for frac in rest} | {1.0})
    fixed_times = np.array([f * model.T for f in fixed_fracs])
    pan = _collect_panels(model, n, family, barrier, measure, n_paths, dt,
                          seed, refine, fixed_times)

    values, us, _ = strategy.replay(pan.signs)
    csum = np.concatenate([np.zeros((n_paths, 1), dtype=np.int64),
                           np.cumsum(pan.signs, axis=1)], axis=1)
    stil_lat = model.s0 * np.exp(model.kappa * sp.h * csum)
    T = model.T
    rows = np.arange(n_paths)
    t_col = len(fixed_fracs) - 1  # records at t = T

    def value_at_theta(idx):
        return values[rows, idx]

    def value_between(k_idx, stil_grid):
        """Portfolio value inside embedding interval k at a recorded time."""
        k_idx = np.minimum(k_idx, n)
        base = values[rows, k_idx]
        frozen = k_idx >= n
        kq = np.minimum(k_idx, n - 1)
        gamma = us[rows, kq] / stil_lat[rows, kq]
        drifted = base + gamma * (stil_grid - stil_lat[rows, kq])
        return np.where(frozen, values[rows, n], drifted)

    # seller side: embedded cancellation time and its leg
    sig_idx = strategy.cancel_indices(pan.signs, valid=pan.counts)
    at_theta = (sig_idx <= pan.counts) & (sig_idx < n)
    s_time = np.where(at_theta, pan.thetas[rows, np.minimum(sig_idx, n)], T)
    s_time = np.minimum(s_time, T)
    g_s = np.where(at_theta, pan.g_theta[rows, np.minimum(sig_idx, n)],
                   pan.g_fixed[:, t_col])
    alive_s = np.where(at_theta, pan.alive_theta[rows, np.minimum(sig_idx, n)],
                       pan.alive_fixed[:, t_col])
    v_s = np.where(at_theta, value_at_theta(np.minimum(sig_idx, n)),
                   value_between(pan.k_fixed[:, t_col], pan.stil_fixed[:, t_col]))
    seller_gated = barrier.direction == KNOCK_OUT and convention == PER_LEG
    x_leg = np.exp(-model.r * s_time) * g_s * \
        (alive_s.astype(float) if seller_gated else 1.0)

    def buyer_gate(alive):
        if barrier.direction == KNOCK_OUT:
            return alive.astype(float)
        return 1.0 - alive.astype(float)

    def theta_candidate(idx, rule_based=False):
        """(t, buyer leg, portfolio value) when stopping at embedding exit idx,
        falling back to the horizon when the exit was not reached.

        Rule-based indices follow the embedding map: index n means "hold to
        the horizon" even when the n-th exit happened before it."""
        have = idx <= pan.counts
        if rule_based:
            have &= idx < n
        safe = np.minimum(idx, n)
        t = np.where(have, pan.thetas[rows, safe], T)
        t = np.minimum(t, T)
        f = np.where(have, pan.f_theta[rows, safe], pan.f_fixed[:, t_col])
        alive = np.where(have, pan.alive_theta[rows, safe],
                         pan.alive_fixed[:, t_col])
        v = np.where(have, value_at_theta(safe),
                     value_between(pan.k_fixed[:, t_col],
                                   pan.stil_fixed[:, t_col]))
        y = np.exp(-model.r * t) * f * buyer_gate(alive)
        return t, y, v

    results: list[CandidateEstimate] = []
    for cand in candidates:
        kind = cand[0]
        if kind == "fixed":
            j = fixed_fracs.index(cand[1])
            t = np.full(n_paths, fixed_times[j])
            f = pan.f_fixed[:, j]
            alive = pan.alive_fixed[:, j]
            v = value_between(pan.k_fixed[:, j], pan.stil_fixed[:, j])
            y = np.exp(-model.r * t) * f * buyer_gate(alive)
            name = f"fixed:{cand[1]:g}"
        elif kind == "barrier":
            hit = np.isfinite(pan.tau_time)
            t = np.where(hit, pan.tau_time, T)
            f = np.where(hit, pan.f_tau, pan.f_fixed[:, t_col])
            alive = np.where(hit, np.zeros(n_paths, dtype=bool),
                             pan.alive_fixed[:, t_col])
            stil = np.where(hit, pan.stil_tau, pan.stil_fixed[:, t_col])
            kidx = np.where(hit, pan.k_tau, pan.k_fixed[:, t_col])
            v = value_between(kidx, stil)
            y = np.exp(-model.r * t) * f * buyer_gate(alive)
            name = "barrier-hit"
        elif kind == "theta":
            t, y, v = theta_candidate(np.full(n_paths, cand[1], dtype=np.int64))
            name = f"theta:{cand[1]}"
        elif kind == "saddle":
            if buyer_rule is None:
                raise ValueError("saddle candidate requires buyer_rule")
            idx = buyer_rule.evaluate(pan.signs, valid=pan.counts)
            t, y, v = theta_candidate(idx, rule_based=True)
            name = "saddle"
        else:
            raise ValueError(f"unknown candidate {cand!r}")

        seller_first = s_time < t
        q = np.where(seller_first, x_leg, y)
        port = np.where(seller_first, v_s, v)
        short = np.maximum(q - port, 0.0)
        est = float(short.mean())
        se = float(short.std(ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else 0.0
        results.append(CandidateEstimate(name, est, se, n_paths))

    best = max(results, key=lambda c: c.estimate)
    return ShortfallEstimate(candidates=results, max_estimate=best.estimate,
                             max_candidate=best.name, max_std_err=best.std_err,
                             n_paths=n_paths)


# ---------------------------------------------------------------------------
# Embedding statistics
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingStats:
    n_paths: int
    sign_freq: float
    sign_se: float
    sign_expected: float
    theta1_mean: float
    theta1_se: float
    theta1_expected: float


def embedding_statistics(model: MarketModel, n: int, measure: str = OBJECTIVE,
                         n_paths: int = 100_000, dt: float | None = None,
                         seed: int = 0, refine: str = BRIDGE) -> EmbeddingStats:
    """First-exit statistics: up-sign frequency against the step probability
    and mean exit time against the optional-stopping identity."""
    sp = step_params(model, n)
    if dt is None:
        dt = sp.dt / 400.0
    ups = 0
    t_sum = 0.0
    t_sq = 0.0
    found = 0
    for _, rec in simulate_embedding(model, n, measure, n_paths, dt, seed,
                                     refine, max_exits=1):
        if rec.count:
            found += 1
            ups += rec.signs[0] > 0
            t_sum += rec.theta[0]
            t_sq += rec.theta[0] ** 2
    freq = ups / found
    mean = t_sum / found
    var = max(t_sq / found - mean ** 2, 0.0)
    p = sp.p if measure == OBJECTIVE else sp.p_tilde
    m = _drift(model, measure)
    expected = sp.h * (2.0 * p - 1.0) / m if m != 0.0 else sp.h ** 2
    return EmbeddingStats(
        n_paths=found, sign_freq=freq,
        sign_se=math.sqrt(p * (1.0 - p) / found),
        sign_expected=p, theta1_mean=mean,
        theta1_se=math.sqrt(var / found),
        theta1_expected=expected)


def terminal_discounted_mean(model: MarketModel, n_paths: int = 100_000,
                             dt: float | None = None, seed: int = 0,
                             measure: str = MARTINGALE
                             ) -> tuple[float, float]:
    """Sample mean and standard error of the discounted terminal stock price
    from the simulated grid increments."""
    if dt is None:
        dt = model.T / 40_000.0
    n_steps = int(round(model.T / dt))
    m = _drift(model, measure)
    sqdt = math.sqrt(dt)
    acc = 0.0
    acc2 = 0.0
    for i in range(n_paths):
        z = _normal_stream(seed, i).standard_normal(n_steps)
        bt = m * model.T + sqdt * float(z.sum())
        s = model.s0 * math.exp(model.kappa * bt)
        acc += s
        acc2 += s * s
    mean = acc / n_paths
    var = max(acc2 / n_paths - mean * mean, 0.0)
    return mean, math.sqrt(var / n_paths)


# ---------------------------------------------------------------------------
# Convergence studies
# ---------------------------------------------------------------------------

def _loglog_slope(ns: Sequence[float], errors: Sequence[float]
                  ) -> tuple[float, float]:
    """Least-squares slope and intercept of log(error) against log(n)."""
    ns = np.asarray(ns, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if len(ns) < 2:
        raise ValueError("need at least two points")
    if (errors <= 0.0).any():
        raise ValueError("errors must be positive")
    slope, intercept = np.polyfit(np.log(ns), np.log(errors), 1)
    return float(slope), float(intercept)


@dataclass
class ConvergenceRow:
    n: int
    value: float
    abs_diff_prev: float  # nan on the first row
    running_rate: float   # nan until two differences exist


@dataclass
class ConvergenceStudy:
    rows: list[ConvergenceRow]
    fitted_rate: float    # nan when not estimable
    floored: bool         # some zero differences were floored for the fit


def convergence_study(model: MarketModel, family: PayoffFamily,
                      barrier: BarrierSpec, n_list: Sequence[int],
                      quantity: str = "game", x: float | None = None,
                      convention: str | None = None,
                      mode: str = "recombining",
                      grid_cfg=None) -> ConvergenceStudy:
    """Values per lattice size with first differences and log-log rates.

    quantity: "game" (stopping-game price), "european" (forced hold to
    maturity) or "shortfall" (risk at capital x)."""
    from .dynkin import european_value, game_value
    from .shortfall import GridConfig, solve_shortfall

    ns = list(n_list)
    if any(b >= a for a, b in zip(ns[1:], ns)):
        raise ValueError("n_list must be strictly increasing")
    vals = []
    for n in ns:
        if quantity == "game":
            vals.append(game_value(model, n, family, barrier, convention, mode))
        elif quantity == "european":
            vals.append(european_value(model, n, family, barrier, mode))
        elif quantity == "shortfall":
            if x is None:
                raise ValueError("shortfall study requires capital x")
            cfg = grid_cfg or GridConfig()
            vals.append(solve_shortfall(model, n, family, barrier, x, cfg,
                                        convention, mode)[0])
        else:
            raise ValueError(f"unknown quantity {quantity!r}")

    eps = np.finfo(float).eps
    rows: list[ConvergenceRow] = []
    floored = False
    diff_ns: list[int] = []
    diffs: list[float] = []
    for i, n in enumerate(ns):
        diff = math.nan if i == 0 else abs(vals[i] - vals[i - 1])
        rate = math.nan
        if i > 0:
            d = diff
            if d <= 0.0:
                d = eps
                floored = True
            diff_ns.append(n)
            diffs.append(d)
            if len(diffs) >= 2:
                rate = _loglog_slope(diff_ns, diffs)[0]
        rows.append(ConvergenceRow(n=n, value=vals[i], abs_diff_prev=diff,
                                   running_rate=rate))
    fitted = rows[-1].running_rate if len(diffs) >= 2 else math.nan
    return ConvergenceStudy(rows=rows, fitted_rate=fitted, floored=floored)
