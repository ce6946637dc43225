"""Zero-sum stopping-game solver: option prices, saddle rules, perfect hedges."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .lattice import (KNOCK_OUT, BarrierSpec, BudgetError, MarketModel,
                      NonRecombiningError, StepParams, step_params)
from .payoffs import (MIN_TIME, PER_LEG, PayoffFamily, default_convention)

PATH_TREE = "path-tree"
RECOMBINING = "recombining"

MAX_PATH_TREE_STEPS = 22

__all__ = [
    "PATH_TREE", "RECOMBINING",
    "GameSolution", "HedgeStrategy", "FirstHitRule",
    "solve_game", "game_value", "european_value", "perfect_hedge",
    "widen_barrier", "all_sign_paths",
]


# ---------------------------------------------------------------------------
# Lattice levels: states, transitions and per-state payoff data
# ---------------------------------------------------------------------------

@dataclass
class _Level:
    """One time slice of the (path or recombining) lattice.

    f, g hold the discounted intrinsic payoffs without gating; `gate` is the
    buyer-side barrier indicator (alive for knock-out, crossed for knock-in).
    Child index -1 is the knocked-out absorbing state with value 0.
    """

    k: int
    price: np.ndarray
    s_til: np.ndarray
    f: np.ndarray
    g: np.ndarray
    gate: np.ndarray
    up: np.ndarray | None
    dn: np.ndarray | None
    keys: object = None

    @property
    def size(self) -> int:
        return len(self.price)


def _family_needs(family: PayoffFamily) -> tuple[bool, bool]:
    cls = family.markov_class
    return cls == "level-max", cls == "path"


def _evaluate_level(family: PayoffFamily, sp: StepParams, k: int,
                    price: np.ndarray, runmax: np.ndarray,
                    acc_f: np.ndarray, acc_d: np.ndarray
                    ) -> tuple[np.ndarray, np.ndarray]:
    disc = (1.0 + sp.r_n) ** (-k)
    f, d = family.evaluate(price, runmax, acc_f, acc_d)
    return disc * f, disc * (f + d)


def _build_path_tree(model: MarketModel, sp: StepParams, family: PayoffFamily,
                     barrier: BarrierSpec) -> list[_Level]:
    n = sp.n
    if n > MAX_PATH_TREE_STEPS:
        raise BudgetError(
            f"path-tree mode is limited to n <= {MAX_PATH_TREE_STEPS}")
    need_max, need_acc = _family_needs(family)
    knock_out = barrier.direction == KNOCK_OUT

    csum = np.zeros(1, dtype=np.int64)
    price = np.array([model.s0])
    s_til = price.copy()
    runmax = price.copy()
    acc_f = np.zeros(1)
    acc_d = np.zeros(1)
    inside = barrier.contains(price)
    crossed = ~inside

    levels: list[_Level] = []
    for k in range(n + 1):
        f, g = _evaluate_level(family, sp, k, price, runmax, acc_f, acc_d)
        gate = (~crossed if knock_out else crossed).astype(float)
        if k < n:
            m = len(price)
            dn = 2 * np.arange(m, dtype=np.int64)
            up = dn + 1
        else:
            dn = up = None
        levels.append(_Level(k=k, price=price, s_til=s_til, f=f, g=g,
                             gate=gate, up=up, dn=dn))
        if k == n:
            break
        signs = np.tile(np.array([-1, 1], dtype=np.int64), len(csum))
        csum2 = np.repeat(csum, 2) + signs
        s_til2 = model.s0 * np.exp(model.kappa * sp.h * csum2)
        price2 = model.s0 * np.exp(
            model.r * sp.dt * (k + 1) + model.kappa * sp.h * csum2)
        if need_max:
            runmax = np.maximum(np.repeat(runmax, 2), price2)
        else:
            runmax = price2
        if need_acc:
            acc_f = np.repeat(acc_f + family.f_coef * price * sp.dt, 2)
            acc_d = np.repeat(acc_d + family.penalty_coef * price * sp.dt, 2)
        else:
            acc_f = acc_d = np.zeros_like(price2)
        crossed = np.repeat(crossed, 2) | ~barrier.contains(price2)
        csum, price, s_til = csum2, price2, s_til2
    return levels


def _level_prices(model: MarketModel, sp: StepParams, k: int,
                  js: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    s_til = model.s0 * np.exp(model.kappa * sp.h * js)
    price = model.s0 * np.exp(model.r * sp.dt * k + model.kappa * sp.h * js)
    return price, s_til


def _level_ranges(model: MarketModel, sp: StepParams, barrier: BarrierSpec
                  ) -> list[tuple]:
    """Per-level (alive range, crossed range) of sign sums; ranges are
    (lo, hi) inclusive with step 2, or None when the bank is empty.

    The alive bank holds states reachable without leaving (L, R); the crossed
    bank (knock-in only) is the hull of everything fed by a barrier crossing.
    """
    knock_out = barrier.direction == KNOCK_OUT
    root_inside = bool(barrier.contains(model.s0))
    alive = (0, 0) if root_inside else None
    crossed = None if (knock_out or root_inside) else (0, 0)
    ranges = [(alive, crossed)]
    for k in range(sp.n):
        exits: list[int] = []
        if alive is not None:
            cand = np.arange(alive[0] - 1, alive[1] + 2, 2, dtype=np.int64)
            inside = barrier.contains(_level_prices(model, sp, k + 1, cand)[0])
            kept = cand[inside]
            alive_next = (int(kept[0]), int(kept[-1])) if len(kept) else None
            exits = [int(j) for j in cand[~inside]]
        else:
            alive_next = None
        if knock_out:
            crossed_next = None
        else:
            feeds = list(exits)
            if crossed is not None:
                feeds.extend([crossed[0] - 1, crossed[1] + 1])
            crossed_next = (min(feeds), max(feeds)) if feeds else None
        alive, crossed = alive_next, crossed_next
        ranges.append((alive, crossed))
    return ranges


def _range_js(rng: tuple | None) -> np.ndarray:
    if rng is None:
        return np.array([], dtype=np.int64)
    return np.arange(rng[0], rng[1] + 1, 2, dtype=np.int64)


def _materialize_level(model: MarketModel, sp: StepParams,
                       family: PayoffFamily, barrier: BarrierSpec,
                       k: int, ranges: list[tuple]) -> _Level:
    """Arrays for one level of the recombining sign-sum lattice."""
    knock_out = barrier.direction == KNOCK_OUT
    alive, crossed = ranges[k]
    alive_js = _range_js(alive)
    crossed_js = _range_js(crossed)
    js = np.concatenate([alive_js, crossed_js])
    price, s_til = _level_prices(model, sp, k, js)
    f, g = _evaluate_level(family, sp, k, price, price,
                           np.zeros_like(price), np.zeros_like(price))
    if knock_out:
        gate = np.ones(len(js))
    else:
        gate = np.concatenate([np.zeros(len(alive_js)), np.ones(len(crossed_js))])
    level = _Level(k=k, price=price, s_til=s_til, f=f, g=g, gate=gate,
                   up=None, dn=None, keys=(alive_js, crossed_js))
    if k == sp.n:
        return level

    alive_next, crossed_next = ranges[k + 1]
    n_alive = len(_range_js(alive_next))

    def child_index(child_js, from_alive):
        idx = np.full(len(child_js), -1, dtype=np.int64)
        if from_alive and alive_next is not None:
            sel = (child_js >= alive_next[0]) & (child_js <= alive_next[1])
            idx[sel] = (child_js[sel] - alive_next[0]) // 2
            rest = ~sel
        else:
            rest = np.ones(len(child_js), dtype=bool)
        if not knock_out and crossed_next is not None:
            sel = rest & (child_js >= crossed_next[0]) & (child_js <= crossed_next[1])
            idx[sel] = n_alive + (child_js[sel] - crossed_next[0]) // 2
        return idx

    level.up = np.concatenate([child_index(alive_js + 1, True),
                               child_index(crossed_js + 1, False)])
    level.dn = np.concatenate([child_index(alive_js - 1, True),
                               child_index(crossed_js - 1, False)])
    return level


def _build_level_lattice(model: MarketModel, sp: StepParams,
                         family: PayoffFamily, barrier: BarrierSpec
                         ) -> list[_Level]:
    ranges = _level_ranges(model, sp, barrier)
    return [_materialize_level(model, sp, family, barrier, k, ranges)
            for k in range(sp.n + 1)]


def _build_levelmax_lattice(model: MarketModel, sp: StepParams,
                            family: PayoffFamily, barrier: BarrierSpec
                            ) -> list[_Level]:
    """Recombining lattice keyed by (sign sum, running max of sign sums).

    Exact only when r = 0, where the running price maximum is a function of
    the running sign-sum maximum.
    """
    if model.r != 0.0:
        raise NonRecombiningError(
            "the running price maximum recombines only when r = 0")
    n = sp.n
    knock_out = barrier.direction == KNOCK_OUT

    def price_of(j):
        return model.s0 * math.exp(model.kappa * sp.h * j)

    def make_level(k, keys):
        js = np.array([key[0] for key in keys], dtype=np.int64)
        ms = np.array([key[1] for key in keys], dtype=np.int64)
        flags = np.array([key[2] for key in keys], dtype=bool)
        price, s_til = _level_prices(model, sp, k, js)
        runmax = model.s0 * np.exp(model.kappa * sp.h * ms)
        f, g = _evaluate_level(family, sp, k, price, runmax,
                               np.zeros_like(price), np.zeros_like(price))
        gate = np.ones(len(keys)) if knock_out else flags.astype(float)
        return _Level(k=k, price=price, s_til=s_til, f=f, g=g, gate=gate,
                      up=None, dn=None, keys=keys)

    root_inside = bool(barrier.contains(model.s0))
    if knock_out:
        keys = [(0, 0, False)] if root_inside else []
    else:
        keys = [(0, 0, not root_inside)]
    levels = [make_level(0, keys)]

    for k in range(n):
        children: dict[tuple, int] = {}
        up = np.full(len(keys), -1, dtype=np.int64)
        dn = np.full(len(keys), -1, dtype=np.int64)
        next_keys: list[tuple] = []

        def child(j, m, flag):
            inside = barrier.contains(price_of(j))
            if not inside:
                if knock_out:
                    return -1
                flag = True
            key = (j, m, flag)
            if key not in children:
                children[key] = len(next_keys)
                next_keys.append(key)
            return children[key]

        for i, (j, m, flag) in enumerate(keys):
            up[i] = child(j + 1, max(m, j + 1), flag)
            dn[i] = child(j - 1, m, flag)
        levels[-1].up = up
        levels[-1].dn = dn
        keys = next_keys
        levels.append(make_level(k + 1, keys))
    return levels


def build_levels(model: MarketModel, sp: StepParams, family: PayoffFamily,
                 barrier: BarrierSpec, mode: str) -> list[_Level]:
    if mode == PATH_TREE:
        return _build_path_tree(model, sp, family, barrier)
    if mode != RECOMBINING:
        raise ValueError(f"unknown mode {mode!r}")
    cls = family.markov_class
    if cls == "path":
        raise NonRecombiningError(
            "running-integral payoffs do not recombine; use path-tree mode")
    if cls == "level":
        return _build_level_lattice(model, sp, family, barrier)
    return _build_levelmax_lattice(model, sp, family, barrier)


def _seller_leg(level: _Level, barrier: BarrierSpec, convention: str) -> np.ndarray:
    """Discounted cancellation payoff; gated only for per-leg knock-out."""
    if barrier.direction == KNOCK_OUT and convention == PER_LEG:
        return level.g * level.gate
    return level.g


def _pick(values: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """values[idx] with child -1 mapped to the absorbed value 0."""
    if values.size == 0:
        return np.zeros(len(idx))
    out = values[np.maximum(idx, 0)]
    return np.where(idx >= 0, out, 0.0)


# ---------------------------------------------------------------------------
# Stopping rules
# ---------------------------------------------------------------------------

class FirstHitRule:
    """Stopping rule: stop at the first level whose state is marked, capped at n.

    Entering the knocked-out absorbing state counts as marked (every payoff and
    value there is zero, so both players are indifferent and stop)."""

    def __init__(self, levels: list[_Level], fire: list[np.ndarray]):
        self.levels = levels
        self.fire = fire
        self.n = len(levels) - 1

    def evaluate(self, signs: np.ndarray, valid: np.ndarray | None = None
                 ) -> np.ndarray:
        """First-hit indices for a batch of sign paths (rows of +-1).

        Paths shorter than n (valid[i] columns meaningful) that have not fired
        return n, which callers treat as "not within the observed prefix"."""
        signs = np.atleast_2d(np.asarray(signs))
        B, K = signs.shape
        if valid is None:
            valid = np.full(B, K)
        idx = np.full(B, self.n, dtype=np.int64)
        state = np.zeros(B, dtype=np.int64)
        if self.levels[0].size == 0:
            return np.zeros(B, dtype=np.int64)
        stopped = self.fire[0][0] & np.ones(B, dtype=bool)
        idx[stopped] = 0
        for k in range(min(K, self.n)):
            active = ~stopped & (k < valid)
            if not active.any():
                break
            level = self.levels[k]
            walk = np.where(active, state, -1)
            nxt = np.where(signs[:, k] > 0, _pick_idx(level.up, walk),
                           _pick_idx(level.dn, walk))
            state = np.where(active, nxt, -1)
            dead = active & (state < 0)
            hit = active & ~dead & _pick_bool(self.fire[k + 1], state)
            newly = dead | hit
            idx[newly] = k + 1
            stopped |= newly
        return idx

    def earliest(self) -> int:
        """Smallest index at which the rule can fire on some reachable path."""
        if self.levels[0].size == 0:
            return 0
        active = np.zeros(self.levels[0].size, dtype=bool)
        active[0] = True
        for k, level in enumerate(self.levels):
            if (active & self.fire[k]).any():
                return k
            if k == self.n:
                break
            keep = active & ~self.fire[k]
            nxt = np.zeros(self.levels[k + 1].size, dtype=bool)
            dead = False
            for child in (level.up, level.dn):
                sel = child[keep]
                dead = dead or bool((sel < 0).any())
                nxt[sel[sel >= 0]] = True
            if dead:
                return k + 1
            active = nxt
        return self.n


def _pick_idx(child: np.ndarray, state: np.ndarray) -> np.ndarray:
    safe = np.maximum(state, 0)
    out = child[safe] if len(child) else np.full(len(state), -1, dtype=np.int64)
    return np.where(state >= 0, out, -1)


def _pick_bool(flags: np.ndarray, state: np.ndarray) -> np.ndarray:
    if len(flags) == 0:
        return np.zeros(len(state), dtype=bool)
    return flags[np.maximum(state, 0)] & (state >= 0)


# ---------------------------------------------------------------------------
# Game solution
# ---------------------------------------------------------------------------

@dataclass
class GameSolution:
    """Value process and saddle stopping rules of the discrete stopping game."""

    model: MarketModel
    sp: StepParams
    family: PayoffFamily
    barrier: BarrierSpec
    convention: str
    mode: str
    value: float
    levels: list[_Level]
    value_process: list[np.ndarray]
    fire_sigma: list[np.ndarray]
    fire_tau: list[np.ndarray]

    @property
    def n(self) -> int:
        return self.sp.n

    @property
    def sigma_star(self) -> FirstHitRule:
        return FirstHitRule(self.levels, self.fire_sigma)

    @property
    def tau_star(self) -> FirstHitRule:
        return FirstHitRule(self.levels, self.fire_tau)

    def buyer_leg(self, k: int) -> np.ndarray:
        level = self.levels[k]
        return level.f * level.gate

    def seller_leg(self, k: int) -> np.ndarray:
        return _seller_leg(self.levels[k], self.barrier, self.convention)

    def legs_on_paths(self, signs: np.ndarray
                      ) -> tuple[np.ndarray, np.ndarray]:
        """Discounted (buyer, seller) legs along sign paths, (B, n+1) each;
        knocked-out states contribute zero."""
        signs = np.atleast_2d(np.asarray(signs))
        B, K = signs.shape
        y = np.zeros((B, K + 1))
        x = np.zeros((B, K + 1))
        state = np.zeros(B, dtype=np.int64)
        if self.levels[0].size == 0:
            state[:] = -1
        for k in range(K + 1):
            y[:, k] = _pick(self.buyer_leg(k), state)
            x[:, k] = _pick(self.seller_leg(k), state)
            if k < K:
                level = self.levels[k]
                state = np.where(signs[:, k] > 0, _pick_idx(level.up, state),
                                 _pick_idx(level.dn, state))
        return y, x

    def best_responses(self) -> tuple[float, float]:
        """(sup over buyer rules against sigma*, inf over seller rules against
        tau*); the value must lie between the two."""
        p = self.sp.p_tilde
        levels, n = self.levels, self.n
        if levels[0].size == 0:
            return 0.0, 0.0
        br = self.buyer_leg(n)
        sr = self.buyer_leg(n)
        for k in range(n - 1, -1, -1):
            level = levels[k]
            cont_b = p * _pick(br, level.up) + (1.0 - p) * _pick(br, level.dn)
            cont_s = p * _pick(sr, level.up) + (1.0 - p) * _pick(sr, level.dn)
            ytil = self.buyer_leg(k)
            xtil = self.seller_leg(k)
            br = np.where(self.fire_sigma[k], np.maximum(ytil, xtil),
                          np.maximum(ytil, cont_b))
            sr = np.where(self.fire_tau[k], ytil, np.minimum(xtil, cont_s))
        return float(br[0]), float(sr[0])


def _resolve_convention(barrier: BarrierSpec, convention: str | None) -> str:
    if convention is None:
        return default_convention(barrier)
    if convention not in (PER_LEG, MIN_TIME):
        raise ValueError(f"unknown convention {convention!r}")
    return convention


def solve_game(model: MarketModel, n: int, family: PayoffFamily,
               barrier: BarrierSpec, convention: str | None = None,
               mode: str = PATH_TREE) -> GameSolution:
    """Solve the stopping game for the barrier option price.

    Backward recursion V_n = Ytil_n, V_k = min(Xtil_k, max(Ytil_k, E V_{k+1}))
    under the martingale up-probability.
    """
    sp = step_params(model, n)
    convention = _resolve_convention(barrier, convention)
    levels = build_levels(model, sp, family, barrier, mode)
    p = sp.p_tilde

    values: list[np.ndarray] = [np.zeros(0)] * (n + 1)
    fire_sigma: list[np.ndarray] = [np.zeros(0, dtype=bool)] * (n + 1)
    fire_tau: list[np.ndarray] = [np.zeros(0, dtype=bool)] * (n + 1)

    v = levels[n].f * levels[n].gate
    values[n] = v
    fire_sigma[n] = np.ones(levels[n].size, dtype=bool)
    fire_tau[n] = np.ones(levels[n].size, dtype=bool)
    for k in range(n - 1, -1, -1):
        level = levels[k]
        cont = p * _pick(v, level.up) + (1.0 - p) * _pick(v, level.dn)
        ytil = level.f * level.gate
        xtil = _seller_leg(level, barrier, convention)
        v = np.minimum(xtil, np.maximum(ytil, cont))
        values[k] = v
        fire_sigma[k] = xtil == v
        fire_tau[k] = ytil == v

    value = float(values[0][0]) if levels[0].size else 0.0
    return GameSolution(model=model, sp=sp, family=family, barrier=barrier,
                        convention=convention, mode=mode, value=value,
                        levels=levels, value_process=values,
                        fire_sigma=fire_sigma, fire_tau=fire_tau)


def _iter_levels_backward(model: MarketModel, sp: StepParams,
                          family: PayoffFamily, barrier: BarrierSpec,
                          mode: str):
    """Levels from k = n down to 0 without holding the whole lattice when the
    sign-sum reduction applies."""
    if mode == RECOMBINING and family.markov_class == "level":
        ranges = _level_ranges(model, sp, barrier)
        for k in range(sp.n, -1, -1):
            yield _materialize_level(model, sp, family, barrier, k, ranges)
    else:
        levels = build_levels(model, sp, family, barrier, mode)
        yield from reversed(levels)


def _backward_value(sp: StepParams, barrier: BarrierSpec, convention: str,
                    level_iter, p: float, game: bool) -> float:
    v = None
    root = 0.0
    for level in level_iter:
        if v is None:
            v = level.f * level.gate
        else:
            cont = p * _pick(v, level.up) + (1.0 - p) * _pick(v, level.dn)
            if game:
                ytil = level.f * level.gate
                xtil = _seller_leg(level, barrier, convention)
                v = np.minimum(xtil, np.maximum(ytil, cont))
            else:
                v = cont
        if level.k == 0:
            root = float(v[0]) if level.size else 0.0
    return root


def game_value(model: MarketModel, n: int, family: PayoffFamily,
               barrier: BarrierSpec, convention: str | None = None,
               mode: str = RECOMBINING) -> float:
    """Option price only, streaming levels so large n stays cheap."""
    sp = step_params(model, n)
    convention = _resolve_convention(barrier, convention)
    it = _iter_levels_backward(model, sp, family, barrier, mode)
    return _backward_value(sp, barrier, convention, it, sp.p_tilde, game=True)


def european_value(model: MarketModel, n: int, family: PayoffFamily,
                   barrier: BarrierSpec, mode: str = RECOMBINING) -> float:
    """Price with both players forced to hold to maturity: E[Ytil_n] under the
    martingale measure."""
    sp = step_params(model, n)
    convention = _resolve_convention(barrier, None)
    it = _iter_levels_backward(model, sp, family, barrier, mode)
    return _backward_value(sp, barrier, convention, it, sp.p_tilde, game=False)


def widen_barrier(barrier: BarrierSpec, n: int, exponent: float = 1.0 / 3.0,
                  scale: float = 1.0) -> BarrierSpec:
    """Push both barriers out by the factor exp(scale * n^-exponent)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    factor = math.exp(scale * n ** (-exponent))
    lo = barrier.L / factor
    hi = barrier.R if math.isinf(barrier.R) else barrier.R * factor
    return BarrierSpec(lo, hi, barrier.direction)


# ---------------------------------------------------------------------------
# Hedge strategies
# ---------------------------------------------------------------------------

class _ZeroSource:
    """No trading: the discounted portfolio stays at the initial capital."""

    def start(self, batch: int) -> np.ndarray:
        return np.zeros(batch, dtype=np.int64)

    def advance(self, state: np.ndarray, k: int, up_mask: np.ndarray) -> np.ndarray:
        return state

    def u(self, state: np.ndarray, k: int, y: np.ndarray) -> np.ndarray:
        return np.zeros(len(state))


class _TableSource:
    """Stock positions read from per-level per-state tables."""

    def __init__(self, levels: list[_Level], u_tables: list[np.ndarray]):
        self.levels = levels
        self.u_tables = u_tables

    def start(self, batch: int) -> np.ndarray:
        return np.zeros(batch, dtype=np.int64)

    def advance(self, state: np.ndarray, k: int, up_mask: np.ndarray) -> np.ndarray:
        level = self.levels[k]
        return np.where(up_mask, _pick_idx(level.up, state),
                        _pick_idx(level.dn, state))

    def u(self, state: np.ndarray, k: int, y: np.ndarray) -> np.ndarray:
        return _pick(self.u_tables[k], state)


class HedgeStrategy:
    """Self-financing strategy on the n-step lattice plus a cancellation rule.

    The per-step stock position is expressed as the discounted position value
    u_k = gamma_{k+1} * S_til_k; portfolio evolution is then
    y_{k+1} = y_k + u_k * (a1 or a2).
    """

    def __init__(self, model: MarketModel, sp: StepParams, initial_capital: float,
                 source, cancel: FirstHitRule | None,
                 freeze_on_cancel: bool = False):
        self.model = model
        self.sp = sp
        self.initial_capital = float(initial_capital)
        self.source = source
        self.cancel = cancel
        self.freeze_on_cancel = freeze_on_cancel

    @classmethod
    def constant(cls, model: MarketModel, sp: StepParams,
                 x: float) -> "HedgeStrategy":
        """Buy-and-hold-nothing portfolio with discounted value x."""
        return cls(model, sp, x, _ZeroSource(), cancel=None)

    def cancel_indices(self, signs: np.ndarray,
                       valid: np.ndarray | None = None) -> np.ndarray:
        if self.cancel is None:
            signs = np.atleast_2d(signs)
            return np.full(signs.shape[0], self.sp.n, dtype=np.int64)
        return self.cancel.evaluate(signs, valid)

    def replay(self, signs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Walk sign paths, returning (values (B,K+1), u (B,K), gamma (B,K))."""
        signs = np.atleast_2d(np.asarray(signs))
        B, K = signs.shape
        sp = self.sp
        values = np.empty((B, K + 1))
        us = np.empty((B, K))
        gammas = np.empty((B, K))
        y = np.full(B, self.initial_capital)
        values[:, 0] = y
        state = self.source.start(B)
        frozen = np.zeros(B, dtype=bool)
        if self.freeze_on_cancel and self.cancel is not None:
            cancel_at = self.cancel.evaluate(signs)
        else:
            cancel_at = np.full(B, K + 1, dtype=np.int64)
        s_til = np.full(B, self.model.s0)
        for k in range(K):
            frozen = cancel_at <= k
            u = np.where(frozen, 0.0, self.source.u(state, k, y))
            us[:, k] = u
            gammas[:, k] = u / s_til
            up = signs[:, k] > 0
            y = y + u * np.where(up, sp.a1, sp.a2)
            values[:, k + 1] = y
            state = self.source.advance(state, k, up)
            s_til = s_til * np.where(up, 1.0 + sp.a1, 1.0 + sp.a2)
        return values, us, gammas

    def values_tree(self) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Portfolio values and positions on every path-tree node."""
        n = self.sp.n
        signs = all_sign_paths(n)
        values, us, _ = self.replay(signs)
        val_levels = []
        u_levels = []
        for k in range(n + 1):
            rows = np.arange(2 ** k) << (n - k)
            val_levels.append(values[rows, k])
            if k < n:
                u_levels.append(us[rows, k])
        return val_levels, u_levels

    def beta(self, signs: np.ndarray) -> np.ndarray:
        """Bond units beta_{k+1} along paths, from the self-financing identity."""
        values, us, _ = self.replay(signs)
        return (values[:, :-1] - us) / self.model.b0


def all_sign_paths(n: int) -> np.ndarray:
    """All 2^n sign paths; row order matches path-tree node indexing."""
    rows = np.arange(2 ** n, dtype=np.int64)
    bits = (rows[:, None] >> np.arange(n - 1, -1, -1)[None, :]) & 1
    return (2 * bits - 1).astype(np.int64)


def perfect_hedge(solution: GameSolution, x: float | None = None) -> HedgeStrategy:
    """Doob-decomposition superhedge started from capital x >= V_0.

    gamma_{k+1} replicates the one-step spread of the value process; the
    portfolio freezes once the cancellation rule fires.
    """
    if x is None:
        x = solution.value
    if x < solution.value - 1e-12:
        raise ValueError("initial capital below the option value")
    sp = solution.sp
    spread = sp.a1 - sp.a2
    u_tables = []
    for k in range(solution.n):
        level = solution.levels[k]
        vnext = solution.value_process[k + 1]
        vu = _pick(vnext, level.up)
        vd = _pick(vnext, level.dn)
        u_tables.append((vu - vd) / spread)
    source = _TableSource(solution.levels, u_tables)
    return HedgeStrategy(solution.model, sp, x, source,
                         cancel=solution.sigma_star, freeze_on_cancel=True)
