"""Capital-constrained shortfall risk: grid dynamic program, optimal hedge
extraction and the exact risk audit for a given strategy."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lattice import (BarrierSpec, BudgetError, MarketModel, StepParams,
                      step_params)
from .payoffs import PayoffFamily
from .dynkin import (PATH_TREE, FirstHitRule, HedgeStrategy, _Level,
                     _pick, _pick_idx, _resolve_convention, _seller_leg,
                     build_levels)

__all__ = [
    "AdmissibleInterval", "GridConfig", "RiskSurface", "ShortfallAudit",
    "admissible_interval", "solve_shortfall", "extract_optimal_hedge",
    "portfolio_risk",
]

MAX_TREE_STEPS = 16


@dataclass(frozen=True)
class AdmissibleInterval:
    """Stock-position values u keeping both one-step portfolio outcomes >= 0."""

    lo: float
    hi: float

    def clip(self, u: float) -> float:
        return min(max(u, self.lo), self.hi)


def admissible_interval(y: float, sp: StepParams) -> AdmissibleInterval:
    """[-y/a1, -y/a2]; degenerate {0} at y = 0."""
    if y < 0.0:
        raise ValueError("portfolio value must be nonnegative")
    return AdmissibleInterval(lo=-y / sp.a1, hi=-y / sp.a2)


@dataclass(frozen=True)
class GridConfig:
    """Portfolio-value grid: m points on [0, y_max], m_u position candidates
    per minimization, `refine` bisection passes around the best candidate."""

    m: int = 513
    m_u: int = 129
    refine: int = 20

    def __post_init__(self) -> None:
        if self.m < 2:
            raise ValueError("grid needs at least 2 points")
        if self.m_u < 2:
            raise ValueError("need at least 2 position candidates")
        if self.refine < 0:
            raise ValueError("refine must be nonnegative")


@dataclass
class RiskSurface:
    """Per-node shortfall tables J_k on the portfolio-value grid.

    j_values[k] has one row per lattice state at step k; h_selectors[k] holds
    the risk-minimizing position value at each grid point."""

    model: MarketModel
    sp: StepParams
    family: PayoffFamily
    barrier: BarrierSpec
    convention: str
    mode: str
    grid_cfg: GridConfig
    grid: np.ndarray
    y_max: float
    j_values: list[np.ndarray]
    h_selectors: list[np.ndarray]
    levels: list[_Level]

    @property
    def n(self) -> int:
        return self.sp.n

    def risk_at(self, x: float) -> float:
        """Linear interpolation of the root table; 0 beyond the grid."""
        if x < 0.0:
            raise ValueError("initial capital must be nonnegative")
        if self.y_max <= 0.0 or self.j_values[0].size == 0:
            return 0.0
        return float(np.interp(x, self.grid, self.j_values[0][0]))


class _UGrid:
    """Shared geometry of the inner minimization.

    Positions are parametrized as u = y * v with v in [-1/a1, -1/a2], so one
    candidate fraction set serves every portfolio value."""

    def __init__(self, sp: StepParams, grid: np.ndarray, cfg: GridConfig):
        self.p = sp.p
        self.a1 = sp.a1
        self.a2 = sp.a2
        self.grid = grid
        self.step = grid[1] - grid[0]
        self.last = len(grid) - 1
        self.refine = cfg.refine
        vs = np.linspace(-1.0 / sp.a1, -1.0 / sp.a2, cfg.m_u)
        if not (vs == 0.0).any():
            vs = np.sort(np.append(vs, 0.0))
        self.v = vs
        # grid positions of y * (1 + v * a) for every (grid point, candidate)
        self.cu = 1.0 + vs * sp.a1
        self.cd = 1.0 + vs * sp.a2
        self.iu, self.wu = self._locate(grid[:, None] * self.cu[None, :])
        self.id_, self.wd = self._locate(grid[:, None] * self.cd[None, :])

    def _locate(self, args: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pos = np.clip(args / self.step, 0.0, float(self.last))
        i0 = np.minimum(pos.astype(np.int64), self.last - 1)
        return i0, pos - i0

    def interp_grid(self, tab: np.ndarray, i0: np.ndarray, w: np.ndarray
                    ) -> np.ndarray:
        """tab (C, m) at precomputed grid positions (m, m_u) -> (C, m, m_u)."""
        return tab[:, i0] * (1.0 - w) + tab[:, i0 + 1] * w

    def interp_rows(self, tab: np.ndarray, args: np.ndarray) -> np.ndarray:
        """tab (C, m) at per-row positions args (C, ...) -> (C, ...)."""
        i0, w = self._locate(args)
        flat = i0.reshape(len(tab), -1)
        lo = np.take_along_axis(tab, flat, axis=1).reshape(i0.shape)
        hi = np.take_along_axis(tab, flat + 1, axis=1).reshape(i0.shape)
        return lo * (1.0 - w) + hi * w

    def _phi_at(self, tab_up: np.ndarray, tab_dn: np.ndarray, y: np.ndarray,
                v: np.ndarray) -> np.ndarray:
        up = self.interp_rows(tab_up, y * (1.0 + v * self.a1))
        dn = self.interp_rows(tab_dn, y * (1.0 + v * self.a2))
        return self.p * up + (1.0 - self.p) * dn

    def _refine(self, tab_up, tab_dn, y, v_lo, v_best, v_hi, f_lo, f_best, f_hi):
        """Bisect neighbours of the best candidate; ties keep the smallest v."""
        for _ in range(self.refine):
            m1 = 0.5 * (v_lo + v_best)
            m2 = 0.5 * (v_best + v_hi)
            f_m1 = self._phi_at(tab_up, tab_dn, y, m1)
            f_m2 = self._phi_at(tab_up, tab_dn, y, m2)
            vs = np.stack([v_lo, m1, v_best, m2, v_hi])
            fs = np.stack([f_lo, f_m1, f_best, f_m2, f_hi])
            j = fs.argmin(axis=0)
            jj = j[None, ...]
            pick = lambda arr, off: np.take_along_axis(
                arr, np.clip(jj + off, 0, 4), axis=0)[0]
            v_lo, f_lo = pick(vs, -1), pick(fs, -1)
            v_hi, f_hi = pick(vs, +1), pick(fs, +1)
            v_best, f_best = pick(vs, 0), pick(fs, 0)
        return v_best, f_best

    def minimize_tables(self, tab_up: np.ndarray, tab_dn: np.ndarray
                        ) -> tuple[np.ndarray, np.ndarray]:
        """Minimize over positions for every grid y; tabs (C, m).

        Returns (continuation (C, m), selector u (C, m))."""
        phi = (self.p * self.interp_grid(tab_up, self.iu, self.wu)
               + (1.0 - self.p) * self.interp_grid(tab_dn, self.id_, self.wd))
        fbest = phi.min(axis=2)
        jbest = (phi == fbest[..., None]).argmax(axis=2)
        lo = np.maximum(jbest - 1, 0)
        hi = np.minimum(jbest + 1, len(self.v) - 1)
        take = lambda idx: np.take_along_axis(phi, idx[..., None], axis=2)[..., 0]
        y = self.grid[None, :]
        v_best, f_best = self._refine(
            tab_up, tab_dn, y, self.v[lo], self.v[jbest], self.v[hi],
            take(lo), fbest, take(hi))
        return f_best, y * v_best

    def minimize_at(self, tab_up: np.ndarray, tab_dn: np.ndarray, y: np.ndarray
                    ) -> tuple[np.ndarray, np.ndarray]:
        """Minimize at one portfolio value per row; tabs (B, m), y (B,).

        Returns (continuation (B,), selector u (B,))."""
        yc = y[:, None]
        up = self.interp_rows(tab_up, yc * self.cu[None, :])
        dn = self.interp_rows(tab_dn, yc * self.cd[None, :])
        phi = self.p * up + (1.0 - self.p) * dn
        fbest = phi.min(axis=1)
        jbest = (phi == fbest[:, None]).argmax(axis=1)
        lo = np.maximum(jbest - 1, 0)
        hi = np.minimum(jbest + 1, len(self.v) - 1)
        take = lambda idx: np.take_along_axis(phi, idx[:, None], axis=1)[:, 0]
        v_best, f_best = self._refine(
            tab_up, tab_dn, y[:, None], self.v[lo][:, None],
            self.v[jbest][:, None], self.v[hi][:, None],
            take(lo)[:, None], fbest[:, None], take(hi)[:, None])
        return f_best[:, 0], y * v_best[:, 0]


def _gather_tables(tables: np.ndarray, rows: np.ndarray, m: int) -> np.ndarray:
    """Child tables with the knocked-out sink mapped to the zero table."""
    if tables.size == 0:
        return np.zeros((len(rows), m))
    out = tables[np.maximum(rows, 0)]
    out[rows < 0] = 0.0
    return out


def _check_tree_budget(mode: str, n: int, max_tree_n: int) -> None:
    if mode == PATH_TREE and n > max_tree_n:
        raise BudgetError(
            f"path-tree shortfall is limited to n <= {max_tree_n}; "
            "use recombining mode for larger n")


def solve_shortfall(model: MarketModel, n: int, family: PayoffFamily,
                    barrier: BarrierSpec, x: float,
                    grid_cfg: GridConfig = GridConfig(),
                    convention: str | None = None, mode: str = PATH_TREE,
                    max_tree_n: int = MAX_TREE_STEPS
                    ) -> tuple[float, RiskSurface]:
    """Shortfall risk J_0(x) by backward recursion on the portfolio grid.

    The inner infimum runs over admissible positions under the objective
    up-probability; the cancellation leg is barrier-gated exactly as in the
    settlement convention.
    """
    if x < 0.0:
        raise ValueError("initial capital must be nonnegative")
    sp = step_params(model, n)
    convention = _resolve_convention(barrier, convention)
    _check_tree_budget(mode, n, max_tree_n)
    levels = build_levels(model, sp, family, barrier, mode)

    y_max = 0.0
    for level in levels:
        if level.size:
            leg = _seller_leg(level, barrier, convention)
            y_max = max(y_max, float(leg.max()))

    m = grid_cfg.m
    if y_max <= 0.0 or levels[0].size == 0:
        grid = np.linspace(0.0, 1.0, m)
        j_values = [np.zeros((level.size, m)) for level in levels]
        selectors = [np.zeros((level.size, m)) for level in levels[:-1]]
        surface = RiskSurface(model=model, sp=sp, family=family,
                              barrier=barrier, convention=convention,
                              mode=mode, grid_cfg=grid_cfg, grid=grid,
                              y_max=0.0, j_values=j_values,
                              h_selectors=selectors, levels=levels)
        return 0.0, surface

    grid = np.linspace(0.0, y_max, m)
    ug = _UGrid(sp, grid, grid_cfg)

    j_values: list[np.ndarray] = [None] * (n + 1)  # type: ignore[list-item]
    selectors: list[np.ndarray] = [None] * n       # type: ignore[list-item]

    terminal = levels[n]
    j_values[n] = np.maximum(
        (terminal.f * terminal.gate)[:, None] - grid[None, :], 0.0)

    chunk = max(1, (1 << 22) // (m * len(ug.v)))
    for k in range(n - 1, -1, -1):
        level = levels[k]
        size = level.size
        jnext = j_values[k + 1]
        buyer = np.maximum((level.f * level.gate)[:, None] - grid[None, :], 0.0)
        seller = np.maximum(
            _seller_leg(level, barrier, convention)[:, None] - grid[None, :], 0.0)
        jk = np.empty((size, m))
        uk = np.empty((size, m))
        for lo in range(0, size, chunk):
            hi = min(lo + chunk, size)
            tab_up = _gather_tables(jnext, level.up[lo:hi], m)
            tab_dn = _gather_tables(jnext, level.dn[lo:hi], m)
            cont, usel = ug.minimize_tables(tab_up, tab_dn)
            jk[lo:hi] = np.minimum(seller[lo:hi],
                                   np.maximum(buyer[lo:hi], cont))
            uk[lo:hi] = usel
        # Lemma-style monotonicity in y holds in the continuum; enforce it
        # exactly against sub-grid refinement artifacts.
        np.minimum.accumulate(jk, axis=1, out=jk)
        j_values[k] = jk
        selectors[k] = uk

    surface = RiskSurface(model=model, sp=sp, family=family, barrier=barrier,
                          convention=convention, mode=mode, grid_cfg=grid_cfg,
                          grid=grid, y_max=y_max, j_values=j_values,
                          h_selectors=selectors, levels=levels)
    return surface.risk_at(x), surface


class _SurfaceSource:
    """Stock positions re-minimized from the stored risk tables at the exact
    running portfolio value."""

    def __init__(self, surface: RiskSurface):
        self.surface = surface
        self.degenerate = surface.y_max <= 0.0 or surface.levels[0].size == 0
        if not self.degenerate:
            self.ug = _UGrid(surface.sp, surface.grid, surface.grid_cfg)

    def start(self, batch: int) -> np.ndarray:
        return np.zeros(batch, dtype=np.int64)

    def advance(self, state: np.ndarray, k: int, up_mask: np.ndarray) -> np.ndarray:
        level = self.surface.levels[k]
        return np.where(up_mask, _pick_idx(level.up, state),
                        _pick_idx(level.dn, state))

    def u(self, state: np.ndarray, k: int, y: np.ndarray) -> np.ndarray:
        if self.degenerate:
            return np.zeros(len(state))
        level = self.surface.levels[k]
        jnext = self.surface.j_values[k + 1]
        m = len(self.surface.grid)
        rows_up = _pick_idx(level.up, state)
        rows_dn = _pick_idx(level.dn, state)
        dead = state < 0
        rows_up[dead] = -1
        rows_dn[dead] = -1
        tab_up = _gather_tables(jnext, rows_up, m)
        tab_dn = _gather_tables(jnext, rows_dn, m)
        _, u = self.ug.minimize_at(tab_up, tab_dn, y)
        return u


def extract_optimal_hedge(surface: RiskSurface, x: float) -> HedgeStrategy:
    """Risk-minimizing hedge started at capital x, with the cancellation rule
    read off the exact risk process of the extracted strategy."""
    if x < 0.0:
        raise ValueError("initial capital must be nonnegative")
    strategy = HedgeStrategy(surface.model, surface.sp, x,
                             _SurfaceSource(surface), cancel=None)
    audit = portfolio_risk(surface.model, surface.n, surface.family,
                           surface.barrier, strategy,
                           convention=surface.convention)
    strategy.cancel = audit.sigma
    return strategy


@dataclass
class ShortfallAudit:
    """Exact risk process of a given hedge on the full path tree."""

    w0: float
    w_levels: list[np.ndarray]
    sigma: FirstHitRule
    portfolio_levels: list[np.ndarray]


def portfolio_risk(model: MarketModel, n: int, family: PayoffFamily,
                   barrier: BarrierSpec, strategy: HedgeStrategy,
                   convention: str | None = None,
                   max_tree_n: int = MAX_TREE_STEPS) -> ShortfallAudit:
    """Risk of `strategy` by the exact backward recursion (no grid):

    W_n = (Ytil_n - V_n)^+,
    W_k = min((Xtil_k - V_k)^+, max((Ytil_k - V_k)^+, E W_{k+1}))
    under the objective measure, with the cancellation rule firing at the
    first index where the cancellation shortfall attains W.
    """
    sp = step_params(model, n)
    if strategy.sp.n != n:
        raise ValueError("strategy horizon does not match n")
    convention = _resolve_convention(barrier, convention)
    _check_tree_budget(PATH_TREE, n, max_tree_n)
    levels = build_levels(model, sp, family, barrier, PATH_TREE)
    port, _ = strategy.values_tree()

    p = sp.p
    w_levels: list[np.ndarray] = [None] * (n + 1)  # type: ignore[list-item]
    fire: list[np.ndarray] = [None] * (n + 1)      # type: ignore[list-item]

    terminal = levels[n]
    w = np.maximum(terminal.f * terminal.gate - port[n], 0.0)
    w_levels[n] = w
    fire[n] = np.ones(terminal.size, dtype=bool)
    for k in range(n - 1, -1, -1):
        level = levels[k]
        cont = p * w[level.up] + (1.0 - p) * w[level.dn]
        buyer = np.maximum(level.f * level.gate - port[k], 0.0)
        seller = np.maximum(
            _seller_leg(level, barrier, convention) - port[k], 0.0)
        w = np.minimum(seller, np.maximum(buyer, cont))
        w_levels[k] = w
        fire[k] = seller == w

    sigma = FirstHitRule(levels, fire)
    return ShortfallAudit(w0=float(w_levels[0][0]), w_levels=w_levels,
                          sigma=sigma, portfolio_levels=port)
