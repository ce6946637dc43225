"""Pricing and risk engine for game options with knock-out/knock-in barriers."""

from .lattice import (KNOCK_IN, KNOCK_OUT, BarrierSpec, MarketModel,
                      NonRecombiningError, PathPrefix, StepParams,
                      barrier_exit_index, prices_along, state_space,
                      step_params)
from .payoffs import (GAME_CALL, GAME_PUT, INTEGRAL_CALL, INTEGRAL_PUT,
                      MIN_TIME, PER_LEG, RUSSIAN, GatedPayoffs, PayoffFamily,
                      default_convention, dynkin_kernel, gated_discounted,
                      intrinsic)
from .dynkin import (PATH_TREE, RECOMBINING, FirstHitRule, GameSolution,
                     HedgeStrategy, all_sign_paths, european_value,
                     perfect_hedge, solve_game, widen_barrier)
from .shortfall import (AdmissibleInterval, GridConfig, RiskSurface,
                        admissible_interval, extract_optimal_hedge,
                        portfolio_risk, solve_shortfall)

__all__ = [
    "KNOCK_IN", "KNOCK_OUT", "BarrierSpec", "MarketModel",
    "NonRecombiningError", "PathPrefix", "StepParams",
    "barrier_exit_index", "prices_along", "state_space", "step_params",
    "GAME_CALL", "GAME_PUT", "INTEGRAL_CALL", "INTEGRAL_PUT",
    "MIN_TIME", "PER_LEG", "RUSSIAN", "GatedPayoffs", "PayoffFamily",
    "default_convention", "dynkin_kernel", "gated_discounted", "intrinsic",
    "PATH_TREE", "RECOMBINING", "FirstHitRule", "GameSolution",
    "HedgeStrategy", "all_sign_paths", "european_value", "perfect_hedge",
    "solve_game", "widen_barrier",
    "AdmissibleInterval", "GridConfig", "RiskSurface", "admissible_interval",
    "extract_optimal_hedge", "portfolio_risk", "solve_shortfall",
]

__version__ = "0.1.0"
