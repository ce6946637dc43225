"""Command-line front end: JSON experiment configs in, JSON results and CSV
tables out."""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .lattice import (KNOCK_OUT, BarrierSpec, BudgetError, MarketModel,
                      NonRecombiningError)
from .payoffs import MIN_TIME, PER_LEG, PayoffFamily
from .dynkin import (PATH_TREE, RECOMBINING, perfect_hedge, solve_game,
                     widen_barrier)
from .shortfall import GridConfig, extract_optimal_hedge, solve_shortfall
from .embedding import (BRIDGE, GRID, MARTINGALE, OBJECTIVE, _loglog_slope,
                        convergence_study, estimate_shortfall_mc)

__all__ = ["ConfigError", "ExperimentConfig", "parse_config", "config_to_json",
           "run", "fit_rate", "main"]

COMMANDS = ("price", "shortfall", "hedge", "simulate", "converge")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class SimConfig:
    paths: int = 10_000
    dt_divisor: int = 400
    seed: int = 0
    refine: str = BRIDGE
    measure: str = OBJECTIVE
    hedge: str = "perfect"
    candidates: tuple | None = None


@dataclass(frozen=True)
class WidenConfig:
    mode: str = "off"        # off | out | in
    beta: float = 0.05       # knock-in schedule parameter
    exponent: float | None = None
    scale: float | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    model: MarketModel
    payoff: PayoffFamily
    barrier: BarrierSpec
    n: int | None = None
    n_list: tuple[int, ...] | None = None
    x: float | None = None
    mode: str = "auto"
    convention: str | None = None
    quantity: str = "game"
    grid: GridConfig = field(default_factory=GridConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    widen: WidenConfig = field(default_factory=WidenConfig)

    def resolve_mode(self) -> str:
        if self.mode != "auto":
            return self.mode
        return PATH_TREE if self.payoff.markov_class == "path" else RECOMBINING

    def effective_barrier(self, n: int) -> BarrierSpec:
        w = self.widen
        if w.mode == "off":
            return self.barrier
        if w.mode == "out":
            exponent = w.exponent if w.exponent is not None else 1.0 / 3.0
            scale = w.scale if w.scale is not None else 1.0
        elif w.mode == "in":
            exponent = w.exponent if w.exponent is not None else 0.25 - w.beta
            scale = w.scale if w.scale is not None else 2.0
        else:
            raise ConfigError(f"unknown widen mode {w.mode!r}")
        return widen_barrier(self.barrier, n, exponent, scale)


def _check_keys(obj: dict, allowed: Sequence[str], where: str) -> None:
    unknown = set(obj) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


def _require(obj: dict, key: str, where: str) -> Any:
    if key not in obj:
        raise ConfigError(f"missing key {key!r} in {where}")
    return obj[key]


def _parse_model(obj: dict) -> MarketModel:
    _check_keys(obj, ("s0", "r", "mu", "kappa", "T", "b0"), "model")
    try:
        return MarketModel(s0=float(_require(obj, "s0", "model")),
                           r=float(obj.get("r", 0.0)),
                           mu=float(obj.get("mu", 0.0)),
                           kappa=float(_require(obj, "kappa", "model")),
                           T=float(_require(obj, "T", "model")),
                           b0=float(obj.get("b0", 1.0)))
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from exc


def _parse_payoff(obj: dict) -> PayoffFamily:
    kind = _require(obj, "kind", "payoff")
    fields = {
        "game-put": ("strike", "penalty"),
        "game-call": ("strike", "penalty"),
        "russian": ("floor", "penalty_rate"),
        "integral-put": ("strike", "f_coef", "penalty_coef"),
        "integral-call": ("strike", "f_coef", "penalty_coef"),
    }
    if kind not in fields:
        raise ConfigError(f"unknown payoff kind {kind!r}")
    _check_keys(obj, ("kind",) + fields[kind], "payoff")
    try:
        params = {name: float(_require(obj, name, "payoff"))
                  for name in fields[kind]}
        return PayoffFamily(kind, **params)
    except ValueError as exc:
        raise ConfigError(f"payoff: {exc}") from exc


def _parse_barrier(obj: dict) -> BarrierSpec:
    _check_keys(obj, ("L", "R", "direction"), "barrier")
    raw_r = obj.get("R", "inf")
    if isinstance(raw_r, str):
        if raw_r != "inf":
            raise ConfigError('barrier R must be a number or "inf"')
        r_val = math.inf
    else:
        r_val = float(raw_r)
    try:
        return BarrierSpec(L=float(obj.get("L", 0.0)), R=r_val,
                           direction=obj.get("direction", KNOCK_OUT))
    except ValueError as exc:
        raise ConfigError(f"barrier: {exc}") from exc


def _parse_grid(obj: dict) -> GridConfig:
    _check_keys(obj, ("m", "m_u", "refine"), "grid")
    try:
        return GridConfig(m=int(obj.get("m", 513)),
                          m_u=int(obj.get("m_u", 129)),
                          refine=int(obj.get("refine", 20)))
    except ValueError as exc:
        raise ConfigError(f"grid: {exc}") from exc


def _parse_sim(obj: dict) -> SimConfig:
    _check_keys(obj, ("paths", "dt_divisor", "seed", "refine", "measure",
                      "hedge", "candidates"), "sim")
    refine = obj.get("refine", BRIDGE)
    if refine not in (BRIDGE, GRID):
        raise ConfigError(f"sim.refine must be {BRIDGE!r} or {GRID!r}")
    measure = obj.get("measure", OBJECTIVE)
    if measure not in (OBJECTIVE, MARTINGALE):
        raise ConfigError("sim.measure must be objective or martingale")
    hedge = obj.get("hedge", "perfect")
    if hedge not in ("perfect", "optimal"):
        raise ConfigError("sim.hedge must be perfect or optimal")
    cands = obj.get("candidates")
    if cands is not None:
        if not isinstance(cands, list) or not cands:
            raise ConfigError("sim.candidates must be a nonempty list")
        cands = tuple(tuple(c) if isinstance(c, list) else (c,) for c in cands)
    return SimConfig(paths=int(obj.get("paths", 10_000)),
                     dt_divisor=int(obj.get("dt_divisor", 400)),
                     seed=int(obj.get("seed", 0)),
                     refine=refine, measure=measure, hedge=hedge,
                     candidates=cands)


def _parse_widen(obj: dict) -> WidenConfig:
    _check_keys(obj, ("mode", "beta", "exponent", "scale"), "widen")
    mode = obj.get("mode", "off")
    if mode not in ("off", "out", "in"):
        raise ConfigError('widen.mode must be "off", "out" or "in"')
    exp = obj.get("exponent")
    scale = obj.get("scale")
    return WidenConfig(mode=mode, beta=float(obj.get("beta", 0.05)),
                       exponent=None if exp is None else float(exp),
                       scale=None if scale is None else float(scale))


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a JSON experiment configuration."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"malformed JSON at line {exc.lineno} column {exc.colno}: "
            f"{exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    _check_keys(raw, ("model", "payoff", "barrier", "n", "n_list", "x",
                      "mode", "convention", "quantity", "grid", "sim",
                      "widen"), "config")
    model = _parse_model(_require(raw, "model", "config"))
    payoff = _parse_payoff(_require(raw, "payoff", "config"))
    barrier = _parse_barrier(raw.get("barrier", {}))

    n = raw.get("n")
    if n is not None:
        n = int(n)
        if n < 1:
            raise ConfigError("n must be at least 1")
    n_list = raw.get("n_list")
    if n_list is not None:
        n_list = tuple(int(v) for v in n_list)
        if not n_list or any(v < 1 for v in n_list):
            raise ConfigError("n_list entries must be at least 1")
        if any(b <= a for a, b in zip(n_list, n_list[1:])):
            raise ConfigError("n_list must be strictly increasing")
    x = raw.get("x")
    if x is not None:
        x = float(x)
        if x < 0.0:
            raise ConfigError("x must be nonnegative")
    mode = raw.get("mode", "auto")
    if mode not in ("auto", PATH_TREE, RECOMBINING):
        raise ConfigError(f"unknown mode {mode!r}")
    convention = raw.get("convention")
    if convention is not None and convention not in (PER_LEG, MIN_TIME):
        raise ConfigError(f"unknown convention {convention!r}")
    quantity = raw.get("quantity", "game")
    if quantity not in ("game", "european", "shortfall"):
        raise ConfigError(f"unknown quantity {quantity!r}")

    cfg = ExperimentConfig(
        model=model, payoff=payoff, barrier=barrier, n=n, n_list=n_list, x=x,
        mode=mode, convention=convention, quantity=quantity,
        grid=_parse_grid(raw.get("grid", {})),
        sim=_parse_sim(raw.get("sim", {})),
        widen=_parse_widen(raw.get("widen", {})))

    if barrier.direction == KNOCK_OUT and not barrier.is_trivial:
        if not barrier.contains(model.s0):
            raise ConfigError("knock-out runs require L < s0 < R")
    return cfg


def config_to_json(cfg: ExperimentConfig) -> str:
    """Normalized JSON form; parse_config(config_to_json(cfg)) == cfg."""
    payoff: dict[str, Any] = {"kind": cfg.payoff.kind}
    for name in _payoff_fields(cfg.payoff.kind):
        payoff[name] = getattr(cfg.payoff, name)
    obj = {
        "model": {"s0": cfg.model.s0, "r": cfg.model.r, "mu": cfg.model.mu,
                  "kappa": cfg.model.kappa, "T": cfg.model.T,
                  "b0": cfg.model.b0},
        "payoff": payoff,
        "barrier": {"L": cfg.barrier.L,
                    "R": "inf" if math.isinf(cfg.barrier.R) else cfg.barrier.R,
                    "direction": cfg.barrier.direction},
        "mode": cfg.mode,
        "quantity": cfg.quantity,
        "grid": {"m": cfg.grid.m, "m_u": cfg.grid.m_u,
                 "refine": cfg.grid.refine},
        "sim": {"paths": cfg.sim.paths, "dt_divisor": cfg.sim.dt_divisor,
                "seed": cfg.sim.seed, "refine": cfg.sim.refine,
                "measure": cfg.sim.measure, "hedge": cfg.sim.hedge},
        "widen": {"mode": cfg.widen.mode, "beta": cfg.widen.beta},
    }
    if cfg.n is not None:
        obj["n"] = cfg.n
    if cfg.n_list is not None:
        obj["n_list"] = list(cfg.n_list)
    if cfg.x is not None:
        obj["x"] = cfg.x
    if cfg.convention is not None:
        obj["convention"] = cfg.convention
    if cfg.sim.candidates is not None:
        obj["sim"]["candidates"] = [list(c) for c in cfg.sim.candidates]
    if cfg.widen.exponent is not None:
        obj["widen"]["exponent"] = cfg.widen.exponent
    if cfg.widen.scale is not None:
        obj["widen"]["scale"] = cfg.widen.scale
    return dumps(obj)


def _payoff_fields(kind: str) -> tuple[str, ...]:
    return {
        "game-put": ("strike", "penalty"),
        "game-call": ("strike", "penalty"),
        "russian": ("floor", "penalty_rate"),
        "integral-put": ("strike", "f_coef", "penalty_coef"),
        "integral-call": ("strike", "f_coef", "penalty_coef"),
    }[kind]


# ---------------------------------------------------------------------------
# JSON emission: 17 significant digits, deterministic key order
# ---------------------------------------------------------------------------

def _format_float(x: float) -> str:
    if math.isinf(x):
        return '"inf"' if x > 0 else '"-inf"'
    if math.isnan(x):
        return '"nan"'
    return format(x, ".17g")


def _csv_num(x: float) -> str:
    return format(x, ".17g")


def dumps(obj: Any, indent: int = 0) -> str:
    """JSON text with floats at 17 significant digits and sorted keys."""
    pad = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f'{pad}  {json.dumps(str(k))}: {dumps(v, indent + 1)}'
                 for k, v in sorted(obj.items())]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        items = [f"{pad}  {dumps(v, indent + 1)}" for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + pad + "]"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, float):
        return _format_float(obj)
    if isinstance(obj, (int, str)) or obj is None:
        return json.dumps(obj)
    raise TypeError(f"cannot serialize {type(obj)!r}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def fit_rate(pairs: Sequence[tuple[float, float]]) -> tuple[float, float]:
    """Least-squares slope and intercept of log(error) on log(n).

    Errors must be positive; callers flooring zero errors at machine epsilon
    must flag the substitution in their report."""
    if len(pairs) < 2:
        raise ValueError("need at least two (n, error) pairs")
    ns = [p[0] for p in pairs]
    errs = [p[1] for p in pairs]
    if any(e <= 0.0 for e in errs):
        raise ValueError("errors must be positive")
    return _loglog_slope(ns, errs)


def _need_n(cfg: ExperimentConfig) -> int:
    if cfg.n is None:
        raise ConfigError("this command requires n")
    return cfg.n


def _run_price(cfg: ExperimentConfig) -> dict:
    n = _need_n(cfg)
    barrier = cfg.effective_barrier(n)
    sol = solve_game(cfg.model, n, cfg.payoff, barrier,
                     convention=cfg.convention, mode=cfg.resolve_mode())
    return {
        "command": "price",
        "n": n,
        "value": sol.value,
        "convention": sol.convention,
        "mode": sol.mode,
        "sigma_star": sol.sigma_star.earliest(),
        "tau_star": sol.tau_star.earliest(),
        "barrier": {"L": barrier.L,
                    "R": "inf" if math.isinf(barrier.R) else barrier.R,
                    "direction": barrier.direction},
    }


def _run_shortfall(cfg: ExperimentConfig) -> dict:
    n = _need_n(cfg)
    if cfg.x is None:
        raise ConfigError("shortfall requires x")
    barrier = cfg.effective_barrier(n)
    risk, surface = solve_shortfall(cfg.model, n, cfg.payoff, barrier, cfg.x,
                                    cfg.grid, convention=cfg.convention,
                                    mode=cfg.resolve_mode())
    return {
        "command": "shortfall",
        "n": n,
        "x": cfg.x,
        "risk": risk,
        "y_max": surface.y_max,
        "grid_m": surface.grid_cfg.m,
        "convention": surface.convention,
        "mode": surface.mode,
    }


def _run_hedge(cfg: ExperimentConfig) -> dict:
    n = _need_n(cfg)
    barrier = cfg.effective_barrier(n)
    sol = solve_game(cfg.model, n, cfg.payoff, barrier,
                     convention=cfg.convention, mode=cfg.resolve_mode())
    x = cfg.x if cfg.x is not None else sol.value
    hedge = perfect_hedge(sol, x)
    signs = np.ones((1, n), dtype=np.int64)
    _, us, gammas = hedge.replay(signs)
    beta0 = hedge.beta(signs)[0, 0]
    return {
        "command": "hedge",
        "n": n,
        "value": sol.value,
        "initial_capital": x,
        "gamma_root": gammas[0, 0],
        "beta_root": beta0,
        "cancel_earliest": sol.sigma_star.earliest(),
    }


def _run_simulate(cfg: ExperimentConfig, out_dir: Path | None) -> dict:
    n = _need_n(cfg)
    widened = cfg.effective_barrier(n)
    mode = cfg.resolve_mode()
    if cfg.sim.hedge == "perfect":
        sol = solve_game(cfg.model, n, cfg.payoff, widened,
                         convention=cfg.convention, mode=mode)
        hedge = perfect_hedge(sol)
        buyer_rule = sol.tau_star
        capital = sol.value
    else:
        if cfg.x is None:
            raise ConfigError("optimal-hedge simulation requires x")
        _, surface = solve_shortfall(cfg.model, n, cfg.payoff, widened, cfg.x,
                                     cfg.grid, convention=cfg.convention,
                                     mode=mode)
        hedge = extract_optimal_hedge(surface, cfg.x)
        sol = solve_game(cfg.model, n, cfg.payoff, widened,
                         convention=cfg.convention, mode=mode)
        buyer_rule = sol.tau_star
        capital = cfg.x
    dt = cfg.model.T / (n * cfg.sim.dt_divisor)
    est = estimate_shortfall_mc(cfg.model, n, cfg.payoff, cfg.barrier, hedge,
                                buyer_rule=buyer_rule,
                                candidates=cfg.sim.candidates,
                                n_paths=cfg.sim.paths, dt=dt,
                                seed=cfg.sim.seed, measure=cfg.sim.measure,
                                refine=cfg.sim.refine,
                                convention=cfg.convention)
    rows = [{"candidate": c.name, "estimate": c.estimate,
             "std_err": c.std_err, "n_paths": c.n_paths}
            for c in est.candidates]
    if out_dir is not None:
        with (out_dir / "simulate.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["candidate", "estimate", "std_err", "n_paths"])
            for c in est.candidates:
                writer.writerow([c.name, _csv_num(c.estimate),
                                 _csv_num(c.std_err), c.n_paths])
    return {
        "command": "simulate",
        "n": n,
        "hedge": cfg.sim.hedge,
        "initial_capital": capital,
        "n_paths": cfg.sim.paths,
        "seed": cfg.sim.seed,
        "estimates": rows,
        "max_estimate": est.max_estimate,
        "max_candidate": est.max_candidate,
        "max_std_err": est.max_std_err,
        "note": "statistical lower bound of the stopping-time supremum",
    }


def _run_converge(cfg: ExperimentConfig, out_dir: Path | None) -> dict:
    if cfg.n_list is None:
        raise ConfigError("converge requires n_list")
    if cfg.widen.mode != "off":
        raise ConfigError("converge studies run on the fixed barrier")
    study = convergence_study(cfg.model, cfg.payoff, cfg.barrier, cfg.n_list,
                              quantity=cfg.quantity, x=cfg.x,
                              convention=cfg.convention,
                              mode=cfg.resolve_mode(), grid_cfg=cfg.grid)
    rows = [{"n": r.n, "value": r.value, "abs_diff_prev": r.abs_diff_prev,
             "running_rate": r.running_rate} for r in study.rows]
    if out_dir is not None:
        with (out_dir / "converge.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["n", "value", "abs_diff_prev", "running_rate"])
            for r in study.rows:
                writer.writerow([r.n, _csv_num(r.value),
                                 _csv_num(r.abs_diff_prev),
                                 _csv_num(r.running_rate)])
    return {
        "command": "converge",
        "quantity": cfg.quantity,
        "rows": rows,
        "fitted_rate": study.fitted_rate,
        "zero_diffs_floored": study.floored,
    }


def run(command: str, cfg: ExperimentConfig,
        out_dir: str | Path | None = None) -> dict:
    """Dispatch one command; returns the JSON-ready result document."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    path = Path(out_dir) if out_dir is not None else None
    if path is not None:
        path.mkdir(parents=True, exist_ok=True)
    if command == "price":
        return _run_price(cfg)
    if command == "shortfall":
        return _run_shortfall(cfg)
    if command == "hedge":
        return _run_hedge(cfg)
    if command == "simulate":
        return _run_simulate(cfg, path)
    return _run_converge(cfg, path)


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="gamebarrier",
        description="Pricing, hedging and shortfall risk for barrier game "
                    "options on binomial lattices.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, help="JSON config path")
        cmd.add_argument("--out", default=None, help="directory for CSV output")
        cmd.add_argument("--seed", type=int, default=None,
                         help="override sim.seed")
        cmd.add_argument("--threads", type=int, default=1,
                         help="worker count; results are identical for any "
                              "value")
    args = parser.parse_args(argv)
    try:
        text = Path(args.config).read_text()
        cfg = parse_config(text)
        if args.seed is not None:
            cfg = replace(cfg, sim=replace(cfg.sim, seed=args.seed))
        result = run(args.command, cfg, out_dir=args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except BudgetError as exc:
        print(f"budget error: {exc}", file=sys.stderr)
        return 3
    except NonRecombiningError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - defensive
        print(f"error: {exc}", file=sys.stderr)
        return 1
    sys.stdout.write(dumps(result) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
