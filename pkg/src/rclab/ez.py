"""Two-asset market with Epstein-Zin recursive utility, end to end.

Wealth dynamics dX = [r X + (b - r) pi X - c] dt + X pi sigma dB under a
(pi, c) control in [-1,1] x [a1, a2], utility BSDE with the Epstein-Zin
aggregator, its HJB equation, and the cross-checks wiring every module
into one reproducible scenario.
"""

from __future__ import annotations

import datetime as _dt
import json
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Union

import numpy as np

from . import __version__
from .bsde import RegressionConfig
from .drivers import (EZParams, audit_conditions, classify_regime,
                      epstein_zin_driver)
from .dpp import (McConfig, brute_force_value, build_dpp_report,
                  determinism_probe, regularity_probe)
from .errors import (ConditionAuditFailed, ContractError, DomainViolation,
                     UnsupportedRegime)
from .hjb import ControlGrid, SpaceTimeGrid, export_value_csv, solve_hjb
from .kernels import derive_seed
from .problem import ControlProblem
from .sde import (ControlledSDE, ControlSet, audit_sde, constant_policy,
                  simulate_paths)


def _as_time_fn(value) -> Callable:
    if callable(value):
        return value
    const = float(value)
    return lambda t: const


@dataclass(frozen=True)
class MarketSpec:
    """Bond rate r, stock appreciation b, volatility sigma (constants or
    functions of time), consumption bounds and investment-fraction box."""

    r: Union[float, Callable]
    b: Union[float, Callable]
    sigma: Union[float, Callable]
    x0: float
    a1: float
    a2: float
    T: float
    pi_bounds: tuple = (-1.0, 1.0)
    h: Optional[Callable] = None       # terminal reward; shipped default if None

    def __post_init__(self):
        if self.x0 <= 0:
            raise ContractError("initial wealth must be positive")
        if not (0 <= self.a1 < self.a2):
            raise ContractError("consumption bounds need 0 <= a1 < a2")
        if self.T <= 0:
            raise ContractError("horizon must be positive")

    def curves(self):
        return (_as_time_fn(self.r), _as_time_fn(self.b),
                _as_time_fn(self.sigma))


def _audit_market_curves(market: MarketSpec, n_grid: int = 1024) -> None:
    """Finite values and no jump-like behavior on a fine time grid."""
    ts = np.linspace(0.0, market.T, n_grid)
    for name, fn in zip("r b sigma".split(), market.curves()):
        vals = np.array([float(fn(t)) for t in ts])
        if not np.isfinite(vals).all():
            raise ConditionAuditFailed("H1", f"market curve {name} is not finite")
        spread = float(vals.max() - vals.min())
        jump = float(np.abs(np.diff(vals)).max()) if n_grid > 1 else 0.0
        if jump > (spread + 1.0) * (32.0 / n_grid):
            raise ConditionAuditFailed(
                "H1", f"market curve {name} looks discontinuous "
                f"(max adjacent jump {jump:.3g} on a {n_grid}-point grid)")


def power_terminal(gamma: float, x_floor: float) -> Callable:
    """Shipped terminal reward: sign-correct power utility of wealth,
    linearized below the wealth floor to stay globally Lipschitz.

    case (i) gamma > 1: h(x) = -x^(1-gamma)/(gamma-1) < 0;
    case (ii) gamma < 1: h(x) = x^(1-gamma)/(1-gamma) > 0.
    """
    if x_floor <= 0:
        raise ContractError("wealth floor must be positive")
    sign_den = (gamma - 1.0) if gamma > 1 else (1.0 - gamma)

    def h_core(x):
        if gamma > 1:
            return -(x ** (1.0 - gamma)) / sign_den
        return (x ** (1.0 - gamma)) / sign_den

    floor_val = h_core(x_floor)
    floor_slope = x_floor ** (-gamma)

    def h(x):
        x = np.asarray(x, float)
        x1 = x[:, 0] if x.ndim == 2 else x
        safe = np.maximum(x1, x_floor)
        return np.where(x1 < x_floor,
                        floor_val + floor_slope * (x1 - x_floor),
                        h_core(safe))

    return h


@dataclass(frozen=True)
class EZProblem:
    problem: ControlProblem
    market: MarketSpec
    params: EZParams
    wealth_bounds: tuple
    x_floor: float
    regime: str


def build_problem(market: MarketSpec, ez: EZParams,
                  x_floor: Optional[float] = None,
                  x_cap: Optional[float] = None,
                  audit_budget: int = 2048) -> EZProblem:
    """Assemble and audit the full Epstein-Zin control problem.

    The wealth box [x_floor, x_cap] (defaults 0.05*x0 and 4*x0) is the
    audit/grid region; simulated wealth is kept positive by the stepper
    but not confined to the box.
    """
    info = classify_regime(ez, a1=market.a1)
    if info.regime == "unsupported":
        raise UnsupportedRegime(
            f"(gamma, psi) = ({ez.gamma}, {ez.psi}) is outside cases (i)/(ii)")
    if market.a1 == 0.0 and info.regime != "case_i":
        raise UnsupportedRegime(
            "a zero consumption floor is admissible only in case (i)")
    _audit_market_curves(market)
    x_floor = 0.05 * market.x0 if x_floor is None else float(x_floor)
    x_cap = 4.0 * market.x0 if x_cap is None else float(x_cap)
    if not (0 < x_floor < market.x0 < x_cap):
        raise ContractError("need 0 < x_floor < x0 < x_cap")
    r_fn, b_fn, s_fn = market.curves()
    pos_floor = 1e-8 * market.x0

    def drift(t, x, v):
        pi = v[:, 0:1]
        c = v[:, 1:2]
        return (r_fn(t) + (b_fn(t) - r_fn(t)) * pi) * x - c

    def diffusion(t, x, v):
        pi = v[:, 0:1]
        return (x * pi * s_fn(t))[:, :, None]

    def stepper(t, x, v, dt, db):
        # multiplicative update on the investment part keeps the sign;
        # consumption is subtractive and clamped at a tiny positive floor
        pi = v[:, 0:1]
        c = v[:, 1:2]
        growth = 1.0 + (r_fn(t) + (b_fn(t) - r_fn(t)) * pi) * dt \
            + pi * s_fn(t) * db
        neg_growth = int((growth < 0.0).sum())
        raw = x * np.maximum(growth, 0.0) - c * dt
        clamped = raw < pos_floor
        x_next = np.where(clamped, pos_floor, raw)
        return x_next, neg_growth + int(clamped.sum())

    ts = np.linspace(0.0, market.T, 257)
    k_coef = max(abs(float(r_fn(t))) + abs(float(b_fn(t)) - float(r_fn(t)))
                 + abs(float(s_fn(t))) for t in ts)
    lipschitz = k_coef * (1.0 + x_cap) + 1.0 + 1e-6
    sde = ControlledSDE(dim_state=1, dim_noise=1, control_dim=2,
                        drift=drift, diffusion=diffusion, horizon=market.T,
                        lipschitz_bound=lipschitz,
                        domain_box=[(x_floor, x_cap)], stepper=stepper)
    control_set = ControlSet.box([market.pi_bounds[0], market.a1],
                                 [market.pi_bounds[1], market.a2])
    sde_report = audit_sde(sde, control_set, n_points=audit_budget, t_max=market.T)
    if not sde_report.ok:
        raise ConditionAuditFailed(
            "H2", f"coefficient Lipschitz audit: observed "
            f"{sde_report.lipschitz_hat:.4g} > declared {sde_report.declared:.4g}")

    h = market.h if market.h is not None else power_terminal(ez.gamma, x_floor)
    h_grid = np.asarray(h(np.linspace(x_floor, x_cap, 513)[:, None]), float)
    if info.regime == "case_i":
        if h_grid.max() >= 0:
            raise DomainViolation("case (i) terminal reward must be negative")
        y_bounds = (2.0 * h_grid.min(), 0.5 * h_grid.max())
    else:
        if h_grid.min() <= 0:
            raise DomainViolation("case (ii) terminal reward must be positive")
        y_bounds = (0.5 * h_grid.min(), 2.0 * h_grid.max())
    spec = epstein_zin_driver(ez, market.a1, market.a2,
                              x_bounds=[(x_floor, x_cap)],
                              y_bounds=y_bounds,
                              pi_bounds=market.pi_bounds, t_max=market.T)
    # the terminal slope dominates the driver's x/z Lipschitz constant
    lam_h = x_floor ** (-ez.gamma) if market.h is None else None
    if lam_h is not None:
        spec = replace(spec, constants=replace(spec.constants, lam=lam_h * (1 + 1e-9)))
    spec = replace(spec, h=h)
    spec, report = audit_conditions(spec, audit_budget)
    if not report.ok:
        raise ConditionAuditFailed(
            report.violations[0].condition,
            f"driver audit observed {report.violations[0].observed:.4g} "
            f"> declared {report.violations[0].declared:.4g}")
    problem = ControlProblem(sde=sde, spec=spec, control_set=control_set,
                             x0=[market.x0], t0=0.0)
    return EZProblem(problem=problem, market=market, params=ez,
                     wealth_bounds=(x_floor, x_cap), x_floor=x_floor,
                     regime=info.regime)


# ---------------------------------------------------------------------------
# scenario runner


@dataclass(frozen=True)
class ScenarioConfig:
    """Solver budgets for one end-to-end run (desk scale defaults)."""

    seed: int = 20240901
    grid_nodes: int = 200
    control_counts: tuple = (9, 9)
    trust_margin: float = 0.1
    probe_multipliers: tuple = (0.5, 1.0, 2.0)
    delta_fraction: float = 0.1
    mc_paths: int = 8000
    mc_steps: int = 64
    dpp_paths: int = 8000
    dpp_steps: int = 20
    bf_pieces: int = 1
    bf_budget: int = 4096
    # quantile-bin regression keeps the utility iterates inside the
    # sign-correct domain (bin means of negative targets stay negative);
    # polynomial fits can extrapolate across 0 on extreme wealth paths
    reg_basis: str = "piecewise"
    reg_bins: int = 20
    reg_degree: int = 3
    threads: int = 1
    cfl_safety: float = 0.9
    n_sigma: float = 5.0
    det_seeds: tuple = (11, 23, 47)


@dataclass(frozen=True)
class ProbeRow:
    x: float
    u_pde: float
    u_mc: float
    mc_stderr: float
    grid_delta: float
    control_delta: float
    tolerance: float
    diff: float
    within: bool


@dataclass(frozen=True)
class ScenarioReport:
    config: dict
    regime: str
    clamp_events: int
    wealth_min: float
    value_monotone: bool
    domain_preserved: bool
    cross_check: tuple          # of ProbeRow
    dpp: object                 # DppReport
    determinism: object         # DeterminismReport
    regularity: dict
    passed: bool


def _write_meta(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_scenario(ezp: EZProblem, cfg: ScenarioConfig,
                 out_dir) -> ScenarioReport:
    """HJB surface, brute-force probes, DPP report and cross-check table.

    Artifacts written to out_dir: value_grid.csv, bsde_probes.csv,
    dpp_report.json, scenario_meta.json. Deterministic in (config, seed)
    at any thread count; only scenario_meta.json's generated_at differs
    between reruns.
    """
    os.makedirs(out_dir, exist_ok=True)
    problem = ezp.problem
    reg = RegressionConfig(basis=cfg.reg_basis, degree=cfg.reg_degree,
                           n_bins=cfg.reg_bins)
    cgrid = ControlGrid.from_set(problem.control_set, cfg.control_counts)
    lo, hi = ezp.wealth_bounds

    grid = SpaceTimeGrid.from_cfl([(lo, hi)], [cfg.grid_nodes], problem.sde,
                                  cgrid, safety=cfg.cfl_safety)
    value = solve_hjb(grid, problem.sde, problem.spec, cgrid)
    grid_fine = SpaceTimeGrid.build([(lo, hi)], [2 * cfg.grid_nodes - 1], 0.0,
                                    problem.horizon, 4 * grid.n_layers)
    value_fine = solve_hjb(grid_fine, problem.sde, problem.spec, cgrid)
    cgrid_fine = cgrid.refine()
    value_ctl = solve_hjb(grid, problem.sde, problem.spec, cgrid_fine)

    # case (i)/(ii) sign domain must hold on the whole surface
    if ezp.regime == "case_i":
        domain_preserved = bool(value.values.max() < 0)
    else:
        domain_preserved = bool(value.values.min() > 0)
    if not domain_preserved:
        raise DomainViolation(
            "HJB surface left the sign-correct utility domain")

    # wealth positivity + clamp accounting on a representative ensemble
    mid_ctl = 0.5 * (problem.control_set.lower + problem.control_set.upper)
    probe_bundle = simulate_paths(
        problem.sde, constant_policy(problem.control_set, mid_ctl), 0.0,
        problem.x0, steps=cfg.mc_steps, n_paths=cfg.mc_paths,
        seed=derive_seed(cfg.seed, 7))
    wealth_min = float(probe_bundle.paths.min())
    clamp_events = probe_bundle.clamp_events

    # value monotone in wealth at t=0 (terminal reward is monotone)
    u0 = value.values[0]
    value_monotone = bool(np.all(np.diff(u0) >= -1e-10 * (1 + np.abs(u0).max())))

    # cross-check u_PDE vs brute-force MC at the probes
    mc = McConfig(n_paths=cfg.mc_paths, steps=cfg.mc_steps, seed=cfg.seed,
                  reg=reg)
    rows = []
    for mult in cfg.probe_multipliers:
        x_probe = float(mult * ezp.market.x0)
        u_pde = float(value.interp(0, [[x_probe]])[0])
        u_fine = float(value_fine.interp(0, [[x_probe]])[0])
        u_ctl = float(value_ctl.interp(0, [[x_probe]])[0])
        bf = brute_force_value(problem, 0.0, [x_probe], cgrid,
                               pieces=cfg.bf_pieces, mc=mc,
                               budget=cfg.bf_budget, threads=cfg.threads)
        grid_delta = abs(u_fine - u_pde)
        ctl_delta = abs(u_ctl - u_pde)
        tol = cfg.n_sigma * bf.stderr + grid_delta + ctl_delta
        diff = u_pde - bf.value
        rows.append(ProbeRow(x=x_probe, u_pde=u_pde, u_mc=bf.value,
                             mc_stderr=bf.stderr, grid_delta=grid_delta,
                             control_delta=ctl_delta, tolerance=tol,
                             diff=diff, within=bool(abs(diff) <= tol)))

    # DPP verification at the probes
    delta_steps = max(1, int(round(cfg.delta_fraction * grid.n_layers)))
    dpp_mc = McConfig(n_paths=cfg.dpp_paths, steps=cfg.dpp_steps,
                      seed=derive_seed(cfg.seed, 13), reg=reg)
    probes = [(0, [float(m * ezp.market.x0)]) for m in cfg.probe_multipliers]
    extra = [(grid.n_layers // 2, [float(ezp.market.x0)]),
             (grid.n_layers // 4, [float(1.5 * ezp.market.x0)])]
    dpp_report = build_dpp_report(value, value_fine, problem, probes + extra,
                                  delta_steps, cgrid, dpp_mc,
                                  n_sigma=cfg.n_sigma, threads=cfg.threads)

    det = determinism_probe(problem, 0.0, problem.x0, cgrid,
                            cfg.det_seeds,
                            mc=McConfig(n_paths=cfg.mc_paths,
                                        steps=cfg.mc_steps, seed=0, reg=reg),
                            pieces=cfg.bf_pieces, n_sigma=cfg.n_sigma)

    reg_coarse = regularity_probe(value, cfg.trust_margin)
    reg_fine = regularity_probe(value_fine, cfg.trust_margin)
    regularity = {
        "lipschitz_x": reg_coarse.lipschitz_x,
        "lipschitz_x_refined": reg_fine.lipschitz_x,
        "holder_t": reg_coarse.holder_t,
        "holder_t_refined": reg_fine.holder_t,
        "growth_c": reg_coarse.growth_c,
    }

    passed = (all(r.within for r in rows) and dpp_report.passed
              and det.status in ("pass", "inconclusive")
              and wealth_min > 0 and value_monotone and domain_preserved)

    export_value_csv(value, os.path.join(out_dir, "value_grid.csv"))
    with open(os.path.join(out_dir, "bsde_probes.csv"), "w") as fh:
        fh.write("x,u_pde,u_mc,mc_stderr,grid_delta,control_delta,"
                 "tolerance,diff,within\n")
        for r in rows:
            fh.write("%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%d\n"
                     % (r.x, r.u_pde, r.u_mc, r.mc_stderr, r.grid_delta,
                        r.control_delta, r.tolerance, r.diff, int(r.within)))
    with open(os.path.join(out_dir, "dpp_report.json"), "w") as fh:
        fh.write(dpp_report.to_json())
        fh.write("\n")
    config_echo = asdict(cfg)
    meta = {
        "version": __version__,
        "generated_at": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "seed": cfg.seed,
        "config": config_echo,
        "market": {"x0": ezp.market.x0, "a1": ezp.market.a1,
                   "a2": ezp.market.a2, "T": ezp.market.T,
                   "pi_bounds": list(ezp.market.pi_bounds)},
        "ez_params": {"delta": ezp.params.delta, "gamma": ezp.params.gamma,
                      "psi": ezp.params.psi},
        "regime": ezp.regime,
        "wealth_bounds": list(ezp.wealth_bounds),
        "grid_layers": grid.n_layers,
        "cfl_margin": value.scheme_meta["cfl_margin"],
        "clamp_events": clamp_events,
        "wealth_min": wealth_min,
        "value_monotone": value_monotone,
        "determinism": {"spread": det.spread,
                        "pooled_stderr": det.pooled_stderr,
                        "status": det.status},
        "regularity": regularity,
        "passed": passed,
    }
    _write_meta(os.path.join(out_dir, "scenario_meta.json"), meta)
    return ScenarioReport(config=config_echo, regime=ezp.regime,
                          clamp_events=clamp_events, wealth_min=wealth_min,
                          value_monotone=value_monotone,
                          domain_preserved=domain_preserved,
                          cross_check=tuple(rows), dpp=dpp_report,
                          determinism=det, regularity=regularity,
                          passed=passed)
