"""Command-line entry point.

    rclab <subcommand> --scenario FILE --out DIR [--threads K] [--seed S]

Subcommands: simulate, solve-bsde, solve-hjb, verify-dpp, compare, ez-demo,
audit-driver. Exit codes: 0 success/pass, 1 checks failed, 2 configuration
error, 3 numerical failure. Human-readable summary goes to stderr; machine
artifacts land in --out. The only environment override honored is RCL_SEED
(same role as --seed; the flag wins).
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import __version__
from .bsde import RegressionConfig, comparison_check, export_solution_csv, solve_bsde
from .config import (ScenarioConfig, build_ez, build_sde_problem,
                     ez_run_config, parse_config)
from .dpp import McConfig, build_dpp_report
from .drivers import audit_conditions
from .errors import (ConfigError, ContractError, DomainViolation,
                     NumericalError, PremiseViolated, UnsupportedRegime)
from .ez import run_scenario
from .hjb import ControlGrid, SpaceTimeGrid, export_value_csv, solve_hjb
from .sde import constant_policy, moment_report, save_bundle, simulate_paths

_SUBCOMMANDS = ("simulate", "solve-bsde", "solve-hjb", "verify-dpp",
                "compare", "ez-demo", "audit-driver")


def _write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_meta(out_dir, cfg: ScenarioConfig, seed, extra=None) -> None:
    meta = {
        "version": __version__,
        "generated_at": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "seed": seed,
        "config": cfg.resolved(),
    }
    if extra:
        meta.update(extra)
    _write_json(os.path.join(out_dir, "scenario_meta.json"), meta)


def _resolve_seed(args, cfg: ScenarioConfig) -> int:
    if args.seed is not None:
        return int(args.seed)
    env = os.environ.get("RCL_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"RCL_SEED must be an integer, got {env!r}")
    return int(cfg.solver["seed"])


def _problem_and_policy(cfg: ScenarioConfig):
    """Build the problem and a constant run policy for path-level commands."""
    if cfg.problem["kind"] == "ez-market":
        ezp = build_ez(cfg)
        problem = ezp.problem
    else:
        problem, _ = build_sde_problem(cfg)
    ctl = cfg.run.get("policy")
    if ctl is None:
        cs = problem.control_set
        value = (cs.points[0] if cs.points is not None
                 else 0.5 * (cs.lower + cs.upper))
    else:
        value = np.asarray(ctl, float)
    return problem, constant_policy(problem.control_set, value)


def _grid_for(cfg: ScenarioConfig, problem, cgrid, boundary) -> SpaceTimeGrid:
    if cfg.problem["kind"] == "ez-market":
        lo = 0.05 * cfg.problem["market"]["x0"]
        lo = cfg.problem.get("x_floor", lo)
        hi = cfg.problem.get("x_cap", 4.0 * cfg.problem["market"]["x0"])
        bounds = [(lo, hi)]
    else:
        bounds = [tuple(cfg.problem["box"])]
    return SpaceTimeGrid.from_cfl(bounds, [cfg.solver["grid_nodes"]],
                                  problem.sde, cgrid,
                                  safety=cfg.solver["cfl_safety"],
                                  boundary=boundary)


def _reg(cfg: ScenarioConfig) -> RegressionConfig:
    return RegressionConfig(basis=cfg.solver["basis"],
                            degree=cfg.solver["degree"],
                            n_bins=cfg.solver["bins"],
                            ridge=cfg.solver["ridge"])


# ---------------------------------------------------------------------------
# subcommand bodies (return the exit code)


def _cmd_simulate(cfg, out_dir, seed, threads) -> int:
    problem, policy = _problem_and_policy(cfg)
    bundle = simulate_paths(problem.sde, policy, problem.t0, problem.x0,
                            steps=cfg.solver["steps"],
                            n_paths=cfg.solver["paths"], seed=seed)
    cache = cfg.run.get("cache_file", "bundle.rclb")
    save_bundle(bundle, os.path.join(out_dir, cache))
    mom = moment_report(bundle, q=1)
    diag = bundle.brownian_diagnostics()
    _write_json(os.path.join(out_dir, "simulate_summary.json"), {
        "n_paths": bundle.n_paths, "n_steps": bundle.n_steps,
        "dt": bundle.dt, "clamp_events": bundle.clamp_events,
        "sup_moment_2": mom.sup_moment, "brownian_diagnostics": diag,
    })
    _write_meta(out_dir, cfg, seed)
    print(f"simulate: {bundle.n_paths} paths x {bundle.n_steps} steps "
          f"-> {cache}", file=sys.stderr)
    return 0


def _cmd_solve_bsde(cfg, out_dir, seed, threads) -> int:
    problem, policy = _problem_and_policy(cfg)
    bundle = simulate_paths(problem.sde, policy, problem.t0, problem.x0,
                            steps=cfg.solver["steps"],
                            n_paths=cfg.solver["paths"], seed=seed)
    sol = solve_bsde(bundle, problem.spec, policy, _reg(cfg))
    export_solution_csv(sol, bundle, os.path.join(out_dir, "bsde_solution.csv"),
                        max_paths=min(bundle.n_paths, 200))
    _write_json(os.path.join(out_dir, "bsde_summary.json"), {
        "y0": sol.y0, "y0_stderr": sol.y0_stderr,
        "regression_basis": sol.regression_basis,
        "n_paths": bundle.n_paths, "n_steps": bundle.n_steps,
    })
    _write_meta(out_dir, cfg, seed)
    print(f"solve-bsde: y0 = {sol.y0:.10g} +- {sol.y0_stderr:.3g}",
          file=sys.stderr)
    return 0


def _cmd_solve_hjb(cfg, out_dir, seed, threads) -> int:
    if cfg.problem["kind"] == "ez-market":
        ezp = build_ez(cfg)
        problem = ezp.problem
    else:
        problem, _ = build_sde_problem(cfg)
    cgrid = ControlGrid.from_set(problem.control_set,
                                 cfg.solver["control_counts"]
                                 [: problem.control_set.dim])
    grid = _grid_for(cfg, problem, cgrid, cfg.run.get("boundary", "dirichlet"))
    value = solve_hjb(grid, problem.sde, problem.spec, cgrid)
    export_value_csv(value, os.path.join(out_dir, "value_grid.csv"))
    _write_json(os.path.join(out_dir, "hjb_summary.json"), {
        "layers": grid.n_layers, "nodes": list(grid.shape),
        "scheme_meta": value.scheme_meta,
        "u_range": [float(value.values.min()), float(value.values.max())],
    })
    _write_meta(out_dir, cfg, seed)
    print(f"solve-hjb: {grid.n_layers} layers, CFL margin "
          f"{value.scheme_meta['cfl_margin']:.3f}", file=sys.stderr)
    return 0


def _cmd_verify_dpp(cfg, out_dir, seed, threads) -> int:
    if cfg.problem["kind"] == "ez-market":
        ezp = build_ez(cfg)
        problem = ezp.problem
        x_ref = ezp.market.x0
    else:
        problem, _ = build_sde_problem(cfg)
        x_ref = float(np.atleast_1d(cfg.problem["x0"])[0])
    cgrid = ControlGrid.from_set(problem.control_set,
                                 cfg.solver["control_counts"]
                                 [: problem.control_set.dim])
    grid = _grid_for(cfg, problem, cgrid, "dirichlet")
    value = solve_hjb(grid, problem.sde, problem.spec, cgrid)
    fine = SpaceTimeGrid.build(grid.x_bounds(), [2 * len(grid.x_axes[0]) - 1],
                               float(grid.t_nodes[0]), problem.horizon,
                               4 * grid.n_layers)
    value_fine = solve_hjb(fine, problem.sde, problem.spec, cgrid)
    mults = cfg.run.get("probe_multipliers", (0.5, 1.0, 2.0))
    probes = [(0, [float(m) * x_ref]) for m in mults]
    delta_steps = max(1, int(round(cfg.run.get("delta_fraction", 0.1)
                                   * grid.n_layers)))
    mc = McConfig(n_paths=cfg.solver["dpp_paths"],
                  steps=cfg.solver["dpp_steps"], seed=seed, reg=_reg(cfg))
    report = build_dpp_report(value, value_fine, problem, probes, delta_steps,
                              cgrid, mc, n_sigma=cfg.solver["n_sigma"],
                              threads=threads)
    with open(os.path.join(out_dir, "dpp_report.json"), "w") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    _write_meta(out_dir, cfg, seed, {"dpp_passed": report.passed})
    print(f"verify-dpp: {'PASS' if report.passed else 'FAIL'} "
          f"(max |residual| {report.summary['max_abs_residual']:.3g})",
          file=sys.stderr)
    return 0 if report.passed else 1


def _cmd_compare(cfg, out_dir, seed, threads) -> int:
    from dataclasses import replace as _replace

    problem, policy = _problem_and_policy(cfg)
    spec_lo = problem.spec
    f_shift = float(cfg.run.get("f_shift", 1.0))
    h_shift = float(cfg.run.get("h_shift", 0.0))
    base_f = spec_lo.f
    base_h = spec_lo.h

    def f_hi(t, x, y, z, v):
        return np.asarray(base_f(t, x, y, z, v), float) + f_shift

    def h_hi(x):
        return np.asarray(base_h(x), float) + h_shift

    from .drivers import DriverConstants
    c = spec_lo.constants
    spec_hi = _replace(spec_lo, name=spec_lo.name + "+shift", f=f_hi, h=h_hi,
                       constants=DriverConstants(c.lam, c.mu,
                                                 c.kappa + f_shift, c.p),
                       audited=False)
    spec_hi, rep = audit_conditions(spec_hi, cfg.solver["audit_budget"])
    bundle = simulate_paths(problem.sde, policy, problem.t0, problem.x0,
                            steps=cfg.solver["steps"],
                            n_paths=cfg.solver["paths"], seed=seed)
    try:
        report = comparison_check(bundle, (spec_lo, spec_hi), policy,
                                  _reg(cfg), n_sigma=cfg.solver["n_sigma"])
    except PremiseViolated as exc:
        _write_meta(out_dir, cfg, seed, {"comparison": "premise violated"})
        print(f"compare: premise violated ({exc})", file=sys.stderr)
        return 1
    _write_json(os.path.join(out_dir, "comparison.json"), {
        "ordered": report.ordered,
        "worst_violation": report.worst_violation,
        "tol_mc": report.tol_mc,
        "min_fraction_ok": report.min_fraction_ok,
        "f_shift": f_shift, "h_shift": h_shift,
    })
    _write_meta(out_dir, cfg, seed)
    print(f"compare: {'ordered' if report.ordered else 'ORDERING VIOLATED'} "
          f"(worst gap {report.worst_violation:.3g}, tol {report.tol_mc:.3g})",
          file=sys.stderr)
    return 0 if report.ordered else 1


def _cmd_ez_demo(cfg, out_dir, seed, threads) -> int:
    if cfg.problem["kind"] != "ez-market":
        raise ConfigError("/problem/kind: ez-demo needs an ez-market problem")
    ezp = build_ez(cfg)
    run_cfg = ez_run_config(cfg, threads=threads, seed=seed)
    report = run_scenario(ezp, run_cfg, out_dir)
    print(f"ez-demo: {'PASS' if report.passed else 'FAIL'} "
          f"(regime {report.regime}, clamps {report.clamp_events})",
          file=sys.stderr)
    return 0 if report.passed else 1


def _cmd_audit_driver(cfg, out_dir, seed, threads) -> int:
    if cfg.driver is None:
        raise ConfigError("/driver: audit-driver needs a driver block")
    if cfg.problem["kind"] == "ez-market":
        spec = build_ez(cfg).problem.spec
        report = audit_conditions(spec, cfg.solver["audit_budget"])[1]
    else:
        problem, report = build_sde_problem(cfg, strict=False)
        spec = problem.spec
    payload = {
        "driver": spec.name,
        "ok": report.ok,
        "lam_hat": report.lam_hat, "mu_hat": report.mu_hat,
        "kappa_hat": report.kappa_hat, "p_hat": report.p_hat,
        "declared": asdict(spec.constants),
        "violations": [{
            "condition": v.condition, "observed": v.observed,
            "declared": v.declared, "point": v.point,
        } for v in report.violations],
    }
    _write_json(os.path.join(out_dir, "audit_report.json"), payload)
    _write_meta(out_dir, cfg, seed)
    status = "clean" if report.ok else f"{len(report.violations)} violation(s)"
    print(f"audit-driver: {spec.name}: {status}", file=sys.stderr)
    return 0 if report.ok else 1


_HANDLERS = {
    "simulate": _cmd_simulate,
    "solve-bsde": _cmd_solve_bsde,
    "solve-hjb": _cmd_solve_hjb,
    "verify-dpp": _cmd_verify_dpp,
    "compare": _cmd_compare,
    "ez-demo": _cmd_ez_demo,
    "audit-driver": _cmd_audit_driver,
}


def dispatch(subcommand: str, cfg: ScenarioConfig, out_dir,
             seed=None, threads: int = 1) -> int:
    """Run one subcommand pipeline; exceptions map to the exit-code contract."""
    if subcommand not in _SUBCOMMANDS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    os.makedirs(out_dir, exist_ok=True)
    seed = int(cfg.solver["seed"]) if seed is None else int(seed)
    try:
        return _HANDLERS[subcommand](cfg, out_dir, seed, threads)
    except (ConfigError, UnsupportedRegime) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, DomainViolation) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return 3
    except ContractError as exc:
        print(f"configuration error: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return 2


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="rclab",
        description="stochastic recursive control laboratory")
    parser.add_argument("subcommand", choices=_SUBCOMMANDS)
    parser.add_argument("--scenario", required=True,
                        help="scenario JSON file")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker count (0 = auto); affects speed only")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed (also RCL_SEED)")
    parser.add_argument("--version", action="version", version=__version__)
    args = parser.parse_args(argv)
    try:
        cfg = parse_config(args.scenario)
        seed = _resolve_seed(args, cfg)
    except ConfigError as exc:
        for msg in exc.messages:
            print(f"configuration error: {msg}", file=sys.stderr)
        return 2
    return dispatch(args.subcommand, cfg, args.out, seed=seed,
                    threads=args.threads)


if __name__ == "__main__":
    sys.exit(main())
