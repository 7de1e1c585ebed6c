"""Scenario configuration: strict-schema JSON parsing and problem builders.

A scenario file has four blocks: problem (sde | ez-market), driver (named
driver + parameter block; implied for ez-market), solver (budgets, seeds,
grids) and run (subcommand-specific options). Unknown keys are rejected;
every validation error is reported with a JSON-pointer-style path. The
fully resolved config (defaults filled) is echoed into scenario_meta.json
by every run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np
from jsonschema import Draft202012Validator

from .drivers import EZParams, named_driver
from .errors import ConfigError
from .ez import MarketSpec, ScenarioConfig as EzScenarioConfig, build_problem
from .problem import ControlProblem
from .sde import ControlledSDE, ControlSet


_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_INT_POS = {"type": "integer", "minimum": 1}

_MARKET_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["r", "b", "sigma", "x0", "a1", "a2", "T"],
    "properties": {
        "r": _NUM, "b": _NUM, "sigma": _NUM,
        "x0": _POS, "a1": _NONNEG, "a2": _POS, "T": _POS,
        "pi_bounds": {"type": "array", "items": _NUM,
                      "minItems": 2, "maxItems": 2},
    },
}

_EZ_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["delta", "gamma", "psi"],
    "properties": {
        "delta": _POS,
        "gamma": {"type": "number", "exclusiveMinimum": 0,
                  "not": {"const": 1}},
        "psi": {"type": "number", "exclusiveMinimum": 0,
                "not": {"const": 1}},
    },
}

_PROBLEM_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["ez-market", "sde"]},
        "market": _MARKET_SCHEMA,
        "ez": _EZ_SCHEMA,
        "x_floor": _POS,
        "x_cap": _POS,
        "dynamics": {
            "type": "object",
            "additionalProperties": False,
            "required": ["name"],
            "properties": {
                "name": {"enum": ["gbm", "zero", "brownian", "drift-control"]},
                "params": {"type": "object"},
            },
        },
        "x0": {"type": ["number", "array"]},
        "T": _POS,
        "box": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
        "control": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lower": {"type": "array", "items": _NUM},
                "upper": {"type": "array", "items": _NUM},
                "points": {"type": "array",
                           "items": {"type": "array", "items": _NUM}},
            },
        },
        "lipschitz_bound": _POS,
    },
}

_DRIVER_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["name"],
    "properties": {
        "name": {"enum": ["linear", "cubic_monotone", "abs", "quadratic",
                          "epstein_zin"]},
        "params": {"type": "object"},
        # user-declared condition constants, audited against the
        # implementation by audit-driver (exit 1 on violation)
        "constants": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lam": _NONNEG, "mu": _NUM, "kappa": _POS,
                "p": {"type": "number", "minimum": 1},
            },
        },
        "terminal": {
            "type": "object",
            "additionalProperties": False,
            "required": ["name"],
            "properties": {
                "name": {"enum": ["identity", "square", "constant"]},
                "value": _NUM,
            },
        },
    },
}

_SOLVER_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "paths": _INT_POS,
        "steps": _INT_POS,
        "seed": {"type": "integer"},
        "grid_nodes": {"type": "integer", "minimum": 3},
        "control_counts": {"type": "array", "items": _INT_POS},
        "trust_margin": {"type": "number", "minimum": 0, "maximum": 0.45},
        "basis": {"enum": ["polynomial", "piecewise"]},
        "degree": {"type": "integer", "minimum": 0},
        "bins": _INT_POS,
        "ridge": _NONNEG,
        "cfl_safety": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "n_sigma": _POS,
        "dpp_paths": _INT_POS,
        "dpp_steps": _INT_POS,
        "audit_budget": _INT_POS,
    },
}

_RUN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "policy": {"type": "array", "items": _NUM},
        "boundary": {"enum": ["dirichlet", "extrapolate"]},
        "probe_multipliers": {"type": "array", "items": _POS},
        "delta_fraction": {"type": "number", "exclusiveMinimum": 0,
                           "maximum": 0.5},
        "pieces": _INT_POS,
        "budget": _INT_POS,
        "f_shift": _NONNEG,
        "h_shift": _NONNEG,
        "det_seeds": {"type": "array", "items": {"type": "integer"},
                      "minItems": 3},
        "cache_file": {"type": "string"},
    },
}

_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["problem"],
    "properties": {
        "problem": _PROBLEM_SCHEMA,
        "driver": _DRIVER_SCHEMA,
        "solver": _SOLVER_SCHEMA,
        "run": _RUN_SCHEMA,
    },
}

_SOLVER_DEFAULTS = {
    "paths": 8000,
    "steps": 64,
    "seed": 20240901,
    "grid_nodes": 200,
    "control_counts": [9, 9],
    "trust_margin": 0.2,
    "basis": "polynomial",
    "degree": 3,
    "bins": 20,
    "ridge": 1e-8,
    "cfl_safety": 0.9,
    "n_sigma": 5.0,
    "dpp_paths": 8000,
    "dpp_steps": 20,
    "audit_budget": 2048,
}


@dataclass(frozen=True)
class ScenarioConfig:
    """Validated scenario file with defaults resolved."""

    problem: dict
    driver: Optional[dict]
    solver: dict
    run: dict

    def resolved(self) -> dict:
        return {"problem": self.problem, "driver": self.driver,
                "solver": self.solver, "run": self.run}


def _pointer(error) -> str:
    return "/" + "/".join(str(p) for p in error.absolute_path)


def parse_config(path) -> ScenarioConfig:
    """Load, schema-validate and default-fill a scenario file.

    Raises ConfigError carrying every violation (not just the first),
    each prefixed with its JSON-pointer path.
    """
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read scenario file: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"scenario file is not valid JSON: {exc}") from None
    validator = Draft202012Validator(_SCHEMA)
    messages = [f"{_pointer(e) or '/'}: {e.message}"
                for e in sorted(validator.iter_errors(raw),
                                key=lambda e: list(map(str, e.absolute_path)))]
    if messages:
        raise ConfigError(messages)

    problem = raw["problem"]
    messages = []
    if problem["kind"] == "ez-market":
        if "market" not in problem or "ez" not in problem:
            messages.append("/problem: ez-market needs 'market' and 'ez' blocks")
        else:
            if problem["market"]["a1"] >= problem["market"]["a2"]:
                messages.append("/problem/market/a1: need a1 < a2")
    else:
        for key in ("dynamics", "x0", "T", "box"):
            if key not in problem:
                messages.append(f"/problem: sde problems need {key!r}")
        if "driver" not in raw:
            messages.append("/driver: sde problems need a driver block")
    if messages:
        raise ConfigError(messages)

    solver = dict(_SOLVER_DEFAULTS)
    solver.update(raw.get("solver", {}))
    return ScenarioConfig(problem=problem, driver=raw.get("driver"),
                          solver=solver, run=raw.get("run", {}))


# ---------------------------------------------------------------------------
# builders from config blocks


def _dynamics(name: str, params: dict, dim_control: int):
    if name == "gbm":
        mu = float(params.get("mu", 0.05))
        sig = float(params.get("sigma", 0.2))

        def drift(t, x, v):
            return mu * x

        def diffusion(t, x, v):
            return (sig * x)[:, :, None]
        lip = abs(mu) + abs(sig) + 1e-9
    elif name == "zero":
        def drift(t, x, v):
            return np.zeros_like(x)

        def diffusion(t, x, v):
            return np.zeros((x.shape[0], x.shape[1], 1))
        lip = 1e-12
    elif name == "brownian":
        sig = float(params.get("sigma", 0.2))

        def drift(t, x, v):
            return np.zeros_like(x)

        def diffusion(t, x, v):
            return np.full((x.shape[0], x.shape[1], 1), sig)
        lip = 1e-12
    elif name == "drift-control":
        sig = float(params.get("sigma", 0.0))

        def drift(t, x, v):
            return v[:, :1]

        def diffusion(t, x, v):
            return np.full((x.shape[0], x.shape[1], 1), sig)
        lip = 1.0 + 1e-9
    else:
        raise ConfigError(f"/problem/dynamics/name: unknown dynamics {name!r}")
    return drift, diffusion, lip


def _terminal(term_cfg: Optional[dict]):
    if term_cfg is None:
        return lambda x: x[:, 0], 1.0
    name = term_cfg["name"]
    if name == "identity":
        return lambda x: x[:, 0], 1.0
    if name == "square":
        return lambda x: x[:, 0] ** 2, None   # Lipschitz bound depends on box
    if name == "constant":
        k = float(term_cfg.get("value", 0.0))
        return lambda x: np.full(x.shape[0], k), 0.0
    raise ConfigError(f"/driver/terminal/name: unknown terminal {name!r}")


def build_sde_problem(cfg: ScenarioConfig, strict: bool = True):
    """(ControlProblem, AuditReport) from an sde-kind config.

    With strict=True a driver audit violation raises ConditionAuditFailed;
    audit-driver passes strict=False to report violations instead.
    """
    from dataclasses import replace as _replace

    from .drivers import AuditBox, DriverConstants, audit_conditions
    from .errors import ConditionAuditFailed

    p = cfg.problem
    box = [tuple(p["box"])]
    ctl = p.get("control", {"points": [[0.0]]})
    if "points" in ctl:
        control_set = ControlSet.finite(ctl["points"])
    else:
        control_set = ControlSet.box(ctl["lower"], ctl["upper"])
    dyn = p["dynamics"]
    drift, diffusion, lip = _dynamics(dyn["name"], dyn.get("params", {}),
                                      control_set.dim)
    lip = float(p.get("lipschitz_bound", lip * (abs(p["box"][1]) + 1.0)))
    sde = ControlledSDE(dim_state=1, dim_noise=1, control_dim=control_set.dim,
                        drift=drift, diffusion=diffusion, horizon=float(p["T"]),
                        lipschitz_bound=lip, domain_box=box)
    spec = named_driver(cfg.driver["name"], **cfg.driver.get("params", {}))
    h, lam_h = _terminal(cfg.driver.get("terminal"))
    if lam_h is None:
        lam_h = 2.0 * max(abs(p["box"][0]), abs(p["box"][1]))
    consts = spec.constants
    declared = {"lam": max(consts.lam, lam_h * (1 + 1e-9)), "mu": consts.mu,
                "kappa": consts.kappa, "p": consts.p}
    declared.update(cfg.driver.get("constants", {}))
    spec = _replace(
        spec, h=h,
        constants=DriverConstants(**declared),
        audit_box=AuditBox(x_bounds=box, y_bounds=spec.audit_box.y_bounds,
                           v_bounds=control_set.bounds, t_max=float(p["T"])))
    spec, report = audit_conditions(spec, cfg.solver["audit_budget"])
    if strict and not report.ok:
        raise ConditionAuditFailed(report.violations[0].condition,
                                   f"driver {spec.name!r}")
    problem = ControlProblem(sde=sde, spec=spec, control_set=control_set,
                             x0=np.atleast_1d(p["x0"]), t0=0.0)
    return problem, report


def build_ez(cfg: ScenarioConfig):
    p = cfg.problem
    m = p["market"]
    market = MarketSpec(r=m["r"], b=m["b"], sigma=m["sigma"], x0=m["x0"],
                        a1=m["a1"], a2=m["a2"], T=m["T"],
                        pi_bounds=tuple(m.get("pi_bounds", (-1.0, 1.0))))
    ez = EZParams(delta=p["ez"]["delta"], gamma=p["ez"]["gamma"],
                  psi=p["ez"]["psi"])
    return build_problem(market, ez, x_floor=p.get("x_floor"),
                         x_cap=p.get("x_cap"),
                         audit_budget=cfg.solver["audit_budget"])


def ez_run_config(cfg: ScenarioConfig, threads: int = 1,
                  seed: Optional[int] = None) -> EzScenarioConfig:
    s = cfg.solver
    r = cfg.run
    return EzScenarioConfig(
        seed=int(seed if seed is not None else s["seed"]),
        grid_nodes=s["grid_nodes"],
        control_counts=tuple(s["control_counts"]),
        trust_margin=s["trust_margin"],
        probe_multipliers=tuple(r.get("probe_multipliers", (0.5, 1.0, 2.0))),
        delta_fraction=r.get("delta_fraction", 0.1),
        mc_paths=s["paths"],
        mc_steps=s["steps"],
        dpp_paths=s["dpp_paths"],
        dpp_steps=s["dpp_steps"],
        bf_pieces=r.get("pieces", 1),
        bf_budget=r.get("budget", 4096),
        reg_basis=s["basis"],
        reg_bins=s["bins"],
        reg_degree=s["degree"],
        threads=threads,
        cfl_safety=s["cfl_safety"],
        n_sigma=s["n_sigma"],
        det_seeds=tuple(r.get("det_seeds", (11, 23, 47))),
    )
