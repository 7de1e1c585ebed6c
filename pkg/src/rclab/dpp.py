"""Numerical verification of the dynamic programming principle.

Checks, at probe points (t, x), the identity

    u(t, x) = max over controls of G_{t, t+delta}[ u(t+delta, X_{t+delta}) ]

by combining the HJB value surface, coupled Monte-Carlo simulation and the
backward semigroup, with brute-force piecewise-constant control search as
the independent oracle for the value itself. Any numerical sup over
controls is a lower bound of the true esssup; residuals are reported
signed so sup-truncation bias stays distinguishable from scheme error.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .bsde import RegressionConfig, _backward_recursion, solve_bsde
from .errors import BudgetExceeded, ContractError, ReachabilityError
from .hjb import ControlGrid, ValueGrid
from .kernels import derive_seed
from .parallel import indexed_thread_map
from .problem import ControlProblem
from .sde import constant_policy, piecewise_policy, simulate_paths


@dataclass(frozen=True)
class McConfig:
    """Monte-Carlo budget for probe-level estimates."""

    n_paths: int = 4000
    steps: int = 40
    seed: int = 20240901
    reg: RegressionConfig = RegressionConfig()


def _semigroup_estimate(bundle, spec, policy, eta, reg):
    """Mean and MC stderr of G_{t0,t1}[eta] over the bundle.

    stderr is the plain-MC half-width of the pathwise functional
    eta + integral of the driver (conservative, as in solve_bsde).
    """
    y, _, driver_sum = _backward_recursion(bundle, spec, policy, reg,
                                           bundle.n_steps, eta)
    pathwise = eta + driver_sum
    m = bundle.n_paths
    stderr = float(pathwise.std(ddof=1) / np.sqrt(m)) if m > 1 else 0.0
    return float(y[:, 0].mean()), stderr


@dataclass(frozen=True)
class DppProbeResult:
    t: float
    x: list
    residual: float
    tolerance: float
    status: str                  # "pass" | "fail" | "skipped"
    decomposition: dict
    best_control: list
    one_sided_ok: bool


@dataclass(frozen=True)
class DppReport:
    probes: tuple
    delta: float
    passed: bool
    summary: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "delta": self.delta,
            "summary": self.summary,
            "probes": [{
                "t": p.t, "x": p.x, "residual": p.residual,
                "tolerance": p.tolerance, "status": p.status,
                "pass": p.status == "pass",
                "one_sided_ok": p.one_sided_ok,
                "decomposition": p.decomposition,
                "best_control": p.best_control,
            } for p in self.probes],
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def dpp_residual(value: ValueGrid, problem: ControlProblem, t_index: int,
                 x_node, delta_steps: int, cgrid: ControlGrid,
                 mc: McConfig = McConfig(), max_exit_fraction: float = 0.01):
    """Signed residual u(t,x) - max_v G_{t,t+delta}[u(t+delta, .)] at a probe.

    Constant controls over [t, t+delta], common random numbers across
    candidates. Raises ReachabilityError when more than max_exit_fraction
    of paths leave the value grid's box at t+delta (interp would clamp).
    Returns (residual, mc_stderr, best_control, exit_fraction).
    """
    grid = value.grid
    if not (0 <= t_index <= t_index + delta_steps <= grid.n_layers):
        raise ContractError("probe interval outside the value grid")
    x_node = np.atleast_1d(np.asarray(x_node, float))
    t = float(grid.t_nodes[t_index])
    u_tx = float(value.interp(t_index, x_node[None, :])[0])
    if delta_steps == 0:
        return 0.0, 0.0, None, 0.0
    t1 = float(grid.t_nodes[t_index + delta_steps])
    bounds = grid.x_bounds()
    seed = derive_seed(mc.seed, 101, t_index, delta_steps)

    best = -np.inf
    best_ctl = None
    best_stderr = 0.0
    worst_exit = 0.0
    for j, v in enumerate(cgrid.points):
        policy = constant_policy(cgrid.control_set, v)
        bundle = simulate_paths(problem.sde, policy, t, x_node,
                                steps=mc.steps, n_paths=mc.n_paths,
                                seed=seed, t_end=t1)
        x_end = bundle.paths[:, -1]
        outside = ((x_end < bounds[:, 0]) | (x_end > bounds[:, 1])).any(axis=1)
        exit_frac = float(outside.mean())
        worst_exit = max(worst_exit, exit_frac)
        if exit_frac > max_exit_fraction:
            raise ReachabilityError(
                f"{100 * exit_frac:.2f}% of paths left the value grid at "
                f"t+delta (probe t={t:.4g}, x={x_node.tolist()}, control {v.tolist()})")
        eta = value.interp(t_index + delta_steps, x_end)
        g_mean, g_se = _semigroup_estimate(bundle, problem.spec, policy,
                                           eta, mc.reg)
        if g_mean > best:
            best = g_mean
            best_ctl = v.copy()
            best_stderr = g_se
    return u_tx - best, best_stderr, best_ctl, worst_exit


def build_dpp_report(value: ValueGrid, value_refined: ValueGrid,
                     problem: ControlProblem, probes, delta_steps: int,
                     cgrid: ControlGrid, mc: McConfig = McConfig(),
                     n_sigma: float = 5.0, refine_factor: int = 4,
                     threads: int = 1) -> DppReport:
    """Run dpp_residual at each (t_index, x_node) probe and assemble the
    report with its tolerance decomposition.

    tolerance = n_sigma * MC stderr + |u_fine - u_coarse| at the probe;
    `value_refined` must share t-nodes at indices k*refine_factor.
    """
    grid = value.grid

    def run_probe(probe):
        t_index, x_node = probe
        x_node = np.atleast_1d(np.asarray(x_node, float))
        t = float(grid.t_nodes[t_index])
        u_coarse = float(value.interp(t_index, x_node[None, :])[0])
        u_fine = float(value_refined.interp(refine_factor * t_index,
                                            x_node[None, :])[0])
        grid_delta = abs(u_fine - u_coarse)
        try:
            residual, stderr, best_ctl, exit_frac = dpp_residual(
                value, problem, t_index, x_node, delta_steps, cgrid, mc)
        except ReachabilityError:
            return DppProbeResult(
                t=t, x=x_node.tolist(), residual=float("nan"),
                tolerance=float("nan"), status="skipped",
                decomposition={"mc": None, "grid": grid_delta},
                best_control=None, one_sided_ok=False)
        tolerance = n_sigma * stderr + grid_delta
        status = "pass" if abs(residual) <= tolerance else "fail"
        return DppProbeResult(
            t=t, x=x_node.tolist(), residual=residual, tolerance=tolerance,
            status=status,
            decomposition={"mc": n_sigma * stderr, "grid": grid_delta,
                           "exit_fraction": exit_frac},
            best_control=(best_ctl.tolist() if best_ctl is not None else None),
            one_sided_ok=bool(residual >= -tolerance))

    results = indexed_thread_map(run_probe, probes, threads)
    checked = [p for p in results if p.status != "skipped"]
    passed = bool(checked) and all(p.status == "pass" for p in checked)
    delta = float(delta_steps) * value.grid.dt
    summary = {
        "n_probes": len(results),
        "n_skipped": sum(p.status == "skipped" for p in results),
        "max_abs_residual": max((abs(p.residual) for p in checked),
                                default=0.0),
        "one_sided_all_ok": all(p.one_sided_ok for p in checked),
    }
    return DppReport(probes=tuple(results), delta=delta, passed=passed,
                     summary=summary)


# ---------------------------------------------------------------------------
# brute-force value oracle


@dataclass(frozen=True)
class BruteForceResult:
    value: float
    stderr: float
    best_sequence: np.ndarray     # (pieces, m)
    n_candidates: int


def brute_force_value(problem: ControlProblem, t: float, x,
                      control_grid: ControlGrid, pieces: int = 1,
                      mc: McConfig = McConfig(), budget: int = 4096,
                      threads: int = 1) -> BruteForceResult:
    """Enumerate piecewise-constant controls and maximize the BSDE value.

    The value is a lower bound of the true sup (finite control class);
    candidates share Brownian increments, so the argmax is exact up to
    regression noise. Budget-guards P^pieces.
    """
    p = control_grid.n_points
    n_seq = p ** pieces
    if n_seq > budget:
        raise BudgetExceeded(
            f"{p}^{pieces} = {n_seq} control sequences exceed budget {budget}")
    x = np.atleast_1d(np.asarray(x, float))
    horizon = problem.horizon
    if not t < horizon:
        raise ContractError("probe time must precede the horizon")
    breakpoints = t + (horizon - t) * np.arange(1, pieces) / pieces
    seed = derive_seed(mc.seed, 202, pieces)

    def run_candidate(seq):
        vals = np.stack(seq)
        policy = (constant_policy(control_grid.control_set, vals[0])
                  if pieces == 1 else
                  piecewise_policy(control_grid.control_set, breakpoints, vals))
        bundle = simulate_paths(problem.sde, policy, t, x, steps=mc.steps,
                                n_paths=mc.n_paths, seed=seed)
        sol = solve_bsde(bundle, problem.spec, policy, mc.reg)
        return sol.y0, sol.y0_stderr

    sequences = list(itertools.product(control_grid.points, repeat=pieces))
    outcomes = indexed_thread_map(run_candidate, sequences, threads)
    values = np.array([o[0] for o in outcomes])
    j = int(np.argmax(values))
    return BruteForceResult(value=float(values[j]), stderr=float(outcomes[j][1]),
                            best_sequence=np.stack(sequences[j]),
                            n_candidates=n_seq)


@dataclass(frozen=True)
class DeterminismReport:
    values: tuple
    spread: float
    pooled_stderr: float
    status: str          # "pass" | "fail" | "inconclusive"


def determinism_probe(problem: ControlProblem, t: float, x,
                      control_grid: ControlGrid, seeds,
                      mc: McConfig = McConfig(), pieces: int = 1,
                      n_sigma: float = 5.0) -> DeterminismReport:
    """Spread of brute_force_value across independent seeds.

    The value function is deterministic; the estimates may differ only by
    Monte-Carlo noise, so the spread must stay within n_sigma pooled
    standard errors. When the noise dominates the value scale the probe is
    inconclusive rather than a pass.
    """
    seeds = list(seeds)
    if len(seeds) < 3:
        raise ContractError("determinism probe needs at least 3 seeds")
    results = [brute_force_value(problem, t, x, control_grid, pieces,
                                 McConfig(n_paths=mc.n_paths, steps=mc.steps,
                                          seed=int(s), reg=mc.reg))
               for s in seeds]
    values = np.array([r.value for r in results])
    spread = float(values.max() - values.min())
    pooled = float(np.sqrt(np.mean([r.stderr ** 2 for r in results])))
    scale = max(float(np.abs(values).max()), 1e-9)
    if n_sigma * pooled > 0.5 * scale:
        status = "inconclusive"
    elif spread <= n_sigma * pooled:
        status = "pass"
    else:
        status = "fail"
    return DeterminismReport(values=tuple(float(v) for v in values),
                             spread=spread, pooled_stderr=pooled,
                             status=status)


# ---------------------------------------------------------------------------
# regularity of the value surface


@dataclass(frozen=True)
class RegularityReport:
    lipschitz_x: float
    holder_t: float
    growth_c: float


def regularity_probe(value: ValueGrid,
                     trust_margin: float = 0.0) -> RegularityReport:
    """Max discrete difference quotients of the value surface.

    lipschitz_x: |du/dx| over adjacent nodes; holder_t: |du|/sqrt(dt) over
    adjacent layers; growth_c: fitted C in |u| <= C (1 + |x|).
    """
    grid = value.grid
    if min(grid.shape) < 3:
        raise ContractError("regularity probe needs >= 3 nodes per axis")
    mask = value.trust_mask(trust_margin)
    u = value.values
    dt = grid.dt
    lip = 0.0
    if grid.dim == 1:
        sel = np.where(mask)[0]
        sub = u[:, sel]
        dx = grid.dx[0]
        if len(sel) >= 2:
            lip = float(np.abs(np.diff(sub, axis=1)).max() / dx)
        hold = float(np.abs(np.diff(sub, axis=0)).max() / np.sqrt(dt))
        xn = np.abs(grid.x_axes[0][sel])
        growth = float((np.abs(sub) / (1.0 + xn[None, :])).max())
    else:
        sel0 = np.where(mask.any(axis=1))[0]
        sel1 = np.where(mask.any(axis=0))[0]
        sub = u[:, sel0][:, :, sel1]
        for axis, dx in ((1, grid.dx[0]), (2, grid.dx[1])):
            if sub.shape[axis] >= 2:
                lip = max(lip, float(np.abs(np.diff(sub, axis=axis)).max() / dx))
        hold = float(np.abs(np.diff(sub, axis=0)).max() / np.sqrt(dt))
        mesh = np.meshgrid(grid.x_axes[0][sel0], grid.x_axes[1][sel1],
                           indexing="ij")
        xn = np.sqrt(mesh[0] ** 2 + mesh[1] ** 2)
        growth = float((np.abs(sub) / (1.0 + xn[None])).max())
    return RegularityReport(lipschitz_x=lip, holder_t=hold, growth_c=growth)
