"""Backward SDE solver on a simulated path bundle.

Least-squares Monte Carlo: conditional expectations are polynomial (or
piecewise-constant) regressions per time step; the y-update is implicit and
exploits one-sided monotonicity (unique root for dt * mu+ < 1), while the
martingale integrand z enters explicitly at its regression estimate.

Also hosts the backward semigroup (terminal data at an interior step) and
the comparison-theorem harness for ordered driver/terminal pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .drivers import DriverSpec
from .errors import (ContractError, PremiseViolated, RegressionError,
                     RootBracketFailure, TimeStepTooLarge)
from .sde import ControlPolicy, PathBundle


@dataclass(frozen=True)
class RegressionConfig:
    """Conditional-expectation estimator: global polynomial least squares
    of a total degree, or piecewise-constant on quantile state bins (1-D
    robustness cross-check)."""

    basis: str = "polynomial"      # "polynomial" | "piecewise"
    degree: int = 3
    n_bins: int = 16
    ridge: float = 1e-8

    def __post_init__(self):
        if self.basis not in ("polynomial", "piecewise"):
            raise ContractError(f"unknown basis {self.basis!r}")
        if self.degree < 0 or self.n_bins < 1 or self.ridge < 0:
            raise ContractError("bad regression configuration")

    def describe(self) -> str:
        if self.basis == "polynomial":
            return f"poly(degree={self.degree}, ridge={self.ridge:g})"
        return f"bins(n={self.n_bins})"


@dataclass(frozen=True)
class BsdeSolution:
    y_paths: np.ndarray     # (M, N+1)
    z_paths: np.ndarray     # (M, N, d)
    y0: float
    y0_stderr: float
    regression_basis: str

    @property
    def n_paths(self) -> int:
        return self.y_paths.shape[0]


# ---------------------------------------------------------------------------
# regression backend


def _poly_features(x: np.ndarray, degree: int) -> np.ndarray:
    """Monomials of total degree <= degree, standardized per column."""
    m, n = x.shape
    cols = [np.ones(m)]
    if degree >= 1:
        # enumerate exponent multi-indices by total degree
        from itertools import combinations_with_replacement
        for deg in range(1, degree + 1):
            for combo in combinations_with_replacement(range(n), deg):
                col = np.ones(m)
                for j in combo:
                    col = col * x[:, j]
                cols.append(col)
    phi = np.stack(cols, axis=1)
    mean = phi[:, 1:].mean(axis=0)
    std = phi[:, 1:].std(axis=0)
    std = np.where(std > 1e-13, std, 1.0)
    phi[:, 1:] = (phi[:, 1:] - mean) / std
    return phi


def _is_degenerate(x: np.ndarray) -> bool:
    spread = x.max(axis=0) - x.min(axis=0)
    return bool(np.all(spread <= 1e-13 * (1.0 + np.abs(x).max(initial=0.0))))


def _fit_regression(x: np.ndarray, cfg: RegressionConfig, step: int):
    """Build a conditional-expectation estimator at a fixed state slab.

    Returns predict(targets) usable for several target sets (the value and
    the centered martingale targets share one design matrix). When the
    state is degenerate across paths the sigma-field is trivial and the
    estimator is the cross-path mean; the ridge never touches the
    intercept, so constant targets are reproduced exactly.
    """
    if _is_degenerate(x):
        def predict(t2):
            return np.broadcast_to(t2.mean(axis=0), t2.shape).copy()
        return predict

    if cfg.basis == "piecewise":
        if x.shape[1] != 1:
            raise ContractError("piecewise-constant basis is 1-D only")
        q = np.quantile(x[:, 0], np.linspace(0, 1, cfg.n_bins + 1)[1:-1])
        idx = np.searchsorted(q, x[:, 0], side="right")
        sels = [idx == b for b in range(cfg.n_bins)]

        def predict(t2):
            fitted = np.empty_like(t2)
            for sel in sels:
                if sel.any():
                    fitted[sel] = t2[sel].mean(axis=0)
            if not np.isfinite(fitted).all():
                raise RegressionError(step, "non-finite fitted values")
            return fitted
        return predict

    phi = _poly_features(x, cfg.degree)
    k = phi.shape[1]
    penalty = cfg.ridge * np.eye(k)
    penalty[0, 0] = 0.0
    gram = phi.T @ phi / len(phi) + penalty

    def predict(t2):
        rhs = phi.T @ t2 / len(phi)
        try:
            beta = np.linalg.solve(gram, rhs)
        except np.linalg.LinAlgError as exc:
            raise RegressionError(step, str(exc)) from None
        if not np.isfinite(beta).all():
            raise RegressionError(step, "non-finite regression coefficients")
        fitted = phi @ beta
        if not np.isfinite(fitted).all():
            raise RegressionError(step, "non-finite fitted values")
        return fitted
    return predict


# ---------------------------------------------------------------------------
# implicit monotone y-step


def _implicit_step_vec(c: np.ndarray, f_of_y: Callable, dt: float,
                       y_domain=(-np.inf, np.inf), tol: float = 1e-12,
                       max_iter: int = 120) -> np.ndarray:
    """Solve y = c + dt * f(y) per component;  f vectorized over (M,).

    g(y) = y - c - dt f(y) is strictly increasing for dt * mu+ < 1, so the
    root is unique; safeguarded Newton with a bisection fallback inside an
    expanding bracket, all iterates kept inside the open y-domain.
    """
    lo_dom, hi_dom = y_domain
    eps_dom = 1e-12

    def clip_dom(y):
        if np.isfinite(hi_dom):
            y = np.minimum(y, hi_dom - eps_dom * (1.0 + np.abs(hi_dom)))
        if np.isfinite(lo_dom):
            y = np.maximum(y, lo_dom + eps_dom * (1.0 + np.abs(lo_dom)))
        return y

    def g(y):
        return y - c - dt * np.asarray(f_of_y(y), float)

    y = clip_dom(c.astype(float).copy())
    g_y = g(y)
    radius = dt * np.abs(g_y) / max(dt, 1e-300) + 1e-3 * (1.0 + np.abs(y))
    lo = y.copy()
    hi = y.copy()
    g_lo = g_y.copy()
    g_hi = g_y.copy()
    for _ in range(80):
        need_lo = g_lo > 0
        need_hi = g_hi < 0
        if not (need_lo.any() or need_hi.any()):
            break
        lo = np.where(need_lo, clip_dom(lo - radius), lo)
        hi = np.where(need_hi, clip_dom(hi + radius), hi)
        if need_lo.any():
            g_lo = np.where(need_lo, g(lo), g_lo)
        if need_hi.any():
            g_hi = np.where(need_hi, g(hi), g_hi)
        radius = radius * 2.0
    if (g_lo > 0).any() or (g_hi < 0).any():
        bad = int(np.argmax((g_lo > 0) | (g_hi < 0)))
        raise RootBracketFailure(
            f"no sign change after bracket expansion (path {bad}, "
            f"c={c[bad]:.6g})")

    y = 0.5 * (lo + hi)
    for _ in range(max_iter):
        g_y = g(y)
        done = np.abs(g_y) < tol
        if done.all():
            break
        # update brackets by sign
        neg = g_y < 0
        lo = np.where(neg, y, lo)
        hi = np.where(neg, hi, y)
        h_step = 1e-7 * (1.0 + np.abs(y))
        slope = (g(y + h_step) - g_y) / h_step
        with np.errstate(divide="ignore", invalid="ignore"):
            y_newton = y - g_y / slope
        bad = (~np.isfinite(y_newton)) | (y_newton <= lo) | (y_newton >= hi) \
            | (slope <= 0)
        y_next = np.where(bad, 0.5 * (lo + hi), y_newton)
        y = np.where(done, y, y_next)
    else:
        g_y = g(y)
        if (np.abs(g_y) >= tol).any():
            worst = int(np.argmax(np.abs(g_y)))
            raise RootBracketFailure(
                f"implicit step residual {np.abs(g_y).max():.3g} above "
                f"{tol:g} after {max_iter} iterations (path {worst})")
    return y


def implicit_y_step(c: float, f_frozen: Callable, dt: float,
                    mu_plus: float) -> float:
    """Unique root of y = c + dt*f(y) for a scalar frozen driver.

    Requires dt * mu+ < 1 (monotone well-posedness); residual < 1e-12.
    """
    if dt * max(mu_plus, 0.0) >= 1.0:
        raise TimeStepTooLarge(
            f"dt*mu+ = {dt * max(mu_plus, 0.0):.4g} >= 1; refine the grid")

    def f_vec(y):
        return np.array([float(f_frozen(float(y[0])))])

    out = _implicit_step_vec(np.array([float(c)]), f_vec, dt)
    return float(out[0])


# ---------------------------------------------------------------------------
# backward recursion


def _check_solvable(bundle: PathBundle, spec: DriverSpec):
    if not spec.audited:
        raise ContractError(
            f"driver {spec.name!r} must pass audit_conditions before solving")
    mu_plus = max(spec.constants.mu, 0.0)
    if bundle.dt * mu_plus >= 1.0:
        raise TimeStepTooLarge(
            f"dt*mu+ = {bundle.dt * mu_plus:.4g} >= 1 for driver {spec.name!r}")


def _backward_recursion(bundle: PathBundle, spec: DriverSpec,
                        policy: ControlPolicy, reg: RegressionConfig,
                        k_end: int, terminal: np.ndarray):
    """Shared engine: Y at k_end is `terminal`, recurse down to step 0.

    Returns (y_paths (M, k_end+1), z_paths (M, k_end, d), driver_sum (M,))
    where driver_sum = sum_k dt * f(t_k, X_k, Y_k, Z_k, v_k) along paths.
    """
    m_paths = bundle.n_paths
    d = bundle.dim_noise
    dt = bundle.dt
    y = np.empty((m_paths, k_end + 1))
    z = np.zeros((m_paths, k_end, d))
    y[:, k_end] = terminal
    driver_sum = np.zeros(m_paths)
    for k in range(k_end - 1, -1, -1):
        x_k = bundle.paths[:, k]
        t_k = float(bundle.time_grid[k])
        v_k = policy.controls_at(t_k, x_k)
        predict = _fit_regression(x_k, reg, step=k)
        c_k = predict(y[:, k + 1][:, None])[:, 0]
        # centered martingale targets: same conditional expectation, exact
        # zero for value processes already measurable at step k
        z_tgt = (y[:, k + 1] - c_k)[:, None] * bundle.brownian_increments[:, k]
        z_k = predict(z_tgt) / dt
        z[:, k] = z_k

        def f_of_y(yv, _t=t_k, _x=x_k, _z=z_k, _v=v_k):
            return spec.f(_t, _x, yv, _z, _v)

        y[:, k] = _implicit_step_vec(c_k, f_of_y, dt, spec.y_domain)
        driver_sum += y[:, k] - c_k  # equals dt * f(t_k, ., Y_k, .) exactly
    return y, z, driver_sum


def solve_bsde(bundle: PathBundle, spec: DriverSpec, policy: ControlPolicy,
               reg: RegressionConfig = RegressionConfig()) -> BsdeSolution:
    """Solve the coupled BSDE backward on the bundle's grid.

    Y_N = h(X_N) exactly; then per step the conditional expectations
    c_k = E[Y_{k+1} | X_k] and Z_k = E[Y_{k+1} dB_k | X_k] / dt are
    regression estimates and Y_k solves the implicit monotone equation.
    y0 averages Y_0; its half-width is the plain-MC standard error of the
    pathwise functional h(X_N) + sum dt*f (whose mean y0 also estimates),
    a deliberately conservative choice.
    """
    if spec.h is None:
        raise ContractError("driver spec has no terminal map h")
    _check_solvable(bundle, spec)
    terminal = np.asarray(spec.h(bundle.paths[:, -1]), float)
    y, z, driver_sum = _backward_recursion(bundle, spec, policy, reg,
                                           bundle.n_steps, terminal)
    pathwise = terminal + driver_sum
    y0 = float(y[:, 0].mean())
    stderr = float(pathwise.std(ddof=1) / np.sqrt(bundle.n_paths)) \
        if bundle.n_paths > 1 else 0.0
    return BsdeSolution(y_paths=y, z_paths=z, y0=y0, y0_stderr=stderr,
                        regression_basis=reg.describe())


def backward_semigroup(bundle: PathBundle, spec: DriverSpec,
                       policy: ControlPolicy, t1_index: int,
                       eta: np.ndarray,
                       reg: RegressionConfig = RegressionConfig()) -> np.ndarray:
    """G_{t, t1}[eta]: run the recursion on [t0, t1] with terminal eta.

    eta must be per-path values measurable at step t1_index (a function of
    X at that step). Returns the per-path estimate at the bundle start.
    """
    if not (0 <= t1_index <= bundle.n_steps):
        raise ContractError("t1_index outside the bundle grid")
    _check_solvable(bundle, spec)
    eta = np.asarray(eta, float)
    if eta.shape != (bundle.n_paths,):
        raise ContractError("eta must be per-path values at t1")
    if t1_index == 0:
        return eta.copy()
    y, _, _ = _backward_recursion(bundle, spec, policy, reg, t1_index, eta)
    return y[:, 0]


# ---------------------------------------------------------------------------
# comparison-theorem harness


@dataclass(frozen=True)
class ComparisonReport:
    ordered: bool
    worst_violation: float
    tol_mc: float
    min_fraction_ok: float


def _signed_gap_on_lattice(spec_a: DriverSpec, spec_b: DriverSpec,
                           density: int = 9) -> float:
    """max over a (t,x,y,z,v) lattice of f_a - f_b (premise audit)."""
    box = spec_a.audit_box
    t_axis = np.linspace(0.0, box.t_max, 5)
    axes = [np.linspace(lo, hi, density) for lo, hi in box.x_bounds]
    y_axis = np.linspace(box.y_bounds[0], box.y_bounds[1], density)
    v_axes = [np.linspace(lo, hi, 5) for lo, hi in box.v_bounds]
    z_axes = ([np.linspace(lo, hi, 3) for lo, hi in box.z_bounds]
              if box.z_bounds is not None else [])
    mesh = np.meshgrid(*axes, y_axis, *z_axes, *v_axes, indexing="ij")
    n = len(axes)
    d = len(z_axes)
    flat = [a.reshape(-1) for a in mesh]
    x = np.stack(flat[:n], axis=1)
    y = flat[n]
    z = np.stack(flat[n + 1:n + 1 + d], axis=1) if d else None
    v = np.stack(flat[n + 1 + d:], axis=1)
    worst = -np.inf
    for t_k in t_axis:
        fa = np.asarray(spec_a.f(float(t_k), x, y, z, v), float)
        fb = np.asarray(spec_b.f(float(t_k), x, y, z, v), float)
        worst = max(worst, float((fa - fb).max()))
    return worst


def comparison_check(bundle: PathBundle, spec_pair, policy: ControlPolicy,
                     reg: RegressionConfig = RegressionConfig(),
                     terminal_pair=None, n_sigma: float = 5.0,
                     path_fraction: float = 0.99) -> ComparisonReport:
    """Solve both BSDEs on the same bundle and check Y <= Y' pathwise.

    Premises (f <= f' on the audit lattice, h <= h' on the state lattice)
    are verified first; their failure is PremiseViolated, not a solver
    error. Ordered means: at every step, at least `path_fraction` of paths
    satisfy Y_k <= Y'_k + tol with tol = n_sigma * pooled stderr.
    """
    spec_lo, spec_hi = spec_pair
    if terminal_pair is not None:
        spec_lo = replace(spec_lo, h=terminal_pair[0])
        spec_hi = replace(spec_hi, h=terminal_pair[1])
    if spec_lo.h is None or spec_hi.h is None:
        raise ContractError("both specs need terminal maps")
    slack = 1e-10
    if _signed_gap_on_lattice(spec_lo, spec_hi) > slack:
        raise PremiseViolated("driver ordering f <= f' fails on the audit lattice")
    xg = np.stack([np.linspace(lo, hi, 65)
                   for lo, hi in spec_lo.audit_box.x_bounds], axis=1)
    h_gap = float((np.asarray(spec_lo.h(xg), float)
                   - np.asarray(spec_hi.h(xg), float)).max())
    if h_gap > slack:
        raise PremiseViolated("terminal ordering h <= h' fails on the lattice")

    sol_lo = solve_bsde(bundle, spec_lo, policy, reg)
    sol_hi = solve_bsde(bundle, spec_hi, policy, reg)
    tol = n_sigma * float(np.hypot(sol_lo.y0_stderr, sol_hi.y0_stderr))
    gap = sol_lo.y_paths - sol_hi.y_paths  # positive entries are violations
    worst = float(gap.max())
    frac_ok = float((gap <= tol).mean(axis=0).min())
    return ComparisonReport(ordered=bool(frac_ok >= path_fraction),
                            worst_violation=worst, tol_mc=tol,
                            min_fraction_ok=frac_ok)


# ---------------------------------------------------------------------------
# export


def export_solution_csv(solution: BsdeSolution, bundle: PathBundle, path,
                        max_paths: Optional[int] = None) -> None:
    """Long-format CSV: path_id, step, t, x..., y, z... (17 significant digits)."""
    m = solution.n_paths if max_paths is None else min(max_paths,
                                                       solution.n_paths)
    n_steps = bundle.n_steps
    n = bundle.dim_state
    d = bundle.dim_noise
    with open(path, "w") as fh:
        x_cols = ",".join(f"x{j}" for j in range(n))
        z_cols = ",".join(f"z{j}" for j in range(d))
        fh.write(f"path_id,step,t,{x_cols},y,{z_cols}\n")
        for i in range(m):
            for k in range(n_steps + 1):
                xs = ",".join("%.17g" % v for v in bundle.paths[i, k])
                zs = ",".join("%.17g" % v
                              for v in (solution.z_paths[i, k]
                                        if k < n_steps else np.zeros(d)))
                fh.write(f"{i},{k},%.17g,{xs},%.17g,{zs}\n"
                         % (bundle.time_grid[k], solution.y_paths[i, k]))
