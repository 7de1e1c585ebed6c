"""Monotone explicit finite differences for the HJB equation.

Backward march u_k = u_{k+1} + dt * H_disc(u_{k+1}) with upwinded first
differences, central second differences and pointwise maximization over a
discrete control grid. Monotone under the CFL condition

    dt * ( sum_i s2_ii / dx_i^2 + sum_i |b_i| / dx_i ) <= 1

at every node and control (s2 = sigma sigma^T). Requires a z-free, audited
driver; the driver's r-argument is evaluated explicitly at u_{k+1}, valid
under the same dt*mu+ < 1 bound the BSDE route uses. Dimension cap: 1-D
(numba fast path) and 2-D with diagonal s2 (numpy path).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .drivers import (DriverSpec, MollifierSpec, audit_conditions, mollify,
                      uniform_gap)
from .errors import (ConditionAuditFailed, ContractError, Diverged,
                     EvaluationError, SchemeNotMonotone, ZNotSupported)
from .problem import ControlProblem
from .sde import ControlledSDE, ControlSet

_BLOWUP = 1e12


@dataclass(frozen=True)
class ControlGrid:
    """Finite control lattice covering the admissible set.

    Uniform per-dimension resolution; `refine()` doubles it while keeping
    every existing point (counts c -> 2c-1).
    """

    points: np.ndarray          # (P, m)
    counts: tuple
    control_set: ControlSet

    @staticmethod
    def from_set(control_set: ControlSet, counts) -> "ControlGrid":
        if control_set.points is not None:
            pts = control_set.points
            return ControlGrid(points=pts, counts=(len(pts),),
                               control_set=control_set)
        counts = tuple(int(c) for c in np.atleast_1d(counts))
        if len(counts) != control_set.dim:
            raise ContractError("need one resolution per control dimension")
        axes = [np.linspace(lo, hi, c) if c > 1 else np.array([(lo + hi) / 2.0])
                for (lo, hi), c in zip(control_set.bounds, counts)]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([a.reshape(-1) for a in mesh], axis=1)
        return ControlGrid(points=pts, counts=counts, control_set=control_set)

    def refine(self) -> "ControlGrid":
        if self.control_set.points is not None:
            return self
        return ControlGrid.from_set(
            self.control_set, tuple(2 * c - 1 if c > 1 else 1
                                    for c in self.counts))

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Uniform rectangular space-time lattice with a boundary mode."""

    t_nodes: np.ndarray                # (N_t+1,)
    x_axes: tuple                      # per-dimension node arrays
    boundary: str = "dirichlet"        # "dirichlet" | "extrapolate"

    def __post_init__(self):
        object.__setattr__(self, "t_nodes", np.asarray(self.t_nodes, float))
        object.__setattr__(self, "x_axes",
                           tuple(np.asarray(a, float) for a in self.x_axes))
        if self.boundary not in ("dirichlet", "extrapolate"):
            raise ContractError(f"unknown boundary mode {self.boundary!r}")
        if len(self.x_axes) not in (1, 2):
            raise ContractError("grid solver supports 1-D and 2-D state only")
        for a in self.x_axes:
            if len(a) < 3:
                raise ContractError("need at least 3 nodes per axis")

    @property
    def dim(self) -> int:
        return len(self.x_axes)

    @property
    def dt(self) -> float:
        return float(self.t_nodes[1] - self.t_nodes[0])

    @property
    def dx(self) -> tuple:
        return tuple(float(a[1] - a[0]) for a in self.x_axes)

    @property
    def shape(self) -> tuple:
        return tuple(len(a) for a in self.x_axes)

    @property
    def n_layers(self) -> int:
        return len(self.t_nodes) - 1

    def nodes_flat(self) -> np.ndarray:
        mesh = np.meshgrid(*self.x_axes, indexing="ij")
        return np.stack([a.reshape(-1) for a in mesh], axis=1)

    def x_bounds(self) -> np.ndarray:
        return np.array([[a[0], a[-1]] for a in self.x_axes])

    @staticmethod
    def build(x_bounds, nx, t0: float, horizon: float, n_layers: int,
              boundary: str = "dirichlet") -> "SpaceTimeGrid":
        x_bounds = np.atleast_2d(np.asarray(x_bounds, float))
        nx = np.atleast_1d(nx)
        axes = [np.linspace(lo, hi, int(c)) for (lo, hi), c in zip(x_bounds, nx)]
        t_nodes = t0 + (horizon - t0) * np.arange(n_layers + 1) / n_layers
        return SpaceTimeGrid(t_nodes=t_nodes, x_axes=tuple(axes),
                             boundary=boundary)

    @staticmethod
    def from_cfl(x_bounds, nx, sde: ControlledSDE, cgrid: ControlGrid,
                 t0: float = 0.0, horizon: Optional[float] = None,
                 safety: float = 0.9, boundary: str = "dirichlet"
                 ) -> "SpaceTimeGrid":
        """Pick the layer count from the CFL bound (sampled over time)."""
        horizon = sde.horizon if horizon is None else horizon
        trial = SpaceTimeGrid.build(x_bounds, nx, t0, horizon, 2, boundary)
        worst = 0.0
        for t in np.linspace(t0, horizon, 9):
            b_tab, s2_tab = _coef_tables(sde, cgrid, float(t),
                                         trial.nodes_flat())
            worst = max(worst, _cfl_load(trial, b_tab, s2_tab))
        if worst <= 0.0:
            n_layers = max(1, int(np.ceil((horizon - t0) / (safety))))
        else:
            dt_max = safety / worst
            n_layers = max(1, int(np.ceil((horizon - t0) / dt_max)))
        return SpaceTimeGrid.build(x_bounds, nx, t0, horizon, n_layers,
                                   boundary)


@dataclass(frozen=True)
class ValueGrid:
    grid: SpaceTimeGrid
    values: np.ndarray          # (N_t+1, *shape)
    argmax_control: np.ndarray  # (N_t+1, *shape) indices into the control grid
    control_points: np.ndarray  # (P, m)
    scheme_meta: dict = field(default_factory=dict)

    def layer(self, t_index: int) -> np.ndarray:
        return self.values[t_index]

    def interp(self, t_index: int, x: np.ndarray) -> np.ndarray:
        """Multilinear interpolation of the layer at off-node states.

        States outside the box are clamped to the boundary value (callers
        audit the exit fraction and fold it into tolerances).
        """
        x = np.atleast_2d(np.asarray(x, float))
        u = self.values[t_index]
        if self.grid.dim == 1:
            return np.interp(x[:, 0], self.grid.x_axes[0], u)
        ax0, ax1 = self.grid.x_axes
        i = np.clip(np.searchsorted(ax0, x[:, 0]) - 1, 0, len(ax0) - 2)
        j = np.clip(np.searchsorted(ax1, x[:, 1]) - 1, 0, len(ax1) - 2)
        w0 = np.clip((x[:, 0] - ax0[i]) / (ax0[i + 1] - ax0[i]), 0.0, 1.0)
        w1 = np.clip((x[:, 1] - ax1[j]) / (ax1[j + 1] - ax1[j]), 0.0, 1.0)
        return ((1 - w0) * (1 - w1) * u[i, j] + w0 * (1 - w1) * u[i + 1, j]
                + (1 - w0) * w1 * u[i, j + 1] + w0 * w1 * u[i + 1, j + 1])

    def trust_mask(self, margin: float) -> np.ndarray:
        """Interior nodes at least `margin * width` from every side."""
        masks = []
        for a in self.grid.x_axes:
            w = a[-1] - a[0]
            masks.append((a >= a[0] + margin * w - 1e-12)
                         & (a <= a[-1] - margin * w + 1e-12))
        if self.grid.dim == 1:
            return masks[0]
        return masks[0][:, None] & masks[1][None, :]


# ---------------------------------------------------------------------------
# coefficient tables and the Hamiltonian


def _coef_tables(sde: ControlledSDE, cgrid: ControlGrid, t: float,
                 nodes: np.ndarray):
    """Evaluate drift and diagonal of sigma sigma^T on nodes x controls.

    Returns b_tab, s2_tab with shape (K, P, n). Off-diagonal diffusion is
    rejected in 2-D (no monotone 2-point stencil for cross terms).
    """
    k_nodes = nodes.shape[0]
    p = cgrid.n_points
    n = sde.dim_state
    x_rep = np.repeat(nodes, p, axis=0)
    v_rep = np.tile(cgrid.points, (k_nodes, 1))
    b = np.asarray(sde.drift(t, x_rep, v_rep), float).reshape(k_nodes, p, n)
    sig = np.asarray(sde.diffusion(t, x_rep, v_rep), float)
    s2_full = np.einsum("kij,klj->kil", sig, sig).reshape(k_nodes, p, n, n)
    if not (np.isfinite(b).all() and np.isfinite(s2_full).all()):
        raise EvaluationError("non-finite SDE coefficient on the grid")
    if n == 2:
        off = np.abs(s2_full[..., 0, 1]).max()
        scale = np.abs(s2_full).max() + 1e-300
        if off > 1e-12 * scale:
            raise ContractError(
                "2-D grid solver needs diagonal sigma*sigma^T on the grid")
    s2 = np.stack([s2_full[..., i, i] for i in range(n)], axis=-1)
    return b, s2


def _f_table(spec: DriverSpec, t: float, nodes: np.ndarray, r: np.ndarray,
             cgrid: ControlGrid) -> np.ndarray:
    """Driver values on nodes x controls with the r-argument per node."""
    k_nodes = nodes.shape[0]
    p = cgrid.n_points
    x_rep = np.repeat(nodes, p, axis=0)
    v_rep = np.tile(cgrid.points, (k_nodes, 1))
    y_rep = np.repeat(np.asarray(r, float), p)
    vals = np.asarray(spec.f(t, x_rep, y_rep, None, v_rep), float)
    if not np.isfinite(vals).all():
        j = int(np.argmin(np.isfinite(vals)))
        raise EvaluationError("non-finite driver value on the grid",
                              point={"x": x_rep[j].tolist(),
                                     "y": float(y_rep[j])})
    return vals.reshape(k_nodes, p)


def _cfl_load(grid: SpaceTimeGrid, b_tab: np.ndarray,
              s2_tab: np.ndarray) -> float:
    """max over nodes/controls of sum_i s2_ii/dx_i^2 + |b_i|/dx_i."""
    dx = grid.dx
    load = np.zeros(b_tab.shape[:2])
    for i in range(grid.dim):
        load = load + s2_tab[..., i] / dx[i] ** 2 + np.abs(b_tab[..., i]) / dx[i]
    return float(load.max())


def hamiltonian(t: float, x, r: float, p_grad, a_hess, sde: ControlledSDE,
                spec: DriverSpec, cgrid: ControlGrid):
    """H(t,x,r,p,A) = max_v { 1/2 Tr(sigma sigma* A) + <p, b> + f(t,x,r,v) }.

    Returns (H, argmax control point); ties break to the lowest index.
    """
    if not spec.z_free:
        raise ZNotSupported("the HJB route needs a z-free driver")
    x = np.atleast_1d(np.asarray(x, float))
    p_grad = np.atleast_1d(np.asarray(p_grad, float))
    a_hess = np.atleast_2d(np.asarray(a_hess, float))
    if not np.allclose(a_hess, a_hess.T, atol=1e-12):
        raise ContractError("Hessian argument must be symmetric")
    n_ctl = cgrid.n_points
    x_rep = np.broadcast_to(x, (n_ctl, x.shape[0]))
    v = cgrid.points
    b = np.asarray(sde.drift(t, x_rep, v), float)
    sig = np.asarray(sde.diffusion(t, x_rep, v), float)
    trace = 0.5 * np.einsum("kij,klj,il->k", sig, sig, a_hess)
    drift_term = b @ p_grad
    f_vals = np.asarray(
        spec.f(t, x_rep, np.full(n_ctl, float(r)), None, v), float)
    cand = trace + drift_term + f_vals
    if not np.isfinite(cand).all():
        j = int(np.argmin(np.isfinite(cand)))
        raise EvaluationError("non-finite Hamiltonian candidate",
                              point={"control": v[j].tolist()})
    j = int(np.argmax(cand))
    return float(cand[j]), v[j].copy()


# ---------------------------------------------------------------------------
# the backward march


def _boundary_apply(grid: SpaceTimeGrid, u: np.ndarray,
                    h_layer: np.ndarray) -> None:
    if grid.dim == 1:
        if grid.boundary == "dirichlet":
            u[0] = h_layer[0]
            u[-1] = h_layer[-1]
        else:
            u[0] = 2.0 * u[1] - u[2]
            u[-1] = 2.0 * u[-2] - u[-3]
    else:
        if grid.boundary != "dirichlet":
            raise ContractError("2-D grids support the dirichlet boundary only")
        u[0, :] = h_layer[0, :]
        u[-1, :] = h_layer[-1, :]
        u[:, 0] = h_layer[:, 0]
        u[:, -1] = h_layer[:, -1]


def _march_layer_2d(u, b_tab, s2_tab, f_tab, dt, dx, shape):
    nx0, nx1 = shape
    ugrid = u.reshape(shape)
    b = b_tab.reshape(nx0, nx1, -1, 2)
    s2 = s2_tab.reshape(nx0, nx1, -1, 2)
    f = f_tab.reshape(nx0, nx1, -1)
    ui = ugrid[1:-1, 1:-1][..., None]
    d2_0 = (ugrid[2:, 1:-1] - 2.0 * ugrid[1:-1, 1:-1] + ugrid[:-2, 1:-1])[..., None]
    d2_1 = (ugrid[1:-1, 2:] - 2.0 * ugrid[1:-1, 1:-1] + ugrid[1:-1, :-2])[..., None]
    up_0 = (ugrid[2:, 1:-1] - ugrid[1:-1, 1:-1])[..., None]
    dn_0 = (ugrid[1:-1, 1:-1] - ugrid[:-2, 1:-1])[..., None]
    up_1 = (ugrid[1:-1, 2:] - ugrid[1:-1, 1:-1])[..., None]
    dn_1 = (ugrid[1:-1, 1:-1] - ugrid[1:-1, :-2])[..., None]
    b0 = b[1:-1, 1:-1, :, 0]
    b1 = b[1:-1, 1:-1, :, 1]
    cand = (0.5 * s2[1:-1, 1:-1, :, 0] * d2_0 / (dx[0] * dx[0])
            + 0.5 * s2[1:-1, 1:-1, :, 1] * d2_1 / (dx[1] * dx[1])
            + np.where(b0 > 0, b0, 0.0) * up_0 / dx[0]
            + np.where(b0 < 0, b0, 0.0) * dn_0 / dx[0]
            + np.where(b1 > 0, b1, 0.0) * up_1 / dx[1]
            + np.where(b1 < 0, b1, 0.0) * dn_1 / dx[1]
            + f[1:-1, 1:-1])
    arg = np.argmax(cand, axis=2)
    best = np.take_along_axis(cand, arg[..., None], axis=2)[..., 0]
    out = ugrid.copy()
    out[1:-1, 1:-1] = ugrid[1:-1, 1:-1] + dt * best
    argmax = np.zeros(shape, dtype=np.int64)
    argmax[1:-1, 1:-1] = arg
    return out.reshape(-1), argmax.reshape(-1)


def solve_hjb(grid: SpaceTimeGrid, sde: ControlledSDE, spec: DriverSpec,
              cgrid: ControlGrid) -> ValueGrid:
    """Backward time-march of the monotone explicit scheme.

    Refuses to run when the CFL audit fails (SchemeNotMonotone); re-checks
    the exact CFL load at every layer. Terminal layer is h(x) bit-exactly;
    boundary nodes follow the grid's boundary mode.
    """
    if not spec.z_free:
        raise ZNotSupported("the HJB route needs a z-free driver")
    if not spec.audited:
        raise ContractError(
            f"driver {spec.name!r} must pass audit_conditions before solving")
    if spec.h is None:
        raise ContractError("driver spec has no terminal map h")
    nodes = grid.nodes_flat()
    dt = grid.dt
    dx = grid.dx
    # upfront audit at a fan of times, exact per-layer check during the march
    worst = 0.0
    for t in np.linspace(float(grid.t_nodes[0]), float(grid.t_nodes[-1]), 9):
        b_tab, s2_tab = _coef_tables(sde, cgrid, float(t), nodes)
        worst = max(worst, _cfl_load(grid, b_tab, s2_tab))
    if dt * worst > 1.0 + 1e-12:
        raise SchemeNotMonotone(
            f"CFL load dt*{worst:.4g} = {dt * worst:.4g} > 1; "
            "refine the time grid")
    n_layers = grid.n_layers
    shape = grid.shape
    values = np.empty((n_layers + 1,) + shape)
    argmax = np.zeros((n_layers + 1,) + shape, dtype=np.int64)
    h_layer = np.asarray(spec.h(nodes), float).reshape(shape)
    if not np.isfinite(h_layer).all():
        raise EvaluationError("non-finite terminal values on the grid")
    values[n_layers] = h_layer
    u = h_layer.reshape(-1).copy()
    min_margin = np.inf
    from .kernels import hjb_layer_update_1d
    for k in range(n_layers - 1, -1, -1):
        t_next = float(grid.t_nodes[k + 1])
        b_tab, s2_tab = _coef_tables(sde, cgrid, t_next, nodes)
        load = _cfl_load(grid, b_tab, s2_tab)
        if dt * load > 1.0 + 1e-12:
            raise SchemeNotMonotone(
                f"CFL violated at layer {k + 1}: dt*load = {dt * load:.4g}")
        min_margin = min(min_margin, 1.0 - dt * load)
        f_tab = _f_table(spec, t_next, nodes, u, cgrid)
        if grid.dim == 1:
            u_new, arg = hjb_layer_update_1d(
                u, b_tab[..., 0], s2_tab[..., 0], f_tab, dt, dx[0])
        else:
            u_new, arg = _march_layer_2d(u, b_tab, s2_tab, f_tab, dt, dx,
                                         shape)
        u_new = u_new.reshape(shape)
        _boundary_apply(grid, u_new, h_layer)
        if np.abs(u_new).max() > _BLOWUP:
            raise Diverged(f"|u| exceeded {_BLOWUP:g} at layer {k}")
        values[k] = u_new
        argmax[k] = arg.reshape(shape)
        u = u_new.reshape(-1).copy()
    meta = {"cfl_margin": float(min_margin), "boundary": grid.boundary,
            "dt": dt, "dx": list(dx), "control_points": cgrid.n_points}
    return ValueGrid(grid=grid, values=values, argmax_control=argmax,
                     control_points=cgrid.points.copy(), scheme_meta=meta)


# ---------------------------------------------------------------------------
# scheme diagnostics


def scheme_monotonicity_check(grid: SpaceTimeGrid, sde: ControlledSDE,
                              spec: DriverSpec, cgrid: ControlGrid,
                              probes: int = 16, bump: float = 1e-6):
    """Probe discrete monotonicity of the layer update.

    At `probes` interior nodes of the terminal layer, bump each stencil
    value of u_{k+1} (left, center, right) by +bump and verify the updated
    u_k does not decrease. Returns (ok, witness) with a witness dict on the
    first failure; never raises for a non-monotone scheme.

    The center probe also feels the driver's r-slope, so it can flag
    violations the CFL bound alone does not cover.
    """
    if grid.dim != 1:
        raise ContractError("monotonicity probe is 1-D only")
    nodes = grid.nodes_flat()
    h_layer = np.asarray(spec.h(nodes), float)
    dt = grid.dt
    dx = grid.dx[0]
    t_next = float(grid.t_nodes[-1])
    b_tab, s2_tab = _coef_tables(sde, cgrid, t_next, nodes)
    nx = len(nodes)
    probe_ix = np.unique(np.linspace(1, nx - 2, probes).astype(int))
    scale = np.abs(h_layer).max() + 1.0

    def updated_at(u_layer, i):
        f_row = _f_table(spec, t_next, nodes[i:i + 1], u_layer[i:i + 1], cgrid)[0]
        d2 = u_layer[i + 1] - 2.0 * u_layer[i] + u_layer[i - 1]
        up = u_layer[i + 1] - u_layer[i]
        dn = u_layer[i] - u_layer[i - 1]
        b = b_tab[i, :, 0]
        bp = np.where(b > 0, b, 0.0)
        bm = np.where(b < 0, b, 0.0)
        cand = (0.5 * s2_tab[i, :, 0] * d2 / (dx * dx)
                + bp * up / dx + bm * dn / dx + f_row)
        return u_layer[i] + dt * float(cand.max())

    for i in probe_ix:
        base = updated_at(h_layer, i)
        for slot in (i - 1, i, i + 1):
            bumped = h_layer.copy()
            bumped[slot] += bump
            if updated_at(bumped, i) < base - 1e-12 * scale:
                witness = {"node": int(i), "slot": int(slot),
                           "x": float(nodes[i, 0]),
                           "decrease": float(base - updated_at(bumped, i))}
                return False, witness
    return True, None


@dataclass(frozen=True)
class ConvergenceRow:
    n: int
    f_gap: float
    h_gap: float
    h_gap_bound: float
    u_gap: float


def convergence_study(problem: ControlProblem, molls, grid: SpaceTimeGrid,
                      cgrid: ControlGrid, trust_margin: float = 0.2,
                      audit_budget: int = 512):
    """Solve the HJB hierarchy with mollified drivers f_n.

    For each n: sup |f_n - f| on the audit box, sup |H_n - H| over probe
    tuples (with its Lemma-style bound sup_v |f_n - f| at the same
    tuples), and sup |u_n - u| over the trust region at all time layers.
    """
    spec = problem.spec
    base_value = solve_hjb(grid, problem.sde, spec, cgrid)
    mask = base_value.trust_mask(trust_margin)
    box = spec.audit_box
    # probe tuples for the Hamiltonian gap: grid corners/medians x value range
    xs = np.stack([np.array([a[len(a) // 4], a[len(a) // 2], a[3 * len(a) // 4]])
                   for a in grid.x_axes], axis=1)
    r_vals = np.quantile(base_value.values, [0.1, 0.5, 0.9])
    p_vals = (-1.0, 0.5)
    a_vals = (-0.5, 0.25)
    rows = []
    for n in molls:
        moll_spec = mollify(spec, MollifierSpec(int(n)))
        moll_spec, report = audit_conditions(moll_spec, audit_budget)
        if not report.ok:
            raise ConditionAuditFailed(
                report.violations[0].condition,
                f"mollified driver n={n}")
        f_gap = uniform_gap(spec, moll_spec, box)
        h_gap = 0.0
        h_bound = 0.0
        t_probe = float(grid.t_nodes[0])
        for x in xs:
            for r in r_vals:
                fg = _sup_control_gap(spec, moll_spec, t_probe, x, float(r),
                                      cgrid)
                for p in p_vals:
                    for a in a_vals:
                        p_vec = np.full(grid.dim, p)
                        a_mat = np.eye(grid.dim) * a
                        h0, _ = hamiltonian(t_probe, x, float(r), p_vec,
                                            a_mat, problem.sde, spec, cgrid)
                        h1, _ = hamiltonian(t_probe, x, float(r), p_vec,
                                            a_mat, problem.sde, moll_spec,
                                            cgrid)
                        h_gap = max(h_gap, abs(h1 - h0))
                        h_bound = max(h_bound, fg)
        value_n = solve_hjb(grid, problem.sde, moll_spec, cgrid)
        u_gap = float(np.abs(value_n.values[:, mask]
                             - base_value.values[:, mask]).max())
        rows.append(ConvergenceRow(n=int(n), f_gap=f_gap, h_gap=h_gap,
                                   h_gap_bound=h_bound, u_gap=u_gap))
    return rows


def _sup_control_gap(spec_a: DriverSpec, spec_b: DriverSpec, t: float, x,
                     r: float, cgrid: ControlGrid) -> float:
    """sup over the control grid of |f_a - f_b| at one (t, x, r) tuple."""
    n_ctl = cgrid.n_points
    x_rep = np.broadcast_to(np.atleast_1d(np.asarray(x, float)),
                            (n_ctl, np.size(x)))
    y = np.full(n_ctl, float(r))
    fa = np.asarray(spec_a.f(t, x_rep, y, None, cgrid.points), float)
    fb = np.asarray(spec_b.f(t, x_rep, y, None, cgrid.points), float)
    return float(np.abs(fa - fb).max())


def export_value_csv(value: ValueGrid, path) -> None:
    """Long-format CSV (t, x..., u, argmax control...), 17 significant digits."""
    grid = value.grid
    nodes = grid.nodes_flat()
    n = grid.dim
    m = value.control_points.shape[1]
    with open(path, "w") as fh:
        x_cols = ",".join(f"x{j}" for j in range(n))
        v_cols = ",".join(f"v{j}" for j in range(m))
        fh.write(f"t,{x_cols},u,{v_cols}\n")
        for k, t in enumerate(value.grid.t_nodes):
            layer = value.values[k].reshape(-1)
            args = value.argmax_control[k].reshape(-1)
            for node, uval, aj in zip(nodes, layer, args):
                xs = ",".join("%.17g" % c for c in node)
                vs = ",".join("%.17g" % c for c in value.control_points[aj])
                fh.write("%.17g,%s,%.17g,%s\n" % (t, xs, uval, vs))
