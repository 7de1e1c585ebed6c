"""Controlled SDE simulation (Euler-Maruyama) and its statistical audits.

Coefficients are vectorized over paths: drift(t, X, V) -> (M, n) and
diffusion(t, X, V) -> (M, n, d) for X of shape (M, n), V of shape (M, m).
All randomness flows from counter-based substreams keyed by
(seed, path, step), so results never depend on scheduling or chunking.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.stats import qmc

from .errors import (ContractError, DegenerateComparison, DivergedPath,
                     EvaluationError, InvalidControl, UnstableMoment)
from .kernels import standard_normals

_MAGIC = b"RCLB1"


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def sobol_points(dim: int, n_points: int) -> np.ndarray:
    """Deterministic low-discrepancy sample in [0,1)^dim, >= n_points rows."""
    m = max(1, int(np.ceil(np.log2(max(2, n_points)))))
    eng = qmc.Sobol(d=dim, scramble=False)
    return eng.random_base2(m)[:n_points]


def scale_to_box(unit: np.ndarray, bounds: np.ndarray) -> np.ndarray:
    lo = bounds[:, 0]
    hi = bounds[:, 1]
    return lo + unit * (hi - lo)


# ---------------------------------------------------------------------------
# control sets and policies


@dataclass(frozen=True)
class ControlSet:
    """Compact admissible set: a box [lower, upper]^m, or a finite point set."""

    lower: np.ndarray
    upper: np.ndarray
    points: Optional[np.ndarray] = None  # (P, m); replaces the box if given

    def __post_init__(self):
        object.__setattr__(self, "lower", np.atleast_1d(np.asarray(self.lower, float)))
        object.__setattr__(self, "upper", np.atleast_1d(np.asarray(self.upper, float)))
        if self.points is not None:
            object.__setattr__(self, "points",
                               np.atleast_2d(np.asarray(self.points, float)))
        if np.any(self.lower > self.upper):
            raise ContractError("control set box has lower > upper")

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def bounds(self) -> np.ndarray:
        return np.stack([self.lower, self.upper], axis=1)

    def contains(self, v: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        v = np.atleast_2d(v)
        if self.points is not None:
            d = np.abs(v[:, None, :] - self.points[None, :, :]).max(axis=2)
            return d.min(axis=1) <= tol
        ok_lo = (v >= self.lower - tol).all(axis=1)
        ok_hi = (v <= self.upper + tol).all(axis=1)
        return ok_lo & ok_hi

    @staticmethod
    def box(lower, upper) -> "ControlSet":
        return ControlSet(np.atleast_1d(np.asarray(lower, float)),
                          np.atleast_1d(np.asarray(upper, float)))

    @staticmethod
    def finite(points) -> "ControlSet":
        pts = np.atleast_2d(np.asarray(points, float))
        return ControlSet(pts.min(axis=0), pts.max(axis=0), points=pts)


@dataclass(frozen=True)
class ControlPolicy:
    """Admissible control rule: constant, piecewise-constant in time, or
    state feedback. Every emitted control must lie in the control set."""

    control_set: ControlSet
    kind: str  # "constant" | "piecewise" | "feedback"
    values: Optional[np.ndarray] = None        # (m,) or (K, m)
    breakpoints: Optional[np.ndarray] = None   # (K-1,) interior times
    feedback: Optional[Callable] = None        # (t, X) -> (M, m)

    def controls_at(self, t: float, x: np.ndarray) -> np.ndarray:
        m_paths = x.shape[0]
        if self.kind == "constant":
            v = np.broadcast_to(self.values, (m_paths, self.values.shape[0]))
        elif self.kind == "piecewise":
            j = int(np.searchsorted(self.breakpoints, t, side="right"))
            v = np.broadcast_to(self.values[j], (m_paths, self.values.shape[1]))
        elif self.kind == "feedback":
            v = np.atleast_2d(np.asarray(self.feedback(t, x), float))
            if v.shape[0] == 1 and m_paths > 1:
                v = np.broadcast_to(v, (m_paths, v.shape[1]))
        else:
            raise ContractError(f"unknown policy kind {self.kind!r}")
        ok = self.control_set.contains(v)
        if not ok.all():
            bad = int(np.argmin(ok))
            raise InvalidControl(
                f"policy emitted control outside the admissible set at "
                f"t={t:.6g}, path {bad}: {np.asarray(v)[bad]}")
        return np.asarray(v, float)


def constant_policy(control_set: ControlSet, value) -> ControlPolicy:
    v = np.atleast_1d(np.asarray(value, float))
    return ControlPolicy(control_set, "constant", values=v)


def piecewise_policy(control_set, breakpoints, values) -> ControlPolicy:
    bp = np.atleast_1d(np.asarray(breakpoints, float))
    vals = np.atleast_2d(np.asarray(values, float))
    if vals.shape[0] != bp.shape[0] + 1:
        raise ContractError("piecewise policy needs len(values) == len(breakpoints)+1")
    return ControlPolicy(control_set, "piecewise", values=vals, breakpoints=bp)


def feedback_policy(control_set, fn: Callable) -> ControlPolicy:
    return ControlPolicy(control_set, "feedback", feedback=fn)


# ---------------------------------------------------------------------------
# the controlled state equation


@dataclass(frozen=True)
class ControlledSDE:
    """dX = b(t, X, v) dt + sigma(t, X, v) dB on [0, horizon].

    `lipschitz_bound` is the declared joint Lipschitz constant of (b, sigma)
    in (x, v); it is falsifiable by `audit_sde`, never proven. `domain_box`
    is the audit region only — simulated paths are not clamped to it.
    `stepper`, when given, replaces the generic Euler-Maruyama update
    (t, x, v, dt, dB) -> (x_next, n_clamped); used e.g. for
    positivity-preserving wealth dynamics.
    """

    dim_state: int
    dim_noise: int
    control_dim: int
    drift: Callable
    diffusion: Callable
    horizon: float
    lipschitz_bound: float
    domain_box: np.ndarray  # (n, 2)
    stepper: Optional[Callable] = None

    def __post_init__(self):
        object.__setattr__(self, "domain_box",
                           np.atleast_2d(np.asarray(self.domain_box, float)))
        if self.domain_box.shape != (self.dim_state, 2):
            raise ContractError("domain_box must have shape (dim_state, 2)")
        if self.horizon <= 0:
            raise ContractError("horizon must be positive")


@dataclass(frozen=True)
class PathBundle:
    """A seeded ensemble of simulated state paths on a uniform time grid.

    Immutable (arrays are read-only) and safe to share across workers.
    Regeneration with the same seed is bit-identical.
    """

    time_grid: np.ndarray            # (N+1,)
    paths: np.ndarray                # (M, N+1, n)
    brownian_increments: np.ndarray  # (M, N, d)
    seed: int
    initial_state: np.ndarray        # (n,) or (M, n)
    clamp_events: int = 0

    def __post_init__(self):
        object.__setattr__(self, "time_grid", _freeze(self.time_grid))
        object.__setattr__(self, "paths", _freeze(self.paths))
        object.__setattr__(self, "brownian_increments",
                           _freeze(self.brownian_increments))
        object.__setattr__(self, "initial_state", _freeze(self.initial_state))

    @property
    def n_paths(self) -> int:
        return self.paths.shape[0]

    @property
    def n_steps(self) -> int:
        return self.paths.shape[1] - 1

    @property
    def dim_state(self) -> int:
        return self.paths.shape[2]

    @property
    def dim_noise(self) -> int:
        return self.brownian_increments.shape[2]

    @property
    def dt(self) -> float:
        return float(self.time_grid[1] - self.time_grid[0])

    def brownian_diagnostics(self) -> dict:
        """Worst z-scores of increment mean 0 and covariance dt*I."""
        db = self.brownian_increments
        m, n, d = db.shape
        flat = db.reshape(m * n, d)
        k = flat.shape[0]
        mean_z = np.abs(flat.mean(axis=0)) / (np.sqrt(self.dt) / np.sqrt(k))
        cov = flat.T @ flat / k
        # variance of a squared-normal entry is 2*dt^2; covariance entries dt^2
        var_z = np.abs(np.diag(cov) - self.dt) / (self.dt * np.sqrt(2.0 / k))
        off = cov - np.diag(np.diag(cov))
        off_z = np.abs(off).max() / (self.dt / np.sqrt(k)) if d > 1 else 0.0
        return {"mean_z": float(mean_z.max()),
                "var_z": float(var_z.max()),
                "offdiag_z": float(off_z)}


def _default_step(sde, t, x, v, dt, db):
    b = np.asarray(sde.drift(t, x, v), float)
    sig = np.asarray(sde.diffusion(t, x, v), float)
    x_next = x + b * dt + np.einsum("mnd,md->mn", sig, db)
    return x_next, 0


def _euler_loop(sde, policy, t_grid, x0_paths, db, collect_controls=False):
    m_paths = x0_paths.shape[0]
    n_steps = db.shape[1]
    paths = np.empty((m_paths, n_steps + 1, sde.dim_state))
    paths[:, 0] = x0_paths
    controls = (np.empty((m_paths, n_steps, sde.control_dim))
                if collect_controls else None)
    dt = float(t_grid[1] - t_grid[0])
    clamps = 0
    x = x0_paths
    for k in range(n_steps):
        t_k = float(t_grid[k])
        v = policy.controls_at(t_k, x)
        if collect_controls:
            controls[:, k] = v
        if sde.stepper is not None:
            x, n_clamped = sde.stepper(t_k, x, v, dt, db[:, k])
            clamps += int(n_clamped)
        else:
            x, _ = _default_step(sde, t_k, x, v, dt, db[:, k])
        if not np.isfinite(x).all():
            raise DivergedPath(k)
        paths[:, k + 1] = x
    return paths, controls, clamps


def simulate_paths(sde: ControlledSDE, policy: ControlPolicy, t0: float,
                   x0, steps: int, n_paths: int, seed: int,
                   t_end: Optional[float] = None) -> PathBundle:
    """Euler-Maruyama ensemble on the uniform grid t0 = t_0 < ... < t_N.

    t_end defaults to the SDE horizon. Deterministic in (seed, inputs).
    """
    t1 = sde.horizon if t_end is None else float(t_end)
    if not (t0 < t1 <= sde.horizon + 1e-12):
        raise ContractError(f"need t0 < t_end <= horizon, got [{t0}, {t1}]")
    if steps < 1 or n_paths < 1:
        raise ContractError("steps and n_paths must be >= 1")
    x0 = np.asarray(x0, float)
    if x0.ndim <= 1:
        x0_paths = np.broadcast_to(np.atleast_1d(x0),
                                   (n_paths, sde.dim_state)).copy()
        initial = np.atleast_1d(x0)
    else:
        if x0.shape != (n_paths, sde.dim_state):
            raise ContractError("per-path x0 must have shape (n_paths, dim_state)")
        x0_paths = x0.copy()
        initial = x0
    t_grid = t0 + (t1 - t0) * np.arange(steps + 1) / steps
    dt = float(t_grid[1] - t_grid[0])
    normals = standard_normals(seed, n_paths, steps, sde.dim_noise)
    db = normals * np.sqrt(dt)
    paths, _, clamps = _euler_loop(sde, policy, t_grid, x0_paths, db)
    return PathBundle(time_grid=t_grid, paths=paths, brownian_increments=db,
                      seed=int(seed), initial_state=initial,
                      clamp_events=clamps)


# ---------------------------------------------------------------------------
# statistical estimates backing the moment / flow bounds


@dataclass(frozen=True)
class FlowConfig:
    t0: float = 0.0
    steps: int = 200
    n_paths: int = 2000
    seed: int = 20240901


def estimate_flow_lipschitz(sde: ControlledSDE, policy_pair, x0_pair,
                            config: FlowConfig = FlowConfig()) -> float:
    """sup_k E|X_k - X'_k|^2 / (|x0 - x0'|^2 + E int |v - v'|^2 dt).

    The two systems are coupled through shared Brownian increments.
    Raises DegenerateComparison when the denominator vanishes.
    """
    pol_a, pol_b = policy_pair
    x0_a = np.broadcast_to(np.atleast_1d(np.asarray(x0_pair[0], float)),
                           (config.n_paths, sde.dim_state)).copy()
    x0_b = np.broadcast_to(np.atleast_1d(np.asarray(x0_pair[1], float)),
                           (config.n_paths, sde.dim_state)).copy()
    t_grid = config.t0 + (sde.horizon - config.t0) * \
        np.arange(config.steps + 1) / config.steps
    dt = float(t_grid[1] - t_grid[0])
    normals = standard_normals(config.seed, config.n_paths, config.steps,
                               sde.dim_noise)
    db = normals * np.sqrt(dt)
    paths_a, ctl_a, _ = _euler_loop(sde, pol_a, t_grid, x0_a, db,
                                    collect_controls=True)
    paths_b, ctl_b, _ = _euler_loop(sde, pol_b, t_grid, x0_b, db,
                                    collect_controls=True)
    dx0 = float(np.sum((x0_a[0] - x0_b[0]) ** 2))
    dv = float(np.mean(np.sum((ctl_a - ctl_b) ** 2, axis=2).sum(axis=1) * dt))
    denom = dx0 + dv
    if denom < 1e-14:
        raise DegenerateComparison(
            "identical initial states and controls: flow quotient is 0/0")
    gap = np.sum((paths_a - paths_b) ** 2, axis=2)  # (M, N+1)
    return float(gap.mean(axis=0).max() / denom)


@dataclass(frozen=True)
class MomentReport:
    sup_moment: float
    half_sample_estimate: float
    bound_ok: bool


def moment_report(bundle: PathBundle, q: int, max_moment: int = 4) -> MomentReport:
    """Estimate E[ sup_s |X_s|^(2q) ] by pathwise maxima.

    Stability is checked by comparing the half-sample estimate with the
    full-sample one (doubling M); a factor-2 drift raises UnstableMoment.
    """
    if q < 1:
        raise ContractError("q must be >= 1")
    if 2 * q > max_moment:
        raise ContractError(f"2q = {2*q} exceeds configured max moment {max_moment}")
    sup_norm = np.linalg.norm(bundle.paths, axis=2).max(axis=1)  # (M,)
    powered = sup_norm ** (2 * q)
    est = float(powered.mean())
    half = float(powered[: max(1, bundle.n_paths // 2)].mean())
    if not np.isfinite(est):
        raise UnstableMoment("non-finite moment estimate")
    if half > 0 and (est / half >= 2.0 or est / half <= 0.5):
        raise UnstableMoment(
            f"moment estimate moved {est/half:.3g}x when doubling the sample")
    return MomentReport(sup_moment=est, half_sample_estimate=half, bound_ok=True)


@dataclass(frozen=True)
class SdeAuditReport:
    lipschitz_hat: float
    declared: float
    ok: bool
    worst_pair: tuple = field(default=None)


def audit_sde(sde: ControlledSDE, control_set: ControlSet,
              n_points: int = 4096, t_max: Optional[float] = None,
              slack: float = 1e-9) -> SdeAuditReport:
    """Sample-based check of the joint (x, v) Lipschitz quotient of (b, sigma).

    Universally quantified conditions can only be falsified: the audit
    reports the max observed quotient over a deterministic Sobol sample on
    the domain box and control set, against the declared bound.
    """
    n, m = sde.dim_state, sde.control_dim
    t_hi = sde.horizon if t_max is None else t_max
    unit = sobol_points(2 * n + 2 * m, n_points)
    x = scale_to_box(unit[:, :n], sde.domain_box)
    x2 = scale_to_box(unit[:, n:2 * n], sde.domain_box)
    if control_set.points is not None:
        p = control_set.points
        v = p[(unit[:, 2 * n] * len(p)).astype(int) % len(p)]
        v2 = p[(unit[:, 2 * n + m] * len(p)).astype(int) % len(p)]
    else:
        v = scale_to_box(unit[:, 2 * n:2 * n + m], control_set.bounds)
        v2 = scale_to_box(unit[:, 2 * n + m:], control_set.bounds)
    worst = 0.0
    worst_pair = None
    # coefficients take a scalar t with a batch of states, so the pair
    # sample is swept at a fixed fan of time slices
    for t_k in np.linspace(0.0, t_hi, 17):
        b_a = np.asarray(sde.drift(float(t_k), x, v), float)
        b_b = np.asarray(sde.drift(float(t_k), x2, v2), float)
        s_a = np.asarray(sde.diffusion(float(t_k), x, v), float)
        s_b = np.asarray(sde.diffusion(float(t_k), x2, v2), float)
        if not (np.isfinite(b_a).all() and np.isfinite(s_a).all()
                and np.isfinite(b_b).all() and np.isfinite(s_b).all()):
            raise EvaluationError("non-finite SDE coefficient on audit box")
        num = (np.linalg.norm(b_a - b_b, axis=1)
               + np.linalg.norm((s_a - s_b).reshape(len(x), -1), axis=1))
        den = (np.linalg.norm(x - x2, axis=1)
               + np.linalg.norm(v - v2, axis=1))
        mask = den > 1e-12
        if mask.any():
            quot = num[mask] / den[mask]
            j = int(np.argmax(quot))
            if quot[j] > worst:
                worst = float(quot[j])
                worst_pair = (float(t_k), x[mask][j].copy(), x2[mask][j].copy())
    ok = worst <= sde.lipschitz_bound * (1 + slack) + slack
    return SdeAuditReport(lipschitz_hat=worst, declared=sde.lipschitz_bound,
                          ok=bool(ok), worst_pair=worst_pair)


# ---------------------------------------------------------------------------
# binary bundle cache ("RCLB1": header + little-endian f64 arrays)

_HEADER = struct.Struct("<QQQQQQddB")  # M, N, n, d, seed, clamps, t0, dt, per-path flag


def save_bundle(bundle: PathBundle, path) -> None:
    per_path = 1 if bundle.initial_state.ndim == 2 else 0
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(_HEADER.pack(bundle.n_paths, bundle.n_steps,
                              bundle.dim_state, bundle.dim_noise,
                              bundle.seed & 0xFFFFFFFFFFFFFFFF,
                              bundle.clamp_events,
                              float(bundle.time_grid[0]), bundle.dt, per_path))
        fh.write(np.ascontiguousarray(bundle.time_grid, "<f8").tobytes())
        fh.write(np.ascontiguousarray(bundle.initial_state, "<f8").tobytes())
        fh.write(np.ascontiguousarray(bundle.paths, "<f8").tobytes())
        fh.write(np.ascontiguousarray(bundle.brownian_increments, "<f8").tobytes())


def load_bundle(path) -> PathBundle:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ContractError(f"not a bundle cache file (magic {magic!r})")
        m, n_steps, n, d, seed, clamps, _t0, _dt, per_path = _HEADER.unpack(
            fh.read(_HEADER.size))
        raw = fh.read()
    init_len = (m * n if per_path else n)
    expected = 8 * ((n_steps + 1) + init_len + m * (n_steps + 1) * n
                    + m * n_steps * d)
    if len(raw) != expected:
        raise ContractError("bundle cache truncated or corrupt")
    flat = np.frombuffer(raw, dtype="<f8")
    t_grid = flat[:n_steps + 1]
    off = n_steps + 1
    init = flat[off:off + init_len].reshape((m, n) if per_path else (n,))
    off += init_len
    paths = flat[off:off + m * (n_steps + 1) * n].reshape(m, n_steps + 1, n)
    off += m * (n_steps + 1) * n
    db = flat[off:].reshape(m, n_steps, d)
    return PathBundle(time_grid=t_grid, paths=paths, brownian_increments=db,
                      seed=int(seed), initial_state=init,
                      clamp_events=int(clamps))
