"""BSDE drivers: declaration, condition audits, mollification, truncation.

A driver is f(t, x, y, z, v) -> real, vectorized over a batch axis: x is
(K, n), y is (K,), z is (K, d) or None, v is (K, m). Drivers that ignore z
set z_free=True (required by the HJB route). The audited structural
constants are

    lam   : Lipschitz bound of h in x and of f in (x, z)
    mu    : one-sided monotonicity bound, (y-y')(f(y)-f(y')) <= mu |y-y'|^2
    kappa, p : polynomial growth, |f(..y..) - f(..0..)| <= kappa (1+|y|^p)

Audits sample a deterministic Sobol set on the declared audit box; they can
falsify the declared constants, not prove them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import (ContractError, DomainViolation, EvaluationError,
                     OutOfModel, UnsupportedRegime, ZNotSupported)
from .sde import scale_to_box, sobol_points


@dataclass(frozen=True)
class DriverConstants:
    lam: float
    mu: float
    kappa: float
    p: float

    def __post_init__(self):
        if self.lam < 0 or self.kappa <= 0 or self.p < 1:
            raise ContractError("need lam >= 0, kappa > 0, p >= 1")


@dataclass(frozen=True)
class AuditBox:
    """Region on which the driver's conditions are sampled."""

    x_bounds: np.ndarray          # (n, 2)
    y_bounds: np.ndarray          # (2,)
    v_bounds: np.ndarray          # (m, 2)
    z_bounds: Optional[np.ndarray] = None  # (d, 2); None for z-free drivers
    t_max: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "x_bounds",
                           np.atleast_2d(np.asarray(self.x_bounds, float)))
        object.__setattr__(self, "y_bounds",
                           np.asarray(self.y_bounds, float).reshape(2))
        object.__setattr__(self, "v_bounds",
                           np.atleast_2d(np.asarray(self.v_bounds, float)))
        if self.z_bounds is not None:
            object.__setattr__(self, "z_bounds",
                               np.atleast_2d(np.asarray(self.z_bounds, float)))


@dataclass(frozen=True)
class DriverSpec:
    """An evaluable aggregator with its declared constants and audit region.

    `h` is the terminal map (may be attached later by a problem builder).
    `y_domain` restricts where f may be evaluated in y (open interval
    semantics; e.g. Epstein-Zin case (i) needs y < 0); solvers keep their
    iterates inside it rather than extending f by continuity.
    """

    name: str
    f: Callable
    constants: DriverConstants
    audit_box: AuditBox
    z_free: bool = True
    h: Optional[Callable] = None
    y_domain: tuple = (-math.inf, math.inf)
    audited: bool = False

    def __call__(self, t, x, y, z, v):
        return self.f(t, x, y, z, v)


# ---------------------------------------------------------------------------
# condition audit


@dataclass(frozen=True)
class AuditViolation:
    condition: str
    observed: float
    declared: float
    point: dict


@dataclass(frozen=True)
class AuditReport:
    lam_hat: float
    mu_hat: float
    kappa_hat: float
    p_hat: float
    violations: tuple
    sample_budget: int

    @property
    def ok(self) -> bool:
        return len(self.violations) == 0


def _eval_checked(spec, t, x, y, z, v):
    vals = np.asarray(spec.f(t, x, y, z, v), float)
    if not np.isfinite(vals).all():
        j = int(np.argmin(np.isfinite(vals)))
        raise EvaluationError(
            "non-finite driver value",
            point={"t": t, "x": x[j].tolist(), "y": float(y[j]),
                   "v": v[j].tolist()})
    return vals


def audit_conditions(spec: DriverSpec, sample_budget: int = 4096,
                     slack: float = 1e-9) -> tuple[DriverSpec, AuditReport]:
    """Measure empirical condition constants and flag declared violations.

    Returns (spec with audited flag set iff clean, report). The empirical
    constants are max observed quotients over the Sobol sample; `p_hat` is
    a log-log slope fit of the growth of |f(y)-f(0)| for |y| >= 1 (falls
    back to the declared p when the box has no such y).
    """
    box = spec.audit_box
    n = box.x_bounds.shape[0]
    m = box.v_bounds.shape[0]
    d = 0 if box.z_bounds is None else box.z_bounds.shape[0]
    cols = 2 * n + 2 + 2 * d + m
    unit = sobol_points(cols, sample_budget)
    x1 = scale_to_box(unit[:, :n], box.x_bounds)
    x2 = scale_to_box(unit[:, n:2 * n], box.x_bounds)
    y1 = box.y_bounds[0] + unit[:, 2 * n] * (box.y_bounds[1] - box.y_bounds[0])
    y2 = box.y_bounds[0] + unit[:, 2 * n + 1] * (box.y_bounds[1] - box.y_bounds[0])
    off = 2 * n + 2
    if d:
        z1 = scale_to_box(unit[:, off:off + d], box.z_bounds)
        z2 = scale_to_box(unit[:, off + d:off + 2 * d], box.z_bounds)
        off += 2 * d
    else:
        z1 = z2 = None
    v = scale_to_box(unit[:, off:off + m], box.v_bounds)

    violations = []
    c = spec.constants
    lam_hat = 0.0

    # H4: terminal map Lipschitz in x
    if spec.h is not None:
        h1 = np.asarray(spec.h(x1), float)
        h2 = np.asarray(spec.h(x2), float)
        if not (np.isfinite(h1).all() and np.isfinite(h2).all()):
            raise EvaluationError("non-finite terminal value on audit box")
        den = np.linalg.norm(x1 - x2, axis=1)
        mask = den > 1e-12
        if mask.any():
            q = np.abs(h1 - h2)[mask] / den[mask]
            j = int(np.argmax(q))
            lam_hat = max(lam_hat, float(q[j]))
            if q[j] > c.lam * (1 + slack) + slack:
                violations.append(AuditViolation(
                    "H4-h", float(q[j]), c.lam,
                    {"x": x1[mask][j].tolist(), "x_prime": x2[mask][j].tolist()}))

    t_slices = np.linspace(0.0, box.t_max, 5)
    mu_hat = -math.inf
    kappa_hat = 0.0
    # H6 reference level: y = 0 when the domain allows it, else the
    # in-domain point closest to 0 (Epstein-Zin lives on a half-line)
    if spec.y_domain[0] < 0.0 < spec.y_domain[1]:
        y_ref = 0.0
    else:
        y_ref = float(box.y_bounds[np.argmin(np.abs(box.y_bounds))])
    y0 = np.full_like(y1, y_ref)
    growth_pts = []
    for t_k in t_slices:
        t_k = float(t_k)
        # H4: joint (x, z) Lipschitz at fixed y, v
        fa = _eval_checked(spec, t_k, x1, y1, z1, v)
        fb = _eval_checked(spec, t_k, x2, y1, z2, v)
        den = np.linalg.norm(x1 - x2, axis=1)
        if d:
            den = den + np.linalg.norm(z1 - z2, axis=1)
        mask = den > 1e-12
        if mask.any():
            q = np.abs(fa - fb)[mask] / den[mask]
            j = int(np.argmax(q))
            lam_hat = max(lam_hat, float(q[j]))
            if q[j] > c.lam * (1 + slack) + slack:
                violations.append(AuditViolation(
                    "H4-f", float(q[j]), c.lam,
                    {"t": t_k, "x": x1[mask][j].tolist(),
                     "x_prime": x2[mask][j].tolist()}))
        # H5: one-sided monotonicity in y at fixed (x, z, v)
        ga = fa
        gb = _eval_checked(spec, t_k, x1, y2, z1, v)
        dy = y1 - y2
        mask = np.abs(dy) > 1e-9
        if mask.any():
            q = (dy * (ga - gb))[mask] / (dy[mask] ** 2)
            j = int(np.argmax(q))
            mu_hat = max(mu_hat, float(q[j]))
            if q[j] > c.mu + slack * (1 + abs(c.mu)):
                violations.append(AuditViolation(
                    "H5", float(q[j]), c.mu,
                    {"t": t_k, "x": x1[mask][j].tolist(),
                     "y": float(y1[mask][j]), "y_prime": float(y2[mask][j])}))
        # H6: polynomial growth against the reference level
        g0 = _eval_checked(spec, t_k, x1, y0, z1, v)
        grow = np.abs(ga - g0)
        denom = 1.0 + np.abs(y1) ** c.p
        q = grow / denom
        j = int(np.argmax(q))
        kappa_hat = max(kappa_hat, float(q[j]))
        if q[j] > c.kappa * (1 + slack) + slack:
            violations.append(AuditViolation(
                "H6", float(q[j]), c.kappa,
                {"t": t_k, "x": x1[j].tolist(), "y": float(y1[j])}))
        big = np.abs(y1) >= 1.0
        if big.any():
            growth_pts.append((np.abs(y1[big]), grow[big]))

    if growth_pts:
        ys = np.concatenate([g[0] for g in growth_pts])
        gs = np.concatenate([g[1] for g in growth_pts])
        pos = gs > 1e-12
        if pos.sum() >= 8:
            slope = np.polyfit(np.log(ys[pos]), np.log(gs[pos]), 1)[0]
            p_hat = max(1.0, float(slope))
        else:
            p_hat = c.p
    else:
        p_hat = c.p

    report = AuditReport(lam_hat=lam_hat,
                         mu_hat=(mu_hat if math.isfinite(mu_hat) else c.mu),
                         kappa_hat=kappa_hat, p_hat=p_hat,
                         violations=tuple(violations),
                         sample_budget=sample_budget)
    return replace(spec, audited=report.ok), report


# ---------------------------------------------------------------------------
# mollification (smooth bump kernel, fixed Gauss-Legendre quadrature)


@dataclass(frozen=True)
class MollifierSpec:
    n: int                     # support radius 1/n
    quadrature_nodes: int = 64

    def __post_init__(self):
        if self.n < 1 or self.quadrature_nodes < 2:
            raise ContractError("mollifier needs n >= 1 and >= 2 nodes")

    def kernel_nodes(self):
        """Quadrature nodes a_j in (-1/n, 1/n) and weights of rho_n.

        rho_n(a) = c_n exp(-1/(1-(n a)^2)) normalized with the same rule,
        so the discrete mass is exactly 1 and symmetry is exact.
        """
        gl_x, gl_w = np.polynomial.legendre.leggauss(self.quadrature_nodes)
        a = gl_x / self.n
        w = gl_w / self.n
        rho = np.exp(-1.0 / (1.0 - (self.n * a) ** 2))
        weights = w * rho
        weights = weights / weights.sum()
        return a, weights


def mollify(spec: DriverSpec, moll: MollifierSpec) -> DriverSpec:
    """Convolve the driver in y with the bump kernel: f_n = rho_n * f(., y).

    Only z-free drivers are supported (smoothing acts on the first unknown
    variable). The one-sided monotonicity constant carries over; the new
    spec must be re-audited before solvers will accept it.
    """
    if not spec.z_free:
        raise ZNotSupported("mollification is defined for z-free drivers only")
    nodes, weights = moll.kernel_nodes()

    parent = spec.f

    def f_moll(t, x, y, z, v):
        y = np.asarray(y, float)
        acc = weights[0] * np.asarray(parent(t, x, y - nodes[0], z, v), float)
        for a_j, w_j in zip(nodes[1:], weights[1:]):
            acc = acc + w_j * np.asarray(parent(t, x, y - a_j, z, v), float)
        return acc

    lo, hi = spec.y_domain
    shrunk = (lo + 1.0 / moll.n if lo > -math.inf else lo,
              hi - 1.0 / moll.n if hi < math.inf else hi)
    return replace(spec, name=f"mollified({spec.name}, n={moll.n})",
                   f=f_moll, audited=False, y_domain=shrunk)


def truncate(spec: DriverSpec, m_bound: float) -> DriverSpec:
    """Clip the driver's zero level to [-m, m]:

        f_m(., y, .) = f(., y, .) - f(., 0, .) + Pi_m(f(., 0, .))

    with Pi_m(x) = min(m,|x|)/|x| * x and Pi_m(0) = 0. Where the clip is
    inactive the parent's values pass through bit-exactly, and differences
    in y are preserved exactly (the monotonicity constant is unchanged).
    """
    if m_bound <= 0:
        raise ContractError("truncation level must be positive")
    parent = spec.f

    def f_trunc(t, x, y, z, v):
        y = np.asarray(y, float)
        vals = np.asarray(parent(t, x, y, z, v), float)
        zero = np.asarray(parent(t, x, np.zeros_like(y), z, v), float)
        clipped = np.clip(zero, -m_bound, m_bound)
        return np.where(np.abs(zero) <= m_bound, vals, vals - zero + clipped)

    return replace(spec, name=f"truncated({spec.name}, m={m_bound:g})",
                   f=f_trunc, audited=False)


def uniform_gap(spec_a: DriverSpec, spec_b: DriverSpec, compact_box: AuditBox,
                grid_density: int = 17) -> float:
    """max |f_a - f_b| over a deterministic lattice on the compact box.

    The lattice is the tensor grid of `grid_density` points per axis of
    (t, x, y, v); both drivers must be evaluable there.
    """
    g = grid_density
    t_axis = np.linspace(0.0, compact_box.t_max, min(g, 9))
    x_axes = [np.linspace(lo, hi, g) for lo, hi in compact_box.x_bounds]
    y_axis = np.linspace(compact_box.y_bounds[0], compact_box.y_bounds[1], g)
    v_axes = [np.linspace(lo, hi, min(g, 9)) for lo, hi in compact_box.v_bounds]
    mesh = np.meshgrid(*x_axes, y_axis, *v_axes, indexing="ij")
    n = len(x_axes)
    flat = [a.reshape(-1) for a in mesh]
    x = np.stack(flat[:n], axis=1)
    y = flat[n]
    v = np.stack(flat[n + 1:], axis=1)
    worst = 0.0
    for t_k in t_axis:
        fa = np.asarray(spec_a.f(float(t_k), x, y, None, v), float)
        fb = np.asarray(spec_b.f(float(t_k), x, y, None, v), float)
        if not (np.isfinite(fa).all() and np.isfinite(fb).all()):
            raise EvaluationError("non-finite driver value on gap lattice")
        worst = max(worst, float(np.abs(fa - fb).max()))
    return worst


# ---------------------------------------------------------------------------
# Epstein-Zin recursive utility


@dataclass(frozen=True)
class EZParams:
    """Time preference delta, risk aversion gamma, intertemporal elasticity psi."""

    delta: float
    gamma: float
    psi: float

    def __post_init__(self):
        if self.delta <= 0:
            raise OutOfModel("rate of time preference must be positive")
        if self.gamma <= 0 or self.gamma == 1.0:
            raise OutOfModel("risk aversion must satisfy 0 < gamma != 1")
        if self.psi <= 0 or self.psi == 1.0:
            raise OutOfModel("elasticity must satisfy 0 < psi != 1")


@dataclass(frozen=True)
class RegimeInfo:
    regime: str               # "case_i" | "case_ii" | "unsupported"
    lipschitz_in_c: bool
    continuous_in_c: bool


def classify_regime(params: EZParams, a1: float = None) -> RegimeInfo:
    """Parameter regime of the aggregator's monotonicity/growth structure.

    case_i: gamma > 1 and psi > 1 (utility lives on y < 0);
    case_ii: gamma < 1 and psi < 1 (utility lives on y > 0).
    With a consumption floor a1 = 0 the aggregator stays continuous in c
    only in case (i); it is Lipschitz in c only when a1 > 0.
    """
    if params.gamma > 1 and params.psi > 1:
        regime = "case_i"
    elif params.gamma < 1 and params.psi < 1:
        regime = "case_ii"
    else:
        regime = "unsupported"
    if a1 is None or a1 > 0:
        lip = regime != "unsupported"
        cont = lip
    else:
        lip = False
        cont = regime == "case_i"
    return RegimeInfo(regime=regime, lipschitz_in_c=lip, continuous_in_c=cont)


def _ez_value(params: EZParams, c: np.ndarray, u: np.ndarray) -> np.ndarray:
    """delta/(1-1/psi) * (1-gamma) u * [ (c / ((1-gamma)u)^{1/(1-gamma)})^{1-1/psi} - 1 ]

    Fractional powers go through exp/log on the verified-positive base
    (1-gamma) u; c = 0 is handled by the sign of the outer exponent.
    """
    w = (1.0 - params.gamma) * u
    if np.any(w <= 0.0) or not np.isfinite(w).all():
        j = int(np.argmin(w))
        raise DomainViolation(
            f"(1-gamma)*u must stay positive; got {w.flat[j]:.6g} at u={u.flat[j]:.6g}")
    scale = params.delta / (1.0 - 1.0 / params.psi)
    expo = 1.0 - 1.0 / params.psi
    log_base = np.log(w) / (1.0 - params.gamma)   # log of certainty-equivalent scale
    with np.errstate(divide="ignore"):
        log_c = np.where(c > 0.0, np.log(np.maximum(c, 1e-300)), -np.inf)
    ratio_pow = np.exp(expo * (log_c - log_base))  # 0 when c == 0 and expo > 0
    ratio_pow = np.where(c > 0.0, ratio_pow, 0.0 if expo > 0 else np.inf)
    if not np.isfinite(ratio_pow).all():
        raise DomainViolation("consumption power diverged (c = 0 with psi < 1)")
    return scale * w * (ratio_pow - 1.0)


def epstein_zin_driver(params: EZParams, a1: float, a2: float,
                       x_bounds=((0.05, 4.0),), y_bounds=None,
                       pi_bounds=(-1.0, 1.0), t_max: float = 1.0) -> DriverSpec:
    """Epstein-Zin aggregator as a DriverSpec; control is v = (pi, c).

    Only regimes (i) (gamma, psi > 1) and (ii) (gamma, psi < 1) are
    supported; with a1 = 0 only case (i). The driver evaluates only on the
    sign-correct utility half-line and raises DomainViolation elsewhere.
    The declared constants hold on the shipped audit box (and are
    re-checked by audit_conditions), not globally: the aggregator is the
    canonical non-Lipschitz example.
    """
    if not (0 <= a1 < a2):
        raise ContractError("consumption bounds need 0 <= a1 < a2")
    info = classify_regime(params, a1=a1)
    if info.regime == "unsupported":
        raise UnsupportedRegime(
            f"(gamma, psi) = ({params.gamma}, {params.psi}) is outside "
            "cases (i) and (ii)")
    if a1 == 0.0 and info.regime != "case_i":
        raise UnsupportedRegime(
            "a zero consumption floor is admissible only in case (i)")
    if y_bounds is None:
        y_bounds = (-5.0, -0.05) if info.regime == "case_i" else (0.05, 5.0)
    y_bounds = (float(y_bounds[0]), float(y_bounds[1]))
    y_domain = ((-math.inf, 0.0) if info.regime == "case_i"
                else (0.0, math.inf))
    if not (y_domain[0] < y_bounds[0] < y_bounds[1] < y_domain[1]):
        raise DomainViolation(
            f"audit y-range {y_bounds} must respect the sign constraint "
            f"(1-gamma) u > 0 of {info.regime}")

    def f(t, x, y, z, v):
        v = np.atleast_2d(np.asarray(v, float))
        c = v[:, 1] if v.shape[1] > 1 else v[:, 0]
        y = np.asarray(y, float)
        c, y = np.broadcast_arrays(c, y)
        return _ez_value(params, c, y)

    # empirical constants on the audit box, with headroom; audit re-measures
    box = AuditBox(x_bounds=np.atleast_2d(np.asarray(x_bounds, float)),
                   y_bounds=np.asarray(y_bounds),
                   v_bounds=np.array([list(pi_bounds), [a1, a2]], float),
                   t_max=t_max)
    probe_y = np.linspace(y_bounds[0], y_bounds[1], 4097)
    probe_c = np.linspace(max(a1, 1e-12), a2, 129)
    vals = np.stack([_ez_value(params, np.full_like(probe_y, cc), probe_y)
                     for cc in probe_c])
    dfdy = np.diff(vals, axis=1) / np.diff(probe_y)
    mu = float(dfdy.max())
    p = max(1.0, abs(1.0 - params.gamma) + 1.0)
    kappa = float(2.0 * np.abs(vals).max() + 1.0)
    # headroom covers the probe grid's secant-vs-slope discretization error
    constants = DriverConstants(lam=0.0, mu=mu + 1e-4 * (1 + abs(mu)),
                                kappa=kappa, p=p)
    return DriverSpec(name="epstein_zin", f=f, constants=constants,
                      audit_box=box, z_free=True, h=None,
                      y_domain=y_domain, audited=False)


# ---------------------------------------------------------------------------
# named driver registry (scenario configs refer to these)


def _linear_driver(slope: float = -1.0, intercept: float = 0.0,
                   y_span: float = 5.0) -> DriverSpec:
    def f(t, x, y, z, v):
        y = np.asarray(y, float)
        return slope * y + intercept

    box = AuditBox(x_bounds=[(-5.0, 5.0)], y_bounds=(-y_span, y_span),
                   v_bounds=[(0.0, 1.0)])
    return DriverSpec(name="linear", f=f,
                      constants=DriverConstants(lam=0.0, mu=slope,
                                                kappa=max(abs(slope), 1.0),
                                                p=1.0),
                      audit_box=box, z_free=True)


def _cubic_monotone_driver(scale: float = 1.0, y_span: float = 2.0) -> DriverSpec:
    def f(t, x, y, z, v):
        y = np.asarray(y, float)
        return -scale * y ** 3

    box = AuditBox(x_bounds=[(-5.0, 5.0)], y_bounds=(-y_span, y_span),
                   v_bounds=[(0.0, 1.0)])
    return DriverSpec(name="cubic_monotone", f=f,
                      constants=DriverConstants(lam=0.0, mu=0.0,
                                                kappa=scale, p=3.0),
                      audit_box=box, z_free=True)


def _abs_driver(y_span: float = 2.0) -> DriverSpec:
    def f(t, x, y, z, v):
        y = np.asarray(y, float)
        return np.abs(y)

    box = AuditBox(x_bounds=[(-5.0, 5.0)], y_bounds=(-y_span, y_span),
                   v_bounds=[(0.0, 1.0)])
    return DriverSpec(name="abs", f=f,
                      constants=DriverConstants(lam=0.0, mu=1.0,
                                                kappa=1.0, p=1.0),
                      audit_box=box, z_free=True)


def _quadratic_driver(y_span: float = 2.0) -> DriverSpec:
    """f(y) = y^2: monotone only one-sidedly on the box (mu = 2*y_span)."""
    def f(t, x, y, z, v):
        y = np.asarray(y, float)
        return y ** 2

    box = AuditBox(x_bounds=[(-5.0, 5.0)], y_bounds=(-y_span, y_span),
                   v_bounds=[(0.0, 1.0)])
    return DriverSpec(name="quadratic", f=f,
                      constants=DriverConstants(lam=0.0, mu=2.0 * y_span,
                                                kappa=max(y_span, 1.0), p=2.0),
                      audit_box=box, z_free=True)


DRIVER_REGISTRY = {
    "linear": _linear_driver,
    "cubic_monotone": _cubic_monotone_driver,
    "abs": _abs_driver,
    "quadratic": _quadratic_driver,
    "epstein_zin": None,  # built via epstein_zin_driver (needs EZParams)
}


def named_driver(name: str, **params) -> DriverSpec:
    if name == "epstein_zin":
        ez = EZParams(delta=params.pop("delta"), gamma=params.pop("gamma"),
                      psi=params.pop("psi"))
        return epstein_zin_driver(ez, params.pop("a1"), params.pop("a2"),
                                  **params)
    try:
        factory = DRIVER_REGISTRY[name]
    except KeyError:
        raise ContractError(f"unknown driver {name!r}; "
                            f"known: {sorted(DRIVER_REGISTRY)}") from None
    return factory(**params)
