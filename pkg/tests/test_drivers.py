import math
from dataclasses import replace

import numpy as np
import pytest

from rclab.drivers import (AuditBox, DriverConstants, DriverSpec, EZParams,
                           MollifierSpec, audit_conditions, classify_regime,
                           epstein_zin_driver, mollify, named_driver,
                           truncate, uniform_gap)
from rclab.errors import (ContractError, DomainViolation, OutOfModel,
                          UnsupportedRegime, ZNotSupported)

BOX = AuditBox(x_bounds=[(-1.0, 1.0)], y_bounds=(-2.0, 2.0),
               v_bounds=[(0.0, 1.0)])


def spec_of(f, lam=0.0, mu=0.0, kappa=1.0, p=1.0, box=BOX, **kw):
    return DriverSpec(name="test", f=f,
                      constants=DriverConstants(lam, mu, kappa, p),
                      audit_box=box, **kw)


# -- condition audit ----------------------------------------------------------

def test_audit_linear_monotone_driver():
    spec, rep = audit_conditions(named_driver("linear", slope=-1.0), 2048)
    assert rep.ok and spec.audited
    assert rep.mu_hat <= -1.0 + 1e-9


def test_audit_catches_unbounded_monotonicity():
    spec = spec_of(lambda t, x, y, z, v: np.asarray(y) ** 2, kappa=10.0, p=2.0)
    audited, rep = audit_conditions(spec, 2048)
    assert not rep.ok and not audited.audited
    conds = {v.condition for v in rep.violations}
    assert "H5" in conds
    v = next(v for v in rep.violations if v.condition == "H5")
    assert v.observed > 0.5  # quotient (y + y') found well above mu = 0
    assert "y" in v.point


def test_audit_epstein_zin_box():
    spec = epstein_zin_driver(EZParams(0.1, 2.0, 2.0), 0.01, 1.0,
                              y_bounds=(-5.0, -0.1))
    audited, rep = audit_conditions(spec, 2048)
    assert rep.ok
    assert np.isfinite(rep.mu_hat)
    assert rep.p_hat >= 1.0
    assert rep.kappa_hat <= spec.constants.kappa


def test_audit_reports_empirical_x_lipschitz():
    spec = spec_of(lambda t, x, y, z, v: 2.0 * x[:, 0], lam=2.0)
    _, rep = audit_conditions(spec, 1024)
    assert rep.ok
    assert 1.5 < rep.lam_hat <= 2.0 + 1e-9


# -- mollification ------------------------------------------------------------

def test_kernel_mass_and_symmetry():
    for n in (1, 4, 16):
        nodes, weights = MollifierSpec(n).kernel_nodes()
        assert abs(weights.sum() - 1.0) < 1e-10
        assert np.array_equal(nodes, -nodes[::-1])
        assert np.array_equal(weights, weights[::-1])
        assert np.all(np.abs(nodes) <= 1.0 / n)


def test_mollify_identity_on_constants():
    spec = spec_of(lambda t, x, y, z, v: np.full(np.shape(np.asarray(y)), 3.25))
    out = mollify(spec, MollifierSpec(8)).f(0.0, None, np.array([0.3]), None, None)
    assert abs(out[0] - 3.25) < 1e-12


def test_mollify_exact_on_linear_by_symmetry():
    spec = spec_of(lambda t, x, y, z, v: 2.0 * np.asarray(y))
    out = mollify(spec, MollifierSpec(8)).f(0.0, None, np.array([0.7]), None, None)
    assert abs(out[0] - 1.4) < 1e-8


def test_mollify_abs_at_zero_positive_small():
    ab = named_driver("abs")
    for n in (4, 16, 64):
        v0 = mollify(ab, MollifierSpec(n)).f(0.0, None, np.array([0.0]),
                                             None, None)[0]
        assert 0.0 < v0 <= 1.0 / n


def test_mollify_rejects_z_dependent_driver():
    spec = spec_of(lambda t, x, y, z, v: np.asarray(z)[:, 0], z_free=False)
    with pytest.raises(ZNotSupported):
        mollify(spec, MollifierSpec(4))


def test_mollify_preserves_monotonicity_constant():
    ab = named_driver("abs")
    _, rep_base = audit_conditions(ab, 2048)
    mol, rep_mol = audit_conditions(mollify(ab, MollifierSpec(8)), 2048)
    assert rep_mol.ok
    assert rep_mol.mu_hat <= rep_base.mu_hat + 1e-8


def test_mollified_driver_is_lipschitz_in_y():
    # bounded zero level => finite y-slope for each fixed n
    ab = named_driver("abs")
    for n in (4, 16):
        mol = mollify(ab, MollifierSpec(n))
        ys = np.linspace(-1.5, 1.5, 1201)
        vals = mol.f(0.0, None, ys, None, None)
        slopes = np.abs(np.diff(vals) / np.diff(ys))
        assert np.isfinite(slopes).all()
        assert slopes.max() <= 1.0 + 1e-9  # |.|' bounded by 1, smoothing keeps it


# -- truncation -----------------------------------------------------------------

def test_truncate_clips_zero_level():
    spec = spec_of(lambda t, x, y, z, v: np.asarray(y) - 5.0, mu=1.0 + 1e-9,
                   kappa=1.0)
    out = truncate(spec, 2.0).f(0.0, None, np.array([0.0]), None, None)
    assert out[0] == -2.0


def test_truncate_pi_at_zero_is_zero():
    spec = spec_of(lambda t, x, y, z, v: np.asarray(y), mu=1.0 + 1e-9)
    out = truncate(spec, 2.0).f(0.0, None, np.array([0.0]), None, None)
    assert out[0] == 0.0


def test_truncate_inert_is_bit_exact():
    spec = spec_of(lambda t, x, y, z, v: -np.asarray(y) ** 3 - 0.37,
                   kappa=1.0, p=3.0)
    tr = truncate(spec, 10.0)
    ys = np.linspace(-1.9, 1.9, 257)
    assert np.array_equal(tr.f(0.0, None, ys, None, None),
                          spec.f(0.0, None, ys, None, None))


def test_truncate_preserves_y_differences_exactly():
    spec = spec_of(lambda t, x, y, z, v: np.asarray(y) ** 3 - 50.0,
                   mu=12.0 + 1e-9, kappa=10.0, p=3.0)
    tr = truncate(spec, 1.0)  # clip active everywhere (zero level -50)
    ys = np.linspace(-2.0, 2.0, 101)
    base = spec.f(0.0, None, ys, None, None)
    cut = tr.f(0.0, None, ys, None, None)
    assert np.array_equal(np.diff(base), np.diff(cut))
    assert np.abs(cut[np.argmin(np.abs(ys))]) <= 1.0


# -- uniform gap ------------------------------------------------------------------

def test_gap_zero_against_itself():
    ab = named_driver("abs")
    assert uniform_gap(ab, ab, BOX) == 0.0


def test_gap_of_mollification_bounded_and_decreasing():
    ab = named_driver("abs")
    box = AuditBox(x_bounds=[(-1, 1)], y_bounds=(-1, 1), v_bounds=[(0, 1)])
    gaps = [uniform_gap(ab, mollify(ab, MollifierSpec(n)), box, 33)
            for n in (4, 16, 64)]
    assert all(g <= 1.0 / n + 1e-8 for g, n in zip(gaps, (4, 16, 64)))
    assert gaps[0] > gaps[1] > gaps[2]


def test_gap_zero_for_inactive_truncation():
    ab = named_driver("abs")  # zero level is 0, any m > 0 is inactive
    assert uniform_gap(ab, truncate(ab, 1.0), BOX) == 0.0


# -- Epstein-Zin -------------------------------------------------------------------

def test_ez_normalized_consumption_values():
    d = epstein_zin_driver(EZParams(0.1, 2.0, 2.0), 0.01, 1.0)
    v1 = np.array([[0.0, 1.0]])
    v4 = np.array([[0.0, 4.0]])
    u = np.array([-1.0])
    assert d.f(0.0, None, u, None, v1)[0] == pytest.approx(0.0, abs=1e-14)
    assert d.f(0.0, None, u, None, v4)[0] == pytest.approx(0.2, abs=1e-12)


def test_ez_rejects_mixed_regime():
    with pytest.raises(UnsupportedRegime):
        epstein_zin_driver(EZParams(0.1, 2.0, 0.5), 0.01, 1.0)


def test_ez_rejects_wrong_sign_utility():
    d = epstein_zin_driver(EZParams(0.1, 2.0, 2.0), 0.01, 1.0)
    with pytest.raises(DomainViolation):
        d.f(0.0, None, np.array([0.5]), None, np.array([[0.0, 1.0]]))


def test_ez_case_ii_positive_domain():
    d = epstein_zin_driver(EZParams(0.05, 0.5, 0.5), 0.1, 1.0)
    out = d.f(0.0, None, np.array([1.0]), None, np.array([[0.0, 0.5]]))
    assert np.isfinite(out).all()


def test_regime_classification():
    assert classify_regime(EZParams(0.1, 2.0, 2.0)).regime == "case_i"
    assert classify_regime(EZParams(0.1, 0.5, 0.5)).regime == "case_ii"
    assert classify_regime(EZParams(0.1, 2.0, 0.5)).regime == "unsupported"
    with pytest.raises(OutOfModel):
        EZParams(0.1, 1.0, 2.0)
    with pytest.raises(OutOfModel):
        EZParams(0.1, 2.0, 1.0)


def test_regime_consumption_continuity_flags():
    info = classify_regime(EZParams(0.1, 2.0, 2.0), a1=0.0)
    assert not info.lipschitz_in_c and info.continuous_in_c
    info2 = classify_regime(EZParams(0.1, 0.5, 0.5), a1=0.0)
    assert not info2.continuous_in_c
    info3 = classify_regime(EZParams(0.1, 0.5, 0.5), a1=0.1)
    assert info3.lipschitz_in_c


def test_ez_zero_floor_allowed_only_case_i():
    d = epstein_zin_driver(EZParams(0.1, 2.0, 2.0), 0.0, 1.0)
    assert d.z_free
    with pytest.raises(UnsupportedRegime):
        epstein_zin_driver(EZParams(0.1, 0.5, 0.5), 0.0, 1.0)


def test_named_driver_registry_rejects_unknown():
    with pytest.raises(ContractError):
        named_driver("no_such_driver")
