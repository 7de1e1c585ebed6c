import numpy as np
import pytest

from rclab.drivers import (AuditBox, DriverConstants, DriverSpec,
                           audit_conditions)
from rclab.sde import ControlledSDE, ControlSet, constant_policy


def make_driver(name, f, lam, mu, kappa, p, h=None, x_box=(-5.0, 5.0),
                y_box=(-5.0, 5.0), v_box=(0.0, 1.0), t_max=1.0,
                audit_budget=512, y_domain=None):
    """Audited DriverSpec from a vectorized f(t, x, y, z, v)."""
    spec = DriverSpec(
        name=name, f=f,
        constants=DriverConstants(lam=lam, mu=mu, kappa=kappa, p=p),
        audit_box=AuditBox(x_bounds=[x_box], y_bounds=y_box,
                           v_bounds=[v_box], t_max=t_max),
        h=h, **({"y_domain": y_domain} if y_domain else {}))
    spec, report = audit_conditions(spec, audit_budget)
    assert report.ok, f"fixture driver {name} failed audit: {report.violations}"
    return spec


def zero_f(t, x, y, z, v):
    return np.zeros(np.shape(np.asarray(y)))


@pytest.fixture(scope="session")
def gbm_sde():
    def drift(t, x, v):
        return 0.05 * x

    def diffusion(t, x, v):
        return (0.2 * x)[:, :, None]

    return ControlledSDE(dim_state=1, dim_noise=1, control_dim=1,
                         drift=drift, diffusion=diffusion, horizon=1.0,
                         lipschitz_bound=0.26, domain_box=[(0.2, 5.0)])


@pytest.fixture(scope="session")
def still_sde():
    def drift(t, x, v):
        return np.zeros_like(x)

    def diffusion(t, x, v):
        return np.zeros((x.shape[0], x.shape[1], 1))

    return ControlledSDE(dim_state=1, dim_noise=1, control_dim=1,
                         drift=drift, diffusion=diffusion, horizon=1.0,
                         lipschitz_bound=1e-9, domain_box=[(-5.0, 5.0)])


@pytest.fixture(scope="session")
def null_policy():
    return constant_policy(ControlSet.box([0.0], [0.0]), [0.0])


@pytest.fixture(scope="session")
def linear_driver():
    return make_driver("lin", lambda t, x, y, z, v: -0.5 * np.asarray(y),
                       lam=1.0, mu=-0.5, kappa=1.0, p=1.0,
                       h=lambda x: x[:, 0], x_box=(0.2, 5.0))


@pytest.fixture(scope="session")
def zero_driver():
    return make_driver("zero", zero_f, lam=1.0, mu=0.0, kappa=1.0, p=1.0,
                       h=lambda x: x[:, 0], x_box=(0.2, 5.0))
