"""The full control-problem tuple shared by the solvers and verifiers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .drivers import DriverSpec
from .errors import ContractError
from .sde import ControlledSDE, ControlSet


@dataclass(frozen=True)
class ControlProblem:
    """Coefficients, driver/terminal pair, admissible set and start point."""

    sde: ControlledSDE
    spec: DriverSpec
    control_set: ControlSet
    x0: np.ndarray
    t0: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x0",
                           np.atleast_1d(np.asarray(self.x0, float)))
        if self.x0.shape != (self.sde.dim_state,):
            raise ContractError("x0 must match the SDE state dimension")
        if self.spec.h is None:
            raise ContractError("problem driver needs a terminal map h")
        if not (0.0 <= self.t0 < self.sde.horizon):
            raise ContractError("t0 must lie in [0, horizon)")

    @property
    def horizon(self) -> float:
        return self.sde.horizon
