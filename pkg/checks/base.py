"""
Base classes for the GPRG self-check framework
"""

import time
from abc import ABC, abstractmethod
from functools import cached_property
from typing import Any, Dict, Optional

import numpy as np
from pydantic import BaseModel

from gp_core.fields import ComplexField
from gp_core.grid import PolarGrid, build_grid
from gp_core.model import ModelInstance, Nonlinearity, build_model
from gp_core.riemann import initial_guess


class CheckResult(BaseModel):
    """Outcome of one self-check"""
    name: str
    group: str
    success: bool
    data: Optional[Dict[str, Any]] = None
    error: Optional[str] = None
    execution_time: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return self.model_dump()


class CheckContext:
    """Small shared instances the checks run against.

    `fault` names an injected defect; "rotation-sign" flips the rotation
    block inside the gradient only.
    """

    def __init__(self, R: float = 8.0, Nr: int = 32, Ntheta: int = 64, eta: float = 100.0,
                 omega: float = 0.8, seed: int = 0, directions: int = 20, fault: Optional[str] = None):
        if fault not in (None, "", "rotation-sign"):
            raise ValueError(f"Unknown check fault: {fault}")
        self.R = R
        self.Nr = Nr
        self.Ntheta = Ntheta
        self.eta = eta
        self.omega = omega
        self.seed = seed
        self.directions = directions
        self.fault = fault or None

    @cached_property
    def grid(self) -> PolarGrid:
        return build_grid(self.R, self.Nr, self.Ntheta)

    @cached_property
    def model(self) -> ModelInstance:
        sign = -1.0 if self.fault == "rotation-sign" else 1.0
        return build_model(self.grid, "harmonic", omega=self.omega,
                           nonlinearity=Nonlinearity(kind="cubic", eta=self.eta),
                           grad_rotation_sign=sign)

    @cached_property
    def state(self) -> ComplexField:
        return initial_guess(self.model, "vortex-random", seed=self.seed)

    def rng(self, offset: int = 0) -> np.random.Generator:
        return np.random.default_rng(self.seed + offset)


class BaseCheck(ABC):
    """Abstract base class for all self-checks"""

    def __init__(self, name: str, group: str, description: str):
        self.name = name
        self.group = group
        self.description = description
        self.enabled = True

    @abstractmethod
    def run(self, ctx: CheckContext) -> Dict[str, Any]:
        """Return measured values; raise AssertionError when the check fails"""
        pass

    def execute(self, ctx: CheckContext) -> CheckResult:
        start_time = time.time()
        try:
            data = self.run(ctx)
            return CheckResult(name=self.name, group=self.group, success=True, data=data,
                               execution_time=time.time() - start_time)
        except AssertionError as e:
            return CheckResult(name=self.name, group=self.group, success=False, error=str(e),
                               execution_time=time.time() - start_time)
        except Exception as e:
            return CheckResult(name=self.name, group=self.group, success=False,
                               error=f"{type(e).__name__}: {e}",
                               execution_time=time.time() - start_time)
