#!/usr/bin/env python3
"""
Discrete rotating Gross-Pitaevskii energy and its derivatives.

All gradients and Hessian actions are returned in weighted (dual)
coordinates; divide by the quadrature weights to get nodal values.
"""

import logging
from typing import Any, Dict, Literal, Optional, Union

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, Field

from gp_core.fields import ComplexField
from gp_core.grid import (
    PolarGrid,
    assemble_dtheta,
    assemble_kinetic,
    assemble_mass,
    assemble_rotation,
    sample_potential,
)
from gp_core.potentials import PotentialInterface, create_potential

logger = logging.getLogger(__name__)

LOG_CLAMP = 1e-300

FieldLike = Union[ComplexField, np.ndarray]


class Nonlinearity(BaseModel):
    """Density nonlinearity f with antiderivative F and derivative f'"""
    kind: Literal["cubic", "logarithmic", "lhy", "none"] = "cubic"
    eta: float = Field(default=0.0, ge=0.0)
    eta_lhy: float = Field(default=0.0, ge=0.0)

    def f(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if self.kind == "cubic":
            return self.eta * s
        if self.kind == "logarithmic":
            return self.eta * s * np.log(np.maximum(s, LOG_CLAMP))
        if self.kind == "lhy":
            return self.eta * s + self.eta_lhy * s ** 1.5
        return np.zeros_like(s)

    def F(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if self.kind == "cubic":
            return 0.5 * self.eta * s ** 2
        if self.kind == "logarithmic":
            return self.eta * (0.5 * s ** 2 * np.log(np.maximum(s, LOG_CLAMP)) - 0.25 * s ** 2)
        if self.kind == "lhy":
            return 0.5 * self.eta * s ** 2 + 0.4 * self.eta_lhy * s ** 2.5
        return np.zeros_like(s)

    def f_prime(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if self.kind == "cubic":
            return np.full_like(s, self.eta)
        if self.kind == "logarithmic":
            return self.eta * (np.log(np.maximum(s, LOG_CLAMP)) + 1.0)
        if self.kind == "lhy":
            return self.eta + 1.5 * self.eta_lhy * np.sqrt(s)
        return np.zeros_like(s)

    @property
    def is_linear(self) -> bool:
        return self.kind == "none" or (self.eta == 0.0 and self.eta_lhy == 0.0)


class ModelInstance:
    """Grid, potential samples, rotation speed, nonlinearity and the assembled operators"""

    def __init__(self, grid: PolarGrid, V: np.ndarray, omega: float, nonlinearity: Nonlinearity,
                 potential: PotentialInterface, dominance_ok: bool = True,
                 grad_rotation_sign: float = 1.0):
        if omega < 0:
            raise ValueError(f"omega must be nonnegative, got {omega}")
        self.grid = grid
        self.V = V
        self.omega = float(omega)
        self.nonlinearity = nonlinearity
        self.potential = potential
        self.dominance_ok = dominance_ok
        # test hook: -1 corrupts the rotation term of the gradient only
        self.grad_rotation_sign = float(grad_rotation_sign)

        self.kinetic = assemble_kinetic(grid)
        self.mass = assemble_mass(grid)
        self.dtheta = assemble_dtheta(grid)
        self.rotation = assemble_rotation(grid, self.dtheta)

        self.weights = grid.weights2
        self.weighted_V = np.concatenate([grid.node_weights * V, grid.node_weights * V])
        self.linear_part = sp.csr_matrix(
            self.kinetic.matrix + sp.diags(self.weighted_V) + self.omega * self.rotation.matrix
        )
        if self.grad_rotation_sign == 1.0:
            self._grad_linear = self.linear_part
        else:
            self._grad_linear = sp.csr_matrix(
                self.kinetic.matrix + sp.diags(self.weighted_V)
                + self.grad_rotation_sign * self.omega * self.rotation.matrix
            )

    @property
    def radial_potential(self) -> bool:
        return self.potential.is_radial()

    def summary(self) -> Dict[str, Any]:
        return {
            "grid": self.grid.to_dict(),
            "omega": self.omega,
            "potential": self.potential.describe(),
            "nonlinearity": self.nonlinearity.model_dump(),
            "dominance_ok": self.dominance_ok,
        }


def build_model(grid: PolarGrid, potential: Union[str, Dict[str, Any], PotentialInterface] = "harmonic",
                omega: float = 0.0, nonlinearity: Optional[Nonlinearity] = None,
                K: float = 0.2, grad_rotation_sign: float = 1.0) -> ModelInstance:
    """Sample the potential and assemble every operator of the model."""
    if not isinstance(potential, PotentialInterface):
        potential = create_potential(potential)
    V, dominated = sample_potential(grid, potential, omega=omega, K=K)
    model = ModelInstance(grid, V, omega, nonlinearity or Nonlinearity(kind="none"), potential,
                          dominance_ok=dominated, grad_rotation_sign=grad_rotation_sign)
    logger.info(
        f"Built model on {grid} with omega={omega}, nonlinearity={model.nonlinearity.kind} "
        f"(eta={model.nonlinearity.eta}), potential={potential.name}"
    )
    return model


def _values(phi: FieldLike) -> np.ndarray:
    return phi.values if isinstance(phi, ComplexField) else np.asarray(phi, dtype=float)


def _density(x: np.ndarray) -> np.ndarray:
    n = x.shape[0] // 2
    return x[:n] ** 2 + x[n:] ** 2


def energy(model: ModelInstance, phi: FieldLike) -> float:
    """E(phi) = 1/2 [x'Kx + sum w V rho + Omega x'Rx + sum w F(rho)]"""
    x = _values(phi)
    if not np.all(np.isfinite(x)):
        raise ValueError("energy: field contains NaN or inf")
    rho = _density(x)
    w = model.grid.node_weights
    kinetic = x @ (model.kinetic.matrix @ x)
    potential = np.dot(w * model.V, rho)
    rotation = model.omega * (x @ (model.rotation.matrix @ x)) if model.omega else 0.0
    interaction = np.dot(w, model.nonlinearity.F(rho))
    return float(0.5 * (kinetic + potential + rotation + interaction))


def euclid_grad(model: ModelInstance, phi: FieldLike) -> np.ndarray:
    """H_phi phi in dual coordinates"""
    x = _values(phi)
    f_rho = model.nonlinearity.f(_density(x))
    return model._grad_linear @ x + model.weights * np.concatenate([f_rho, f_rho]) * x


def apply_h(model: ModelInstance, phi: FieldLike, v: np.ndarray) -> np.ndarray:
    """H_phi v (the linearised operator at phi applied to v), dual coordinates"""
    x = _values(phi)
    f_rho = model.nonlinearity.f(_density(x))
    return model.linear_part @ v + model.weights * np.concatenate([f_rho, f_rho]) * v


def lambda_tilde(model: ModelInstance, phi: ComplexField, grad: Optional[np.ndarray] = None) -> float:
    if not isinstance(phi, ComplexField) or not phi.normalized:
        raise ValueError("lambda_tilde requires a normalized field")
    g = euclid_grad(model, phi) if grad is None else grad
    return float(phi.values @ g)


def residual_inf(model: ModelInstance, phi: ComplexField, grad: Optional[np.ndarray] = None) -> float:
    """max over nodes of |H_phi phi - lambda phi| on nodal values; `grad` is H_phi phi if already known"""
    g = euclid_grad(model, phi) if grad is None else grad
    lam = lambda_tilde(model, phi, g)
    r = g / model.weights - lam * phi.values
    n = model.grid.N
    return float(np.max(np.hypot(r[:n], r[n:])))


def hessian_apply(model: ModelInstance, phi: FieldLike, v: np.ndarray) -> np.ndarray:
    """E''(phi)v = H_phi v + f'(rho)(|phi|^2 v + phi^2 conj(v)), dual coordinates"""
    x = _values(phi)
    n = model.grid.N
    a, b = x[:n], x[n:]
    rho = a ** 2 + b ** 2
    coupling = model.grid.node_weights * 2.0 * model.nonlinearity.f_prime(rho) * (a * v[:n] + b * v[n:])
    return apply_h(model, x, v) + np.concatenate([coupling * a, coupling * b])


def hessian_matrix(model: ModelInstance, phi: FieldLike) -> sp.csr_matrix:
    """Assembled E''(phi) as a symmetric sparse matrix"""
    x = _values(phi)
    n = model.grid.N
    a, b = x[:n], x[n:]
    rho = a ** 2 + b ** 2
    w = model.grid.node_weights
    f_rho = model.nonlinearity.f(rho)
    c = w * 2.0 * model.nonlinearity.f_prime(rho)
    diag = model.weights * np.concatenate([f_rho, f_rho]) + np.concatenate([c * a * a, c * b * b])
    idx = np.arange(n)
    off = sp.csr_matrix(
        (np.concatenate([c * a * b, c * a * b]), (np.concatenate([idx, idx + n]), np.concatenate([idx + n, idx]))),
        shape=(2 * n, 2 * n),
    )
    return sp.csr_matrix(model.linear_part + sp.diags(diag) + off)


def shifted_hessian_matrix(model: ModelInstance, phi: FieldLike, lam: float) -> sp.csr_matrix:
    """E''(phi) - lam * W"""
    return sp.csr_matrix(hessian_matrix(model, phi) - lam * sp.diags(model.weights))
