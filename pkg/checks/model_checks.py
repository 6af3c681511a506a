"""
Finite-difference oracles for the energy, its gradient and Hessian action
"""

import math
from typing import Any, Dict

import numpy as np
import scipy.linalg as la

from gp_core.fields import ComplexField
from gp_core.grid import build_grid
from gp_core.model import (
    Nonlinearity,
    build_model,
    energy,
    euclid_grad,
    hessian_apply,
    hessian_matrix,
    lambda_tilde,
)

from .base import BaseCheck, CheckContext

FD_STEP = 1e-4


class GradientFDCheck(BaseCheck):
    def __init__(self):
        super().__init__("gradient_fd", "model",
                         "Central differences of E match euclid_grad along random directions")

    def run(self, ctx: CheckContext) -> Dict[str, Any]:
        model, x = ctx.model, ctx.state.values
        g = euclid_grad(model, x)
        rng = ctx.rng(3)
        worst = 0.0
        for _ in range(ctx.directions):
            v = rng.standard_normal(x.size)
            v /= np.linalg.norm(v)
            fd = (energy(model, x + FD_STEP * v) - energy(model, x - FD_STEP * v)) / (2.0 * FD_STEP)
            exact = float(g @ v)
            worst = max(worst, abs(fd - exact) / max(abs(exact), 1e-12 * np.linalg.norm(g)))
        assert worst <= 1e-6, f"gradient FD mismatch {worst:.3e} (relative)"
        return {"max_relative_error": worst, "directions": ctx.directions}


class HessianFDCheck(BaseCheck):
    def __init__(self):
        super().__init__("hessian_fd", "model",
                         "Central differences of euclid_grad match hessian_apply")

    def run(self, ctx: CheckContext) -> Dict[str, Any]:
        model, x = ctx.model, ctx.state.values
        rng = ctx.rng(4)
        worst = 0.0
        for _ in range(ctx.directions):
            v = rng.standard_normal(x.size)
            v /= np.linalg.norm(v)
            fd = (euclid_grad(model, x + FD_STEP * v) - euclid_grad(model, x - FD_STEP * v)) / (2.0 * FD_STEP)
            exact = hessian_apply(model, x, v)
            worst = max(worst, float(np.linalg.norm(fd - exact) / np.linalg.norm(exact)))
        assert worst <= 1e-5, f"Hessian FD mismatch {worst:.3e} (relative)"
        return {"max_relative_error": worst, "directions": ctx.directions}


class HessianSymmetryCheck(BaseCheck):
    def __init__(self):
        super().__init__("hessian_symmetry", "model",
                         "Assembled Hessian is symmetric and agrees with hessian_apply")

    def run(self, ctx: CheckContext) -> Dict[str, Any]:
        model, x = ctx.model, ctx.state.values
        H = hessian_matrix(model, x)
        diff = H - H.T
        scale = float(abs(H).max())
        defect = (float(abs(diff).max()) if diff.nnz else 0.0) / scale
        v = ctx.rng(5).standard_normal(x.size)
        action = hessian_apply(model, x, v)
        agreement = float(np.linalg.norm(H @ v - action) / np.linalg.norm(action))
        assert defect <= 1e-12, f"Hessian symmetry defect {defect:.3e}"
        assert agreement <= 1e-12, f"assembled Hessian differs from hessian_apply by {agreement:.3e}"
        return {"symmetry_defect": defect, "apply_agreement": agreement}


class ZeroModeIdentityCheck(BaseCheck):
    def __init__(self):
        super().__init__("zero_mode_identity", "model",
                         "(E'' - lambda W)(i phi) = i (E' - lambda W phi) at any state")

    def run(self, ctx: CheckContext) -> Dict[str, Any]:
        model, phi = ctx.model, ctx.state
        lam = lambda_tilde(model, phi)
        i_phi = phi.times_i().values
        lhs = hessian_apply(model, phi, i_phi) - lam * model.weights * i_phi
        residual = euclid_grad(model, phi) - lam * model.weights * phi.values
        n = model.grid.N
        rhs = np.concatenate([-residual[n:], residual[:n]])
        gap = float(np.max(np.abs(lhs - rhs)))
        scale = float(np.max(np.abs(model.weights * phi.values))) * max(abs(lam), 1.0)
        assert gap <= 1e-10 * scale, f"zero-mode identity defect {gap:.3e}"
        return {"defect": gap, "scale": scale}


class NonlinearityPrimitiveCheck(BaseCheck):
    def __init__(self):
        super().__init__("nonlinearity_primitive", "model",
                         "F is the antiderivative of f and f' its derivative, f(0) = 0")

    def run(self, ctx: CheckContext) -> Dict[str, Any]:
        s = np.linspace(0.0, 2.0, 4001)
        errors = {}
        for kind in ("cubic", "logarithmic", "lhy"):
            nl = Nonlinearity(kind=kind, eta=ctx.eta, eta_lhy=0.5 * ctx.eta)
            f = nl.f(s)
            cumulative = np.concatenate([[0.0], np.cumsum(0.5 * (f[1:] + f[:-1]) * np.diff(s))])
            primitive_err = float(np.max(np.abs(cumulative - nl.F(s)))) / float(np.max(np.abs(nl.F(s))))
            inner = s[100:-100]
            h = 1e-6
            deriv = (nl.f(inner + h) - nl.f(inner - h)) / (2 * h)
            deriv_err = float(np.max(np.abs(deriv - nl.f_prime(inner)) / np.maximum(np.abs(nl.f_prime(inner)), 1.0)))
            assert float(nl.f(np.array([0.0]))[0]) == 0.0, f"{kind}: f(0) != 0"
            assert primitive_err <= 1e-5, f"{kind}: F differs from the integral of f by {primitive_err:.3e}"
            assert deriv_err <= 1e-5, f"{kind}: f' differs from df/ds by {deriv_err:.3e}"
            errors[kind] = {"primitive": primitive_err, "derivative": deriv_err}
        return errors


class LinearEigenvectorCheck(BaseCheck):
    def __init__(self):
        super().__init__("linear_eigenvector", "model",
                         "With eta = 0 an exact discrete eigenvector gives E' = lambda W phi")

    def run(self, ctx: CheckContext) -> Dict[str, Any]:
        grid = build_grid(ctx.R, 8, 16)
        model = build_model(grid, "harmonic", omega=0.0, nonlinearity=Nonlinearity(kind="none"))
        A = model.linear_part.toarray()
        values, vectors = la.eigh(A, np.diag(model.weights))
        phi = ComplexField(grid, vectors[:, 0] / math.sqrt(float(vectors[:, 0] @ (model.weights * vectors[:, 0]))))
        g = euclid_grad(model, phi)
        defect = float(np.max(np.abs(g - values[0] * model.weights * phi.values)))
        scale = float(np.max(np.abs(g)))
        assert defect <= 1e-10 * max(scale, 1.0), f"eigenvector defect {defect:.3e}"
        lam = lambda_tilde(model, phi)
        assert abs(lam - values[0]) <= 1e-10 * abs(values[0]), f"lambda {lam} vs eigenvalue {values[0]}"
        return {"eigenvalue": float(values[0]), "defect": defect}


MODEL_CHECKS = [GradientFDCheck, HessianFDCheck, HessianSymmetryCheck, ZeroModeIdentityCheck,
                NonlinearityPrimitiveCheck, LinearEigenvectorCheck]
