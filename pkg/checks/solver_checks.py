"""
Solver invariants: exact metric factors, tangency of the gradient and
constraint preservation along a short P-RG run
"""

from typing import Any, Dict

import numpy as np

from gp_core.grid import mass_inner
from gp_core.precond import PrecondSpec, apply_inverse, build_metric, factor_apply
from gp_core.riemann import PRGConfig, StageSpec, prg_run, riemannian_grad

from .base import BaseCheck, CheckContext


class ExactFactorCheck(BaseCheck):
    def __init__(self):
        super().__init__("exact_factor", "solver",
                         "With drop_tol = 0 the factor product reproduces the metric")

    def run(self, ctx: CheckContext) -> Dict[str, Any]:
        data = {}
        for kind in ("kinetic-plus-potential", "optimal-shifted"):
            metric = build_metric(ctx.model, ctx.state, PrecondSpec(kind=kind, drop_tol=0.0))
            x = ctx.rng(6).standard_normal(ctx.grid.dim)
            Px = metric.matrix @ x
            product_err = float(np.linalg.norm(factor_apply(metric, x) - Px) / np.linalg.norm(Px))
            solve_err = float(np.linalg.norm(apply_inverse(metric, Px) - x) / np.linalg.norm(x))
            assert product_err <= 1e-10, f"{kind}: factor product error {product_err:.3e}"
            assert solve_err <= 1e-8, f"{kind}: apply_inverse error {solve_err:.3e}"
            data[kind] = {"product_error": product_err, "solve_error": solve_err,
                          "fill_ratio": metric.stats.fill_ratio}
        return data


class GradientTangencyCheck(BaseCheck):
    def __init__(self):
        super().__init__("gradient_tangency", "solver",
                         "The preconditioned Riemannian gradient is L2-orthogonal to phi")

    def run(self, ctx: CheckContext) -> Dict[str, Any]:
        data = {}
        for kind in ("identity-mass", "kinetic-plus-potential", "hessian"):
            metric = build_metric(ctx.model, ctx.state, PrecondSpec(kind=kind))
            g, lam_p = riemannian_grad(ctx.model, ctx.state, metric)
            overlap = abs(mass_inner(ctx.grid, ctx.state.values, g))
            scale = float(np.sqrt(mass_inner(ctx.grid, g, g)))
            assert overlap <= 1e-12 * max(scale, 1.0), f"{kind}: (phi, g)_W = {overlap:.3e}"
            data[kind] = {"overlap": overlap, "lambda_p": lam_p}
        return data


class ConstraintPreservationCheck(BaseCheck):
    def __init__(self):
        super().__init__("constraint_preservation", "solver",
                         "Every P-RG iterate has unit mass and the energy decreases")

    def run(self, ctx: CheckContext) -> Dict[str, Any]:
        config = PRGConfig(
            stages=[StageSpec(precond=PrecondSpec(kind="hessian", refresh=5), max_iter=20, tau=1.0)],
            tol_inf=1e-14,
            snapshot_stride=1,
        )
        trace, phi = prg_run(ctx.model, ctx.state, config)
        drift = max(abs(float(np.sqrt(mass_inner(ctx.grid, v, v))) - 1.0) for _, v in trace.snapshots)
        energies = trace.column("energy")
        assert drift <= 1e-14, f"mass drift {drift:.3e}"
        assert energies[-1] < energies[0], "energy did not decrease over the run"
        return {"iterations": int(trace.last.n), "mass_drift": drift,
                "energy_first": float(energies[0]), "energy_last": float(energies[-1])}


SOLVER_CHECKS = [ExactFactorCheck, GradientTangencyCheck, ConstraintPreservationCheck]
