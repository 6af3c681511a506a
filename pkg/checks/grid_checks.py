"""
Grid invariants: quadrature, operator symmetry and rotation equivariance
"""

import math
from typing import Any, Dict

import numpy as np

from gp_core.grid import assemble_dtheta, assemble_kinetic, assemble_mass, assemble_rotation

from .base import BaseCheck, CheckContext


class WeightSumCheck(BaseCheck):
    def __init__(self):
        super().__init__("weights_sum", "grid", "Quadrature weights sum to the disk area")

    def run(self, ctx: CheckContext) -> Dict[str, Any]:
        grid = ctx.grid
        total = float(np.sum(grid.node_weights))
        area = math.pi * grid.R ** 2
        rel = abs(total - area) / area
        assert rel <= 1e-12, f"sum(w) = {total:.17g}, pi R^2 = {area:.17g}"
        assert grid.r_nodes[0] > 0 and grid.r_nodes[-1] < grid.R, "radial nodes leave (0, R)"
        return {"sum_w": total, "relative_error": rel}


class OperatorSymmetryCheck(BaseCheck):
    def __init__(self):
        super().__init__("operator_symmetry", "grid",
                         "Kinetic, mass and rotation blocks are symmetric, D_theta antisymmetric")

    def run(self, ctx: CheckContext) -> Dict[str, Any]:
        grid = ctx.grid
        defects = {op.name: op.symmetry_defect()
                   for op in (assemble_kinetic(grid), assemble_mass(grid), assemble_rotation(grid))}
        D = assemble_dtheta(grid)
        anti = D + D.T
        defects["dtheta_antisymmetry"] = float(abs(anti).max()) if anti.nnz else 0.0
        worst = max(defects.values())
        assert worst <= 1e-12, f"symmetry defects {defects}"
        return defects


class KineticNonnegativeCheck(BaseCheck):
    def __init__(self):
        super().__init__("kinetic_nonnegative", "grid",
                         "Kinetic form is nonnegative and annihilates nothing but zero")

    def run(self, ctx: CheckContext) -> Dict[str, Any]:
        kinetic = assemble_kinetic(ctx.grid)
        rng = ctx.rng(1)
        smallest = math.inf
        for _ in range(ctx.directions):
            x = rng.standard_normal(ctx.grid.dim)
            q = kinetic.quad(x) / float(x @ x)
            smallest = min(smallest, q)
        constant = np.ones(ctx.grid.dim)
        boundary = kinetic.quad(constant)
        assert smallest > 0.0, f"kinetic Rayleigh quotient {smallest:.3e} on a random vector"
        # only the Dirichlet ghost sees a constant field
        assert boundary > 0.0, "constant field has zero kinetic energy despite the boundary condition"
        return {"min_rayleigh_random": smallest, "constant_quad": boundary}


class RotationEquivarianceCheck(BaseCheck):
    def __init__(self):
        super().__init__("rotation_equivariance", "grid",
                         "Angular index shifts commute with K, W, D_theta and the rotation block")

    def run(self, ctx: CheckContext) -> Dict[str, Any]:
        grid = ctx.grid
        rng = ctx.rng(2)
        x = rng.standard_normal(grid.dim)
        half = rng.standard_normal(grid.N)
        operators = {
            "kinetic": assemble_kinetic(grid).matrix,
            "mass": assemble_mass(grid).matrix,
            "rotation": assemble_rotation(grid).matrix,
        }
        D = assemble_dtheta(grid)
        worst: Dict[str, float] = {}
        for k in (1, 3, grid.Ntheta // 4):
            for name, A in operators.items():
                lhs = grid.shift(A @ x, k)
                rhs = A @ grid.shift(x, k)
                worst[name] = max(worst.get(name, 0.0), float(np.max(np.abs(lhs - rhs))) / max(1.0, np.max(np.abs(lhs))))
            ring = np.concatenate([half, np.zeros(grid.N)])
            lhs = grid.shift(np.concatenate([D @ half, np.zeros(grid.N)]), k)
            rhs = np.concatenate([D @ grid.shift(ring, k)[: grid.N], np.zeros(grid.N)])
            worst["dtheta"] = max(worst.get("dtheta", 0.0), float(np.max(np.abs(lhs - rhs))) / max(1.0, np.max(np.abs(lhs))))
        assert max(worst.values()) <= 1e-13, f"shift commutation defects {worst}"
        return worst


GRID_CHECKS = [WeightSumCheck, OperatorSymmetryCheck, KineticNonnegativeCheck, RotationEquivarianceCheck]
