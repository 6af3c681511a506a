#!/usr/bin/env python3
"""
Polar mesh on the disk and the discrete operators built on it.

Fields are realified: a complex grid function with N = Nr*Ntheta nodes is a
real vector of length 2N laid out as [Re; Im], node index p = i*Ntheta + j
(radial index outer). Every bilinear form is a real symmetric 2N x 2N matrix
with respect to the plain dot product; quadrature weights are absorbed into
the matrices.
"""

import logging
import math
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

# 8th-order central stencils, offsets 0..4 (negative offsets follow by parity).
# Second derivative, scaled by 1/h^2: symmetric.
D2_COEFFS: Tuple[float, ...] = (-205.0 / 72.0, 8.0 / 5.0, -1.0 / 5.0, 8.0 / 315.0, -1.0 / 560.0)
# First derivative, scaled by 1/h: odd, entry for offset -k is minus entry for +k.
D1_COEFFS: Tuple[float, ...] = (0.0, 4.0 / 5.0, -1.0 / 5.0, 4.0 / 105.0, -1.0 / 280.0)


class PolarGrid:
    """Tensor-product polar mesh with half-integer radial nodes"""

    def __init__(self, R: float, Nr: int, Ntheta: int):
        self.R = float(R)
        self.Nr = int(Nr)
        self.Ntheta = int(Ntheta)
        self.h_r = self.R / self.Nr
        self.h_theta = 2.0 * math.pi / self.Ntheta

        self.r_nodes = (np.arange(self.Nr) + 0.5) * self.h_r
        self.theta_nodes = np.arange(self.Ntheta) * self.h_theta
        ring_weights = self.r_nodes * self.h_r * self.h_theta
        self.node_weights = np.repeat(ring_weights, self.Ntheta)
        self.weights2 = np.concatenate([self.node_weights, self.node_weights])
        for arr in (self.r_nodes, self.theta_nodes, self.node_weights, self.weights2):
            arr.setflags(write=False)

    @property
    def N(self) -> int:
        return self.Nr * self.Ntheta

    @property
    def dim(self) -> int:
        return 2 * self.N

    def shape_key(self) -> Tuple[float, int, int]:
        return (self.R, self.Nr, self.Ntheta)

    def same_as(self, other: "PolarGrid") -> bool:
        return self.shape_key() == other.shape_key()

    def node_r(self) -> np.ndarray:
        """Radius of every node, length N"""
        return np.repeat(self.r_nodes, self.Ntheta)

    def node_theta(self) -> np.ndarray:
        """Angle of every node, length N"""
        return np.tile(self.theta_nodes, self.Nr)

    def coords(self) -> Tuple[np.ndarray, np.ndarray]:
        """Cartesian (x, y) of every node"""
        r = self.node_r()
        theta = self.node_theta()
        return r * np.cos(theta), r * np.sin(theta)

    def shift(self, values: np.ndarray, k: int) -> np.ndarray:
        """Rotate a realified field by k angular indices (exact grid rotation)"""
        blocks = np.asarray(values).reshape(2, self.Nr, self.Ntheta)
        return np.roll(blocks, k, axis=2).reshape(-1)

    def to_dict(self) -> Dict[str, float]:
        return {
            "R": self.R,
            "Nr": self.Nr,
            "Ntheta": self.Ntheta,
            "h_r": self.h_r,
            "h_theta": self.h_theta,
        }

    def __repr__(self) -> str:
        return f"PolarGrid(R={self.R}, Nr={self.Nr}, Ntheta={self.Ntheta})"


class SparseSymOperator:
    """Real sparse matrix on realified coordinates with symmetry bookkeeping"""

    def __init__(self, matrix: sp.spmatrix, name: str, symmetric: bool = True,
                 positive_definite: Optional[bool] = None):
        self.matrix = sp.csr_matrix(matrix)
        self.matrix.sort_indices()
        self.name = name
        self.symmetric = symmetric
        self.positive_definite = positive_definite

    @property
    def shape(self) -> Tuple[int, int]:
        return self.matrix.shape

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ x

    def quad(self, x: np.ndarray, y: Optional[np.ndarray] = None) -> float:
        """Bilinear form x^T A y (y defaults to x)"""
        y = x if y is None else y
        return float(x @ (self.matrix @ y))

    def symmetry_defect(self) -> float:
        diff = self.matrix - self.matrix.T
        return float(abs(diff).max()) if diff.nnz else 0.0

    def dump_coo(self, path: Path):
        """Debug dump as `row,col,value` lines"""
        coo = self.matrix.tocoo()
        with open(path, "w") as f:
            f.write("row,col,value\n")
            for i, j, v in zip(coo.row, coo.col, coo.data):
                f.write(f"{i},{j},{v:.17g}\n")
        logger.debug(f"Dumped operator {self.name} ({coo.nnz} entries) to {path}")


def build_grid(R: float, Nr: int, Ntheta: int) -> PolarGrid:
    """Validate the mesh parameters and build the grid."""
    if not np.isfinite(R) or R <= 0:
        raise ValueError(f"R must be positive, got {R}")
    if Nr < 4:
        raise ValueError(f"Nr must be at least 4, got {Nr}")
    if Ntheta < 16 or Ntheta % 2 != 0:
        raise ValueError(f"Ntheta must be even and at least 16, got {Ntheta}")
    return PolarGrid(R, Nr, Ntheta)


def _mirror_upper(A: sp.spmatrix) -> sp.csr_matrix:
    """Rebuild A from its upper triangle so that A == A.T holds bitwise."""
    upper = sp.triu(A, k=0, format="csr")
    strict = sp.triu(A, k=1, format="csr")
    return sp.csr_matrix(upper + strict.T)


def _periodic_stencil(n: int, coeffs: Tuple[float, ...], odd: bool) -> sp.csr_matrix:
    """Circulant matrix with entry (j, j+k mod n) = c_k."""
    rows = []
    cols = []
    vals = []
    base = np.arange(n)
    for k, c in enumerate(coeffs):
        if c == 0.0:
            continue
        offsets = [(0, c)] if k == 0 else [(k, c), (-k, -c if odd else c)]
        for off, val in offsets:
            rows.append(base)
            cols.append((base + off) % n)
            vals.append(np.full(n, val))
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )


def angular_second_difference(grid: PolarGrid) -> sp.csr_matrix:
    """Periodic 8th-order d^2/dtheta^2 on one ring"""
    return _periodic_stencil(grid.Ntheta, D2_COEFFS, odd=False) / grid.h_theta ** 2


def angular_first_difference(grid: PolarGrid) -> sp.csr_matrix:
    """Periodic 8th-order d/dtheta on one ring"""
    return _periodic_stencil(grid.Ntheta, D1_COEFFS, odd=True) / grid.h_theta


def _radial_flux_form(grid: PolarGrid) -> sp.csr_matrix:
    # c_k = rho_k * h_theta / (2 h_r) at interfaces rho_k = k*h_r, k=1..Nr-1;
    # r=0 carries no flux, the ghost node beyond R is -u (zero at r=R).
    Nr = grid.Nr
    c = 0.5 * grid.h_theta / grid.h_r
    rho = np.arange(1, Nr) * grid.h_r
    flux = rho * c
    main = np.zeros(Nr)
    main[1:] += flux
    main[:-1] += flux
    main[-1] += 2.0 * grid.R * c
    return sp.diags([main, -flux, -flux], [0, -1, 1], shape=(Nr, Nr), format="csr")


def assemble_kinetic(grid: PolarGrid) -> SparseSymOperator:
    """Weighted kinetic form, x^T K x = (1/2) * integral |grad phi|^2.

    The energy carries a further factor 1/2, so 0.5 * x^T K x is the
    (1/4) * integral |grad phi|^2 term of the functional.
    """
    ident_theta = sp.identity(grid.Ntheta, format="csr")
    radial = sp.kron(_radial_flux_form(grid), ident_theta, format="csr")

    ring_scale = 0.5 * grid.h_r * grid.h_theta / grid.r_nodes
    angular = sp.kron(sp.diags(ring_scale), -angular_second_difference(grid), format="csr")

    block = _mirror_upper(radial + angular)
    matrix = sp.block_diag((block, block), format="csr")
    return SparseSymOperator(matrix, "kinetic", symmetric=True, positive_definite=True)


def assemble_dtheta(grid: PolarGrid) -> sp.csr_matrix:
    """N x N antisymmetric angular derivative acting ring by ring"""
    ident_r = sp.identity(grid.Nr, format="csr")
    return sp.kron(ident_r, angular_first_difference(grid), format="csr")


def assemble_rotation(grid: PolarGrid, dtheta: Optional[sp.csr_matrix] = None) -> SparseSymOperator:
    """Realified rotation block [[0, -W D], [W D, 0]].

    W D is antisymmetric because W is constant on each ring, hence the block
    is symmetric; 0.5 * Omega * x^T R x equals the -Omega phi* L_z phi term.
    """
    D = assemble_dtheta(grid) if dtheta is None else dtheta
    WD = sp.csr_matrix(sp.diags(grid.node_weights) @ D)
    matrix = sp.bmat([[None, -WD], [WD, None]], format="csr")
    return SparseSymOperator(matrix, "rotation", symmetric=True, positive_definite=False)


def assemble_mass(grid: PolarGrid) -> SparseSymOperator:
    """Diagonal quadrature weights on both components"""
    return SparseSymOperator(sp.diags(grid.weights2, format="csr"), "mass",
                             symmetric=True, positive_definite=True)


def mass_inner(grid: PolarGrid, u: np.ndarray, v: np.ndarray) -> float:
    """Real L2 inner product Re integral u conj(v)"""
    return float(np.dot(grid.weights2 * u, v))


def mass_norm(grid: PolarGrid, u: np.ndarray) -> float:
    return math.sqrt(max(mass_inner(grid, u, u), 0.0))


def sample_potential(grid: PolarGrid, spec, omega: float = 0.0, K: float = 0.2) -> Tuple[np.ndarray, bool]:
    """Sample a potential at the nodes and run the trap dominance check.

    `spec` is a PotentialInterface or anything `create_potential` accepts.
    Returns (V per node, dominance flag). A failing dominance check is only
    logged.
    """
    from gp_core.potentials import PotentialInterface, create_potential

    potential = spec if isinstance(spec, PotentialInterface) else create_potential(spec)
    x, y = grid.coords()
    V = np.asarray(potential.evaluate(grid.node_r(), x, y), dtype=float)
    if V.shape != (grid.N,) or not np.all(np.isfinite(V)):
        raise ValueError(f"Potential '{potential.name}' produced invalid samples")

    centrifugal = 0.5 * (1.0 + K) * omega ** 2 * (x ** 2 + y ** 2)
    margin = V - centrifugal
    dominated = bool(np.all(margin >= 0.0))
    if not dominated:
        worst = int(np.argmin(margin))
        logger.warning(
            f"Trap dominance fails for potential '{potential.name}' with omega={omega}, K={K}: "
            f"min margin {margin[worst]:.3e} at r={grid.node_r()[worst]:.4f}"
        )
    V.setflags(write=False)
    return V, dominated
