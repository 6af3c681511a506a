#!/usr/bin/env python3
"""
Spectral diagnostics at a converged state: the symmetry (kernel) basis, the
rate constants mu and L of the shifted Hessian against the metric, the
Morse-Bott zero-mode count, and the rate formulas built on mu and L.

The pencil is A = E''(phi_g) - lambda_tilde * W against P_hat, the product of
the metric's factors, i.e. the operator the iteration actually inverts.
"""

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, lobpcg
from pydantic import BaseModel

from gp_core.fields import ComplexField, realified_times_i
from gp_core.model import ModelInstance, lambda_tilde, residual_inf, shifted_hessian_matrix
from gp_core.precond import (
    FactorizedMetric,
    PrecondSpec,
    apply_inverse,
    build_metric,
    factor_apply,
    factor_product_matrix,
)
from gp_core.riemann import riemannian_grad, tangent_project_L2

logger = logging.getLogger(__name__)

DENSE_CAP = 8192
KERNEL_DROP_TOL = 1e-8
NEGATIVE_MU_TOL = -1e-8
LOBPCG_TOL = 1e-10
LOBPCG_MAXITER = 2000


class MorseBottViolation(RuntimeError):
    """Smallest constrained quotient is negative; carries the partial constants"""

    def __init__(self, message: str, constants: "RateConstants"):
        super().__init__(message)
        self.constants = constants


class KernelBasis:
    """P-orthonormal tangent vectors spanning the symmetry directions at phi_g"""

    def __init__(self, vectors: List[np.ndarray], labels: List[str]):
        self.vectors = vectors
        self.labels = labels

    @property
    def dim(self) -> int:
        return len(self.vectors)

    def as_matrix(self) -> np.ndarray:
        return np.column_stack(self.vectors)


class RateConstants(BaseModel):
    mu: float
    L: float
    kappa: float
    tau_opt: float
    rate_opt: float
    solver: str
    deflation_dim: int
    L_no_deflation: Optional[float] = None
    L_agreement: Optional[float] = None
    lambda_tilde: float
    lambda_p: float
    lambda_discrepancy: float
    residual_inf: float
    reliable: bool = True
    kind: Optional[str] = None
    ordering: Optional[str] = None
    sigma0: Optional[float] = None
    drop_tol: Optional[float] = None

    def rho(self, tau: float) -> float:
        return rho_tau(self, tau)


class MorseBottReport(BaseModel):
    eigenvalues: List[float]
    theta0: float
    count_below: int
    next_eigenvalue: Optional[float] = None
    kernel_size: int
    consistent: bool
    k1_rayleigh: Optional[float] = None
    solver: str = "dense"
    converged: bool = True
    error: Optional[str] = None


def _p_inner(metric: FactorizedMetric, u: np.ndarray, v: np.ndarray) -> float:
    return float(np.dot(u, factor_apply(metric, v)))


def rotation_generator(model: ModelInstance, phi: ComplexField) -> np.ndarray:
    """i L_z phi = d(phi)/d(theta), realified"""
    return np.concatenate([model.dtheta @ phi.re, model.dtheta @ phi.im])


def kernel_basis(model: ModelInstance, phi_g: ComplexField, metric: FactorizedMetric,
                 include_rotation: bool = True) -> KernelBasis:
    """Phase generator always, rotation generator when the instance is rotation invariant."""
    candidates = [("phase", realified_times_i(phi_g.values))]
    if include_rotation and model.omega > 0 and model.radial_potential:
        candidates.append(("rotation", rotation_generator(model, phi_g)))

    vectors: List[np.ndarray] = []
    labels: List[str] = []
    for label, candidate in candidates:
        v = tangent_project_L2(phi_g, candidate)
        for q in vectors:
            v = v - _p_inner(metric, q, v) * q
        norm = math.sqrt(max(_p_inner(metric, v, v), 0.0))
        if label == "phase" and norm < KERNEL_DROP_TOL:
            raise RuntimeError("Phase generator i*phi degenerated; the state is corrupt")
        if norm < KERNEL_DROP_TOL:
            logger.info(f"Dropping {label} generator (P-norm {norm:.3e} after projection)")
            continue
        vectors.append(v / norm)
        labels.append(label)
    return KernelBasis(vectors, labels)


class DensePencil:
    """Tangency-constrained dense pencil (Z^T A Z, Z^T P_hat Z) and its spectrum"""

    def __init__(self, model: ModelInstance, phi_g: ComplexField, metric: FactorizedMetric):
        self.lam = lambda_tilde(model, phi_g)
        A = shifted_hessian_matrix(model, phi_g, self.lam)
        P = factor_product_matrix(metric)
        w_phi = model.weights * phi_g.values
        self.basis = la.null_space(w_phi[None, :])
        self.A = self._sym(self.basis.T @ (A @ self.basis))
        self.P = self._sym(self.basis.T @ (P @ self.basis))
        self.P_full = P
        self.eigenvalues = la.eigh(self.A, self.P, eigvals_only=True)

    @staticmethod
    def _sym(M: np.ndarray) -> np.ndarray:
        return 0.5 * (M + M.T)

    def deflated_eigenvalues(self, kernel: KernelBasis) -> np.ndarray:
        if kernel.dim == 0:
            return self.eigenvalues
        constraints = self.basis.T @ (self.P_full @ kernel.as_matrix())
        inner = la.null_space(constraints.T)
        A = self._sym(inner.T @ self.A @ inner)
        P = self._sym(inner.T @ self.P @ inner)
        return la.eigh(A, P, eigvals_only=True)


def _operators(model: ModelInstance, phi_g: ComplexField, metric: FactorizedMetric, lam: float):
    A = shifted_hessian_matrix(model, phi_g, lam)
    B = factor_product_matrix(metric)
    n = A.shape[0]
    M = LinearOperator((n, n), matvec=lambda v: apply_inverse(metric, np.ravel(v)), dtype=np.float64)
    tangency = apply_inverse(metric, model.weights * phi_g.values)
    return A, B, M, tangency


def _lobpcg_extreme(A, B, M, Y: np.ndarray, k: int, largest: bool, seed: int = 0,
                    tol: float = LOBPCG_TOL, maxiter: int = LOBPCG_MAXITER) -> Tuple[np.ndarray, bool]:
    """k extreme eigenvalues of (A, B) orthogonal to Y, and whether every residual met `tol`"""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((A.shape[0], k))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", UserWarning)
        values, _, history = lobpcg(A, X, B=B, M=M, Y=Y, tol=tol, maxiter=maxiter, largest=largest,
                                    retResidualNormsHistory=True)
    residual = min(float(np.max(r)) for r in history) if len(history) else math.inf
    converged = residual <= tol
    if not converged:
        side = "largest" if largest else "smallest"
        logger.warning(f"lobpcg ({side} {k}) stopped at residual {residual:.3e} > tol {tol:.1e} "
                       f"after {len(history)} iterations")
    for w in caught:
        logger.debug(f"lobpcg: {w.message}")
    return np.sort(np.asarray(values, dtype=float)), converged


def rate_constants(model: ModelInstance, phi_g: ComplexField, metric: FactorizedMetric,
                   kernel: KernelBasis, dense_cap: int = DENSE_CAP, force_iterative: bool = False,
                   pencil: Optional[DensePencil] = None, reliable: bool = True,
                   lobpcg_maxiter: int = LOBPCG_MAXITER) -> RateConstants:
    """Extremal constrained Rayleigh quotients mu, L of (E'' - lambda W, P_hat)."""
    lam = lambda_tilde(model, phi_g)
    _, lam_p = riemannian_grad(model, phi_g, metric)
    dim = model.grid.dim

    if dim <= dense_cap and not force_iterative:
        pencil = pencil or DensePencil(model, phi_g, metric)
        deflated = pencil.deflated_eigenvalues(kernel)
        mu, L = float(deflated[0]), float(deflated[-1])
        L_full = float(pencil.eigenvalues[-1])
        solver = "dense"
    else:
        A, B, M, tangency = _operators(model, phi_g, metric, lam)
        constraints = np.column_stack([tangency] + kernel.vectors)
        lowest, ok_mu = _lobpcg_extreme(A, B, M, constraints, 4, largest=False, maxiter=lobpcg_maxiter)
        highest, ok_L = _lobpcg_extreme(A, B, M, constraints, 4, largest=True, maxiter=lobpcg_maxiter)
        full, ok_full = _lobpcg_extreme(A, B, M, tangency[:, None], 4, largest=True, maxiter=lobpcg_maxiter)
        mu, L, L_full = float(lowest[0]), float(highest[-1]), float(full[-1])
        solver = "iterative"
        if not (ok_mu and ok_L and ok_full):
            logger.warning("Iterative rate constants did not converge; flagged unreliable")
            reliable = False

    agreement = abs(L - L_full) / abs(L) if L else None
    tau_best = 2.0 / (L + mu)
    constants = RateConstants(
        mu=mu,
        L=L,
        kappa=L / mu if mu > 0 else math.inf,
        tau_opt=tau_best,
        rate_opt=(L - mu) / (L + mu),
        solver=solver,
        deflation_dim=kernel.dim,
        L_no_deflation=L_full,
        L_agreement=agreement,
        lambda_tilde=lam,
        lambda_p=lam_p,
        lambda_discrepancy=abs(lam - lam_p),
        residual_inf=residual_inf(model, phi_g),
        reliable=reliable,
        kind=metric.spec.kind,
        ordering=metric.stats.ordering,
        sigma0=metric.spec.sigma0 if metric.spec.kind == "optimal-shifted" else None,
        drop_tol=metric.spec.drop_tol,
    )
    logger.info(f"Rate constants ({solver}): mu={mu:.6e}, L={L:.10f}, kappa={constants.kappa:.6g}")
    if mu <= NEGATIVE_MU_TOL:
        raise MorseBottViolation(f"Smallest constrained quotient is negative (mu={mu:.3e})", constants)
    return constants


def rho_tau(constants: RateConstants, tau: float) -> float:
    """max(|1 - tau mu|, |1 - tau L|)"""
    return max(abs(1.0 - tau * constants.mu), abs(1.0 - tau * constants.L))


def tau_opt(constants: RateConstants) -> float:
    return 2.0 / (constants.L + constants.mu)


def optimal_rate(constants: RateConstants) -> float:
    return (constants.L - constants.mu) / (constants.L + constants.mu)


def morse_bott_check(model: ModelInstance, phi_g: ComplexField, metric: FactorizedMetric,
                     kernel: KernelBasis, q: int = 6, theta_factor: float = 1e-6,
                     dense_cap: int = DENSE_CAP, pencil: Optional[DensePencil] = None) -> MorseBottReport:
    """Count near-zero tangency-constrained eigenvalues against the kernel size."""
    converged = True
    try:
        if model.grid.dim <= dense_cap:
            pencil = pencil or DensePencil(model, phi_g, metric)
            spectrum = pencil.eigenvalues
            L = float(spectrum[-1])
            lowest = spectrum[:q]
            solver = "dense"
        else:
            lam = lambda_tilde(model, phi_g)
            A, B, M, tangency = _operators(model, phi_g, metric, lam)
            lowest, ok_low = _lobpcg_extreme(A, B, M, tangency[:, None], q, largest=False)
            highest, ok_high = _lobpcg_extreme(A, B, M, tangency[:, None], 4, largest=True)
            L = float(highest[-1])
            solver = "iterative"
            converged = ok_low and ok_high

        theta0 = theta_factor * L
        below = int(np.sum(lowest < theta0))
        next_value = float(lowest[below]) if below < len(lowest) else None
        consistent = converged and below == kernel.dim and next_value is not None and next_value > 10.0 * theta0
        k1_rayleigh = None
        if kernel.dim:
            k1 = kernel.vectors[0]
            A = shifted_hessian_matrix(model, phi_g, lambda_tilde(model, phi_g))
            k1_rayleigh = float(k1 @ (A @ k1)) / _p_inner(metric, k1, k1)
        report = MorseBottReport(
            eigenvalues=[float(v) for v in lowest],
            theta0=theta0,
            count_below=below,
            next_eigenvalue=next_value,
            kernel_size=kernel.dim,
            consistent=bool(consistent),
            k1_rayleigh=k1_rayleigh,
            solver=solver,
            converged=converged,
        )
    except Exception as e:
        logger.error(f"Morse-Bott check failed: {e}")
        return MorseBottReport(eigenvalues=[], theta0=0.0, count_below=0, kernel_size=kernel.dim,
                               consistent=False, error=str(e))

    verdict = "consistent with Morse-Bott" if report.consistent else "NOT consistent with Morse-Bott"
    logger.info(f"{verdict}: {report.count_below} modes below {report.theta0:.3e}, kernel size {kernel.dim}")
    return report


def constants_for_spec(model: ModelInstance, phi_g: ComplexField, spec: PrecondSpec,
                       dense_cap: int = DENSE_CAP, include_rotation: bool = True,
                       reliable: bool = True) -> RateConstants:
    metric = build_metric(model, phi_g, spec)
    kernel = kernel_basis(model, phi_g, metric, include_rotation=include_rotation)
    return rate_constants(model, phi_g, metric, kernel, dense_cap=dense_cap, reliable=reliable)


def sigma_sweep(model: ModelInstance, phi_g: ComplexField, sigmas: Sequence[float], base_spec: PrecondSpec,
                dense_cap: int = DENSE_CAP, workers: int = 1, include_rotation: bool = True) -> List[RateConstants]:
    """Rate constants of the optimal-shifted metric for several sigma0, in input order"""
    specs = [base_spec.model_copy(update={"kind": "optimal-shifted", "sigma0": float(s)}) for s in sigmas]

    def run(spec: PrecondSpec) -> RateConstants:
        return constants_for_spec(model, phi_g, spec, dense_cap, include_rotation)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(run, specs))


def ordering_table(model: ModelInstance, phi_g: ComplexField, base_spec: PrecondSpec,
                   orderings: Sequence[str] = ("amd", "natural"), dense_cap: int = DENSE_CAP,
                   force_iterative: bool = False, include_rotation: bool = True, reliable: bool = True,
                   on_metric: Optional[Callable[[FactorizedMetric, KernelBasis, Optional[DensePencil]], None]] = None,
                   raise_violation: bool = True) -> List[RateConstants]:
    """One rate-constants row per ordering at the same kind, sigma0 and drop tolerance.

    `on_metric` sees each metric with its kernel basis and dense pencil (None on
    the iterative path). With raise_violation=False a negative mu keeps its
    partial row instead of raising.
    """
    rows = []
    for ordering in orderings:
        spec = base_spec.model_copy(update={"ordering": ordering})
        metric = build_metric(model, phi_g, spec)
        kernel = kernel_basis(model, phi_g, metric, include_rotation=include_rotation)
        dense = model.grid.dim <= dense_cap and not force_iterative
        pencil = DensePencil(model, phi_g, metric) if dense else None
        if on_metric is not None:
            on_metric(metric, kernel, pencil)
        try:
            rows.append(rate_constants(model, phi_g, metric, kernel, dense_cap=dense_cap,
                                       force_iterative=force_iterative, pencil=pencil, reliable=reliable))
        except MorseBottViolation as e:
            if raise_violation:
                raise
            logger.error(f"ordering={ordering}: {e}")
            rows.append(e.constants)
    return rows
