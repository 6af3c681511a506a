#!/usr/bin/env python3
"""
Metric operators P_phi for the Riemannian gradient: assembly of the candidate
preconditioners, fill-reducing ordering, threshold incomplete Cholesky with a
shift-restart policy, and the solve / inner-product services built on top.

The assembled matrix is the metric (metric_inner); the factor L L^T is the
solver (apply_inverse). With drop_tol > 0 the two are not exact inverses.
"""

import hashlib
import json
import logging
import threading
import time
from typing import Dict, Literal, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, Field

from gp_core import kernels
from gp_core.fields import ComplexField
from gp_core.model import ModelInstance, hessian_matrix, lambda_tilde

logger = logging.getLogger(__name__)

MAX_SHIFT_DOUBLINGS = 60
INITIAL_SHIFT_FACTOR = 1e-8
ORDERING_CACHE_SIZE = 8

_ORDERING_CACHE: Dict[Tuple[int, str], np.ndarray] = {}
_ORDERING_LOCK = threading.Lock()

MetricKind = Literal["identity-mass", "kinetic-plus-potential", "hessian", "optimal-shifted"]


class MetricBuildError(RuntimeError):
    """Raised when a metric cannot be assembled or factored"""


class PrecondSpec(BaseModel):
    """Which metric to build and how to factor it"""
    kind: MetricKind = "hessian"
    sigma0: float = Field(default=0.1, gt=0.0)
    drop_tol: float = Field(default=0.0, ge=0.0)
    ordering: Literal["amd", "natural"] = "amd"
    refresh: int = Field(default=100, ge=1)

    @property
    def depends_on_state(self) -> bool:
        return self.kind in ("hessian", "optimal-shifted")


class BuildStats(BaseModel):
    kind: str
    ordering: str
    drop_tol: float
    sigma0: Optional[float] = None
    lambda_shift: Optional[float] = None
    dim: int
    nnz_lower: int
    nnz_factor: int
    fill_ratio: float
    shift: float
    shift_count: int
    build_seconds: float
    base_id: Optional[str] = None

    def to_json(self) -> str:
        return json.dumps(self.model_dump(), sort_keys=True)


class FactorizedMetric:
    """Assembled metric matrix together with its (incomplete) Cholesky factor"""

    def __init__(self, spec: PrecondSpec, matrix: sp.csr_matrix, perm: np.ndarray,
                 l_ptr: np.ndarray, l_idx: np.ndarray, l_val: np.ndarray,
                 shift: float, stats: BuildStats, base_id: Optional[str] = None):
        self.spec = spec
        self.matrix = matrix
        self.perm = perm
        self.inv_perm = np.empty_like(perm)
        self.inv_perm[perm] = np.arange(perm.shape[0])
        self.l_ptr = l_ptr
        self.l_idx = l_idx
        self.l_val = l_val
        self.shift = shift
        self.stats = stats
        self.base_id = base_id
        for arr in (self.perm, self.inv_perm, self.l_ptr, self.l_idx, self.l_val):
            arr.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.perm.shape[0]

    @property
    def nnz(self) -> int:
        return int(self.l_val.shape[0])

    def lower_factor(self) -> sp.csc_matrix:
        n = self.dim
        return sp.csc_matrix((self.l_val, self.l_idx, self.l_ptr), shape=(n, n))


def natural_ordering(n: int) -> np.ndarray:
    return np.arange(n, dtype=np.int64)


def amd_ordering(pattern: sp.spmatrix) -> np.ndarray:
    """Approximate minimum degree ordering of a symmetric sparsity pattern.

    The diagonal is ignored and the pattern is symmetrized first.
    """
    coo = sp.coo_matrix(pattern)
    n = coo.shape[0]
    off = coo.row != coo.col
    rows = np.concatenate([coo.row[off], coo.col[off]])
    cols = np.concatenate([coo.col[off], coo.row[off]])
    structure = sp.csc_matrix((np.ones(rows.shape[0], dtype=bool), (rows, cols)), shape=(n, n))
    structure.sum_duplicates()
    structure.sort_indices()
    return kernels.amd_order(n, structure.indptr.astype(np.int64), structure.indices.astype(np.int64))


def node_pattern(matrix: sp.spmatrix, n_nodes: int) -> sp.csr_matrix:
    """Collapse a realified 2N pattern onto the N grid nodes"""
    coo = sp.coo_matrix(matrix)
    rows = coo.row % n_nodes
    cols = coo.col % n_nodes
    ones = np.ones(rows.shape[0], dtype=bool)
    pattern = sp.csr_matrix((ones, (rows, cols)), shape=(n_nodes, n_nodes))
    pattern.sum_duplicates()
    pattern.sort_indices()
    return pattern


def _pattern_key(pattern: sp.csr_matrix) -> str:
    digest = hashlib.sha1(pattern.indptr.astype(np.int64).tobytes())
    digest.update(pattern.indices.astype(np.int64).tobytes())
    return digest.hexdigest()


def node_ordering(matrix: sp.spmatrix, n_nodes: int) -> np.ndarray:
    """AMD order of the grid nodes, cached by sparsity pattern.

    Metric refreshes only change values, so every rebuild on the same grid
    reuses the first ordering.
    """
    pattern = node_pattern(matrix, n_nodes)
    key = (n_nodes, _pattern_key(pattern))
    with _ORDERING_LOCK:
        cached = _ORDERING_CACHE.get(key)
    if cached is not None:
        return cached
    started = time.perf_counter()
    order = amd_ordering(pattern)
    order.setflags(write=False)
    logger.info(f"AMD ordering of {n_nodes} nodes ({pattern.nnz} pattern entries) "
                f"in {time.perf_counter() - started:.2f}s")
    with _ORDERING_LOCK:
        if len(_ORDERING_CACHE) >= ORDERING_CACHE_SIZE:
            _ORDERING_CACHE.pop(next(iter(_ORDERING_CACHE)))
        _ORDERING_CACHE[key] = order
    return order


def clear_ordering_cache():
    with _ORDERING_LOCK:
        _ORDERING_CACHE.clear()


def realified_ordering(matrix: sp.spmatrix, n_nodes: int, ordering: str) -> np.ndarray:
    """Ordering on 2N unknowns, keeping (Re, Im) of each node adjacent"""
    if ordering == "natural":
        return natural_ordering(2 * n_nodes)
    if ordering != "amd":
        raise ValueError(f"Unknown ordering: {ordering}")
    node_order = node_ordering(matrix, n_nodes)
    perm = np.empty(2 * n_nodes, dtype=np.int64)
    perm[0::2] = node_order
    perm[1::2] = node_order + n_nodes
    return perm


def assemble_metric_matrix(model: ModelInstance, phi: Optional[ComplexField],
                           spec: PrecondSpec) -> Tuple[sp.csr_matrix, Optional[float]]:
    """Realified symmetric matrix of the requested kind and the lambda used (if any)"""
    if spec.kind == "identity-mass":
        return sp.csr_matrix(model.mass.matrix), None
    if spec.kind == "kinetic-plus-potential":
        return sp.csr_matrix(model.kinetic.matrix + sp.diags(model.weighted_V)), None

    if phi is None:
        raise ValueError(f"Metric kind '{spec.kind}' needs a base state")
    if spec.kind == "hessian":
        return hessian_matrix(model, phi), None

    lam = lambda_tilde(model, phi)
    shifted = hessian_matrix(model, phi) - (lam - spec.sigma0) * sp.diags(model.weights)
    return sp.csr_matrix(shifted), lam


def _diagonal_metric(spec: PrecondSpec, matrix: sp.csr_matrix, started: float,
                     base_id: Optional[str]) -> FactorizedMetric:
    diag = matrix.diagonal()
    n = diag.shape[0]
    stats = BuildStats(kind=spec.kind, ordering="natural", drop_tol=spec.drop_tol, dim=n,
                       nnz_lower=n, nnz_factor=n, fill_ratio=1.0, shift=0.0, shift_count=0,
                       build_seconds=time.perf_counter() - started, base_id=base_id)
    return FactorizedMetric(spec, matrix, natural_ordering(n), np.arange(n + 1, dtype=np.int64),
                            np.arange(n, dtype=np.int64), np.sqrt(diag), 0.0, stats, base_id)


def factorize(matrix: sp.spmatrix, perm: np.ndarray, drop_tol: float,
              shift_weights: np.ndarray) -> tuple:
    """IC(drop_tol) of P A P^T with the shift-restart loop.

    Returns (l_ptr, l_idx, l_val, shift, shift_count, nnz_lower).
    """
    permuted = sp.csc_matrix(sp.csr_matrix(matrix)[perm][:, perm])
    lower = sp.tril(permuted, format="csc")
    lower.sort_indices()
    n = permuted.shape[0]
    a_ptr = lower.indptr.astype(np.int64)
    a_idx = lower.indices.astype(np.int64)
    a_val = lower.data.astype(np.float64)
    col_norm = np.sqrt(np.asarray(permuted.multiply(permuted).sum(axis=0)).ravel())
    weights = np.asarray(shift_weights, dtype=np.float64)[perm]

    shift = 0.0
    shift_count = 0
    base_shift = INITIAL_SHIFT_FACTOR * float(np.max(np.abs(permuted.diagonal())) or 1.0)
    while True:
        status, column, l_ptr, l_idx, l_val = kernels.ichol_csc(
            n, a_ptr, a_idx, a_val, col_norm, float(drop_tol), shift * weights
        )
        if status == 0:
            return l_ptr, l_idx.copy(), l_val.copy(), shift, shift_count, int(a_val.shape[0])
        if shift_count > MAX_SHIFT_DOUBLINGS:
            raise MetricBuildError(
                f"Incomplete Cholesky failed after {MAX_SHIFT_DOUBLINGS} shift doublings "
                f"(last pivot failure at column {column}, shift {shift:.3e})"
            )
        shift = base_shift if shift_count == 0 else 2.0 * shift
        shift_count += 1
        logger.warning(f"Nonpositive pivot at column {column}; restarting with shift {shift:.3e}")


def build_metric(model: ModelInstance, phi: Optional[ComplexField], spec: PrecondSpec) -> FactorizedMetric:
    """Assemble, order and factor the metric of the requested kind."""
    started = time.perf_counter()
    if spec.depends_on_state and (phi is None or not phi.normalized):
        raise ValueError(f"Metric kind '{spec.kind}' needs a normalized base state")
    base_id = phi.fingerprint() if phi is not None else None

    matrix, lam = assemble_metric_matrix(model, phi, spec)
    if not np.all(np.isfinite(matrix.data)):
        raise MetricBuildError(f"Assembled '{spec.kind}' metric has non-finite entries")

    if spec.kind == "identity-mass":
        metric = _diagonal_metric(spec, matrix, started, base_id)
        logger.info(f"metric_build {metric.stats.to_json()}")
        return metric

    perm = realified_ordering(matrix, model.grid.N, spec.ordering)
    l_ptr, l_idx, l_val, shift, shift_count, nnz_lower = factorize(
        matrix, perm, spec.drop_tol, model.weights
    )
    if shift:
        matrix = sp.csr_matrix(matrix + shift * sp.diags(model.weights))

    stats = BuildStats(
        kind=spec.kind,
        ordering=spec.ordering,
        drop_tol=spec.drop_tol,
        sigma0=spec.sigma0 if spec.kind == "optimal-shifted" else None,
        lambda_shift=lam,
        dim=matrix.shape[0],
        nnz_lower=nnz_lower,
        nnz_factor=int(l_val.shape[0]),
        fill_ratio=float(l_val.shape[0]) / max(nnz_lower, 1),
        shift=shift,
        shift_count=shift_count,
        build_seconds=time.perf_counter() - started,
        base_id=base_id,
    )
    logger.info(f"metric_build {stats.to_json()}")
    return FactorizedMetric(spec, matrix, perm, l_ptr, l_idx, l_val, shift, stats, base_id)


def apply_inverse(metric: FactorizedMetric, b: np.ndarray) -> np.ndarray:
    """Solve (L L^T) x = b up to the ordering: forward then backward substitution"""
    bp = np.ascontiguousarray(np.asarray(b, dtype=np.float64)[metric.perm])
    y = kernels.forward_solve(metric.l_ptr, metric.l_idx, metric.l_val, bp)
    z = kernels.backward_solve(metric.l_ptr, metric.l_idx, metric.l_val, y)
    x = np.empty_like(z)
    x[metric.perm] = z
    return x


def factor_apply(metric: FactorizedMetric, v: np.ndarray) -> np.ndarray:
    """Apply the factor product P_hat = Perm^T L L^T Perm"""
    vp = np.ascontiguousarray(np.asarray(v, dtype=np.float64)[metric.perm])
    t = kernels.lower_transpose_matvec(metric.l_ptr, metric.l_idx, metric.l_val, vp)
    y = kernels.lower_matvec(metric.l_ptr, metric.l_idx, metric.l_val, t)
    out = np.empty_like(y)
    out[metric.perm] = y
    return out


def factor_product_matrix(metric: FactorizedMetric) -> sp.csr_matrix:
    """Sparse P_hat in the original ordering"""
    L = metric.lower_factor()
    product = sp.csr_matrix(L @ L.T)
    return sp.csr_matrix(product[metric.inv_perm][:, metric.inv_perm])


def metric_inner(metric: FactorizedMetric, u: np.ndarray, v: np.ndarray) -> float:
    """u^T P v with the assembled matrix (not the factor)"""
    return float(np.dot(u, metric.matrix @ v))
