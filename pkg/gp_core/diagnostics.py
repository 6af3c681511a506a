#!/usr/bin/env python3
"""
Post-processing of P-RG traces: error ratios, distance to the symmetry orbit
of the reference state, and linear vs sublinear regime fits.
"""

import csv
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from gp_core.fields import ComplexField
from gp_core.precond import FactorizedMetric, metric_inner
from gp_core.riemann import IterTrace
from gp_core.spectrum import RateConstants, rho_tau

logger = logging.getLogger(__name__)

EPS = np.finfo(float).eps
MIN_RATIO_POINTS = 10
MIN_FIT_POINTS = 100
DISTANCE_FLOOR = 1e-10


class RegimeFit(BaseModel):
    nu_hat: Optional[float] = None
    slope_power: Optional[float] = None
    slope_linear: Optional[float] = None
    residual_linear: Optional[float] = None
    residual_power: Optional[float] = None
    residual: Optional[float] = None
    regime: str = "undetermined"
    points: int = 0


class RateReport(BaseModel):
    n: List[int]
    q_e: List[Optional[float]]
    q_phi: List[Optional[float]]
    window: int
    skip_last: int
    usable_q_e: int
    usable_q_phi: int
    q_e_tail: Optional[float] = None
    q_phi_tail: Optional[float] = None
    tau: Optional[float] = None
    rho_tau: Optional[float] = None
    delta_e: Optional[float] = None
    delta_phi: Optional[float] = None
    fit: Optional[RegimeFit] = None
    orbit_distance: List[Optional[float]] = Field(default_factory=list)
    orbit_distance_first: Optional[float] = None
    orbit_distance_last: Optional[float] = None

    @property
    def regime(self) -> str:
        return self.fit.regime if self.fit else "undetermined"


def _tail_mean(values: List[Optional[float]], window: int, skip_last: int) -> Tuple[Optional[float], int]:
    usable = [v for v in values if v is not None]
    if skip_last:
        usable = usable[:-skip_last] if len(usable) > skip_last else []
    tail = usable[-window:]
    if not tail:
        return None, 0
    return float(np.mean(tail)), len(tail)


def energy_ratios(trace: IterTrace) -> Dict[int, Optional[float]]:
    """Q_E(n) = sqrt(gap(n+1) / gap(n)), masked where a gap is at the noise floor"""
    energies = trace.column("energy")
    ns = [row.n for row in trace.rows]
    e_ref = trace.final_energy
    floor = 10.0 * EPS * abs(e_ref)
    gaps = energies - e_ref
    ratios: Dict[int, Optional[float]] = {}
    for k in range(len(ns) - 1):
        if gaps[k] > floor and gaps[k + 1] > floor:
            ratios[ns[k]] = math.sqrt(gaps[k + 1] / gaps[k])
        else:
            ratios[ns[k]] = None
    return ratios


def state_ratios(trace: IterTrace, phi_g: ComplexField, metric: FactorizedMetric,
                 distance_floor: float = DISTANCE_FLOOR) -> Dict[int, Optional[float]]:
    """Q_phi per iteration from snapshots in the assembled-P norm.

    Snapshots s iterations apart give (d_{k+1}/d_k)^(1/s).
    """
    ratios: Dict[int, Optional[float]] = {}
    if len(trace.snapshots) < 2:
        return ratios
    scale = math.sqrt(max(metric_inner(metric, phi_g.values, phi_g.values), 0.0))
    floor = distance_floor * scale
    points = []
    for n, values in trace.snapshots:
        diff = values - phi_g.values
        points.append((n, math.sqrt(max(metric_inner(metric, diff, diff), 0.0))))
    for (n0, d0), (n1, d1) in zip(points, points[1:]):
        if d0 > floor and d1 > floor and n1 > n0:
            ratios[n0] = (d1 / d0) ** (1.0 / (n1 - n0))
        else:
            ratios[n0] = None
    return ratios


def q_ratios(trace: IterTrace, phi_g: Optional[ComplexField] = None, metric: Optional[FactorizedMetric] = None,
             window: int = 200, skip_last: int = 0, distance_floor: float = DISTANCE_FLOOR) -> RateReport:
    """Error ratio sequences, their tail averages and the snapshot distances to the orbit of phi_g"""
    q_e = energy_ratios(trace)
    q_phi = state_ratios(trace, phi_g, metric, distance_floor) if (phi_g is not None and metric is not None) else {}
    orbit = orbit_distances(trace, phi_g) if phi_g is not None else {}

    usable_e = sum(1 for v in q_e.values() if v is not None)
    if usable_e < MIN_RATIO_POINTS:
        raise ValueError(f"Only {usable_e} usable energy ratios (need {MIN_RATIO_POINTS})")

    ns = sorted(set(q_e) | set(q_phi) | set(orbit))
    e_list = [q_e.get(n) for n in ns]
    phi_list = [q_phi.get(n) for n in ns]
    e_tail, _ = _tail_mean([q_e[n] for n in sorted(q_e)], window, skip_last)
    phi_tail, _ = _tail_mean([q_phi[n] for n in sorted(q_phi)], window, skip_last)
    if q_phi and phi_tail is None:
        logger.warning("No usable state ratios in the tail window")

    return RateReport(
        n=ns,
        q_e=e_list,
        q_phi=phi_list,
        window=window,
        skip_last=skip_last,
        usable_q_e=usable_e,
        usable_q_phi=sum(1 for v in q_phi.values() if v is not None),
        q_e_tail=e_tail,
        q_phi_tail=phi_tail,
        orbit_distance=[orbit.get(n) for n in ns] if orbit else [],
        orbit_distance_first=orbit[min(orbit)] if orbit else None,
        orbit_distance_last=orbit[max(orbit)] if orbit else None,
    )


def orbit_distance(phi: ComplexField, phi_g: ComplexField) -> Tuple[float, float, int]:
    """min over phase alpha and grid rotation k of ||phi - e^{i alpha} shift_k(phi_g)||_L2.

    The pairing c_k = sum_i w_i sum_j phi_ij conj(phi_g)_{i, j-k} is computed for
    all k at once by FFT along theta; the distance is then re-evaluated directly.
    """
    grid = phi.grid
    if not grid.same_as(phi_g.grid):
        raise ValueError("orbit_distance needs both fields on the same grid")
    a = phi.to_complex().reshape(grid.Nr, grid.Ntheta)
    b = phi_g.to_complex().reshape(grid.Nr, grid.Ntheta)
    corr = np.fft.ifft(np.fft.fft(a, axis=1) * np.conj(np.fft.fft(b, axis=1)), axis=1)
    ring_w = grid.r_nodes * grid.h_r * grid.h_theta
    pairing = ring_w @ corr
    k_hat = int(np.argmax(np.abs(pairing)))
    alpha_hat = float(np.angle(pairing[k_hat]))

    aligned = phi_g.shifted(k_hat).phase_rotated(alpha_hat)
    diff = phi.values - aligned.values
    distance = math.sqrt(max(float(np.dot(grid.weights2 * diff, diff)), 0.0))
    return distance, alpha_hat, k_hat


def orbit_distances(trace: IterTrace, phi_g: ComplexField) -> Dict[int, float]:
    """orbit_distance of every stored snapshot to phi_g"""
    return {n: orbit_distance(ComplexField(phi_g.grid, values), phi_g)[0] for n, values in trace.snapshots}


def loja_fit(trace: IterTrace, min_points: int = MIN_FIT_POINTS) -> RegimeFit:
    """Fit log energy gap against n (linear regime) and log n (sublinear regime).

    The smaller RMS residual wins; within 10% of each other the regime is
    undetermined. A power-law slope s < -1 maps to the gradient-inequality
    exponent nu = (s + 1) / (2 s).
    """
    energies = trace.column("energy")
    ns = np.array([row.n for row in trace.rows], dtype=float)
    e_ref = trace.final_energy
    gaps = energies - e_ref
    mask = (gaps > 10.0 * EPS * max(abs(e_ref), EPS)) & (ns >= 1)
    points = int(mask.sum())
    if points < min_points:
        logger.warning(f"Regime fit needs {min_points} points above the noise floor, got {points}")
        return RegimeFit(points=points)

    n_used = ns[mask]
    log_gap = np.log(gaps[mask])

    def rms_fit(x: np.ndarray) -> Tuple[float, float]:
        design = np.column_stack([np.ones_like(x), x])
        coeffs, _, _, _ = np.linalg.lstsq(design, log_gap, rcond=None)
        resid = log_gap - design @ coeffs
        return float(coeffs[1]), float(np.sqrt(np.mean(resid ** 2)))

    slope_lin, res_lin = rms_fit(n_used)
    slope_pow, res_pow = rms_fit(np.log(n_used))

    if abs(res_lin - res_pow) <= 0.1 * max(res_lin, res_pow):
        regime = "undetermined"
    elif res_lin < res_pow:
        regime = "linear"
    else:
        regime = "sublinear"

    nu_hat = None
    if slope_pow < -1.0:
        nu = (slope_pow + 1.0) / (2.0 * slope_pow)
        if 0.0 < nu < 0.5:
            nu_hat = nu

    return RegimeFit(
        nu_hat=nu_hat,
        slope_power=slope_pow,
        slope_linear=slope_lin,
        residual_linear=res_lin,
        residual_power=res_pow,
        residual=min(res_lin, res_pow),
        regime=regime,
        points=points,
    )


def rate_report(trace: IterTrace, phi_g: Optional[ComplexField] = None, metric: Optional[FactorizedMetric] = None,
                constants: Optional[RateConstants] = None, tau: Optional[float] = None,
                window: int = 200, skip_last: int = 0, min_fit_points: int = MIN_FIT_POINTS) -> RateReport:
    """Error ratios, theoretical rate and regime classification in one report"""
    report = q_ratios(trace, phi_g, metric, window=window, skip_last=skip_last)
    report.fit = loja_fit(trace, min_points=min_fit_points)
    if constants is not None:
        tau = trace.last.tau if tau is None else tau
        report.tau = tau
        report.rho_tau = rho_tau(constants, tau)
        if report.q_e_tail is not None:
            report.delta_e = abs(report.q_e_tail - report.rho_tau)
        if report.q_phi_tail is not None:
            report.delta_phi = abs(report.q_phi_tail - report.rho_tau)
    logger.info(
        f"Rate report: Q_E tail={report.q_e_tail}, Q_phi tail={report.q_phi_tail}, "
        f"rho_tau={report.rho_tau}, regime={report.regime}"
    )
    return report


def write_q_csv(path: Union[str, Path], report: RateReport):
    """`n,q_e,q_phi[,orbit_distance]` with empty cells where a value is masked"""
    orbit = report.orbit_distance or [None] * len(report.n)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["n", "q_e", "q_phi"] + (["orbit_distance"] if report.orbit_distance else []))
        for n, qe, qp, od in zip(report.n, report.q_e, report.q_phi, orbit):
            row = [n] + ["" if v is None else f"{v:.17g}" for v in (qe, qp)]
            if report.orbit_distance:
                row.append("" if od is None else f"{od:.17g}")
            writer.writerow(row)
