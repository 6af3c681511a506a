import csv
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from gp_core.diagnostics import (
    energy_ratios,
    loja_fit,
    orbit_distance,
    q_ratios,
    rate_report,
    state_ratios,
    write_q_csv,
)
from gp_core.precond import PrecondSpec, build_metric
from gp_core.riemann import IterTrace, TraceRow, initial_guess
from gp_core.spectrum import RateConstants

LENGTH = 200


def _trace(gaps, start=1, reference=0.0):
    trace = IterTrace(reference_energy=reference)
    for k, gap in enumerate(gaps):
        trace.append(TraceRow(start + k, reference + gap, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0))
    return trace


def _geometric(q, c=1.0):
    n = np.arange(1, LENGTH + 1)
    return c * q ** n


def _power(p, c=1.0):
    n = np.arange(1, LENGTH + 1, dtype=float)
    return c * n ** (-p)


def test_energy_ratio_of_a_geometric_sequence():
    ratios = energy_ratios(_trace(_geometric(0.9025)))
    usable = [v for v in ratios.values() if v is not None]
    assert len(usable) == LENGTH - 1
    assert_allclose(usable, 0.95, rtol=1e-10)


def test_energy_ratios_masked_at_the_noise_floor():
    gaps = _geometric(0.5)
    ratios = energy_ratios(_trace(gaps, reference=1.0))
    # 0.5^n drops below 10 eps after about 48 steps
    assert ratios[100] is None
    assert ratios[1] is not None


@pytest.mark.parametrize("q", np.linspace(0.86, 0.97, 10))
def test_regime_classifier_geometric(q):
    fit = loja_fit(_trace(_geometric(q, c=0.3)))
    assert fit.regime == "linear"
    assert_allclose(fit.slope_linear, math.log(q), rtol=1e-8)


@pytest.mark.parametrize("p", np.linspace(1.2, 4.0, 10))
def test_regime_classifier_power_law(p):
    fit = loja_fit(_trace(_power(p, c=0.5)))
    assert fit.regime == "sublinear"
    assert_allclose(fit.slope_power, -p, rtol=1e-8)
    assert_allclose(fit.nu_hat, (p - 1.0) / (2.0 * p), rtol=1e-8)


def test_regime_fit_needs_enough_points():
    fit = loja_fit(_trace(_geometric(0.9)[:50]))
    assert fit.regime == "undetermined"
    assert fit.points == 50
    assert loja_fit(_trace(_geometric(0.9)[:50]), min_points=20).regime == "linear"


def test_q_ratios_need_ten_usable_points():
    with pytest.raises(ValueError):
        q_ratios(_trace(_geometric(0.9)[:5]))


def test_tail_window_and_skip_last():
    gaps = np.concatenate([_geometric(0.9025)[:100], 0.9025 ** 100 * _geometric(0.81)[:100]])
    report = q_ratios(_trace(gaps), window=20)
    assert report.usable_q_e == 2 * 100 - 1
    assert_allclose(report.q_e_tail, 0.9, rtol=1e-8)
    report = q_ratios(_trace(gaps), window=20, skip_last=120)
    assert_allclose(report.q_e_tail, 0.95, rtol=1e-8)


def test_state_ratios_take_the_stride_root(tiny_model):
    phi_g = initial_guess(tiny_model, "gaussian")
    metric = build_metric(tiny_model, None, PrecondSpec(kind="identity-mass"))
    direction = np.random.default_rng(0).standard_normal(tiny_model.grid.dim)
    trace = _trace(_geometric(0.9)[:30], start=0)
    stride = 3
    for n in range(0, 30, stride):
        trace.add_snapshot(n, phi_g.values + 1e-1 * 0.7 ** n * direction)
    ratios = state_ratios(trace, phi_g, metric)
    usable = [v for v in ratios.values() if v is not None]
    assert len(usable) == len(trace.snapshots) - 1
    assert_allclose(usable, 0.7, rtol=1e-8)


def test_rate_report_compares_with_theory():
    constants = RateConstants(mu=0.1, L=1.0, kappa=10.0, tau_opt=2.0 / 1.1, rate_opt=0.9 / 1.1,
                              solver="dense", deflation_dim=1, L_no_deflation=1.0, L_agreement=0.0,
                              lambda_tilde=1.0, lambda_p=1.0, lambda_discrepancy=0.0, residual_inf=0.0)
    # rho(1) = 0.9, so gaps shrink by 0.81
    report = rate_report(_trace(_geometric(0.81)), constants=constants, window=50, min_fit_points=100)
    assert_allclose(report.rho_tau, 0.9)
    assert report.delta_e <= 1e-10
    assert report.delta_phi is None
    assert report.regime == "linear"


def test_write_q_csv_leaves_masked_cells_empty(tmp_path):
    report = q_ratios(_trace(_geometric(0.5), reference=1.0))
    path = tmp_path / "q.csv"
    write_q_csv(path, report)
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    assert rows[0]["q_e"] and rows[-1]["q_e"] == ""
    assert all(row["q_phi"] == "" for row in rows)


def test_orbit_distance_recovers_phase_and_rotation(vortex_model):
    phi = initial_guess(vortex_model, "random", seed=9)
    moved = phi.shifted(5).phase_rotated(0.4)
    distance, alpha, k = orbit_distance(moved, phi)
    assert k == 5
    assert_allclose(alpha, 0.4, atol=1e-12)
    assert distance <= 1e-12
    other = initial_guess(vortex_model, "random", seed=10)
    assert orbit_distance(other, phi)[0] > 0.1


def test_orbit_distance_needs_matching_grids(tiny_model, vortex_model):
    with pytest.raises(ValueError):
        orbit_distance(initial_guess(tiny_model, "gaussian"), initial_guess(vortex_model, "gaussian"))


def test_q_ratios_report_the_orbit_distance_of_each_snapshot(tiny_model, tmp_path):
    phi_g = initial_guess(tiny_model, "vortex-random", seed=3)
    metric = build_metric(tiny_model, None, PrecondSpec(kind="identity-mass"))
    direction = np.random.default_rng(1).standard_normal(tiny_model.grid.dim)
    trace = _trace(_geometric(0.9)[:30], start=0)
    for n in range(0, 30, 5):
        # rotated copies of phi_g plus a shrinking error
        moved = phi_g.shifted(3).phase_rotated(1.1)
        trace.add_snapshot(n, moved.values + 1e-2 * 0.5 ** n * direction)
    report = q_ratios(trace, phi_g, metric, window=10)
    distances = [d for d in report.orbit_distance if d is not None]
    assert len(distances) == 6
    assert np.all(np.diff(distances) < 0)
    assert report.orbit_distance_first == distances[0]
    error = 1e-2 * 0.5 ** 25 * np.linalg.norm(direction * np.sqrt(tiny_model.weights))
    assert report.orbit_distance_last <= error * (1.0 + 1e-8)
    # the plain distance does not see the symmetry
    assert report.q_phi_tail > 0.9

    path = tmp_path / "q.csv"
    write_q_csv(path, report)
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    assert [row["n"] for row in rows if row["orbit_distance"]] == ["0", "5", "10", "15", "20", "25"]
