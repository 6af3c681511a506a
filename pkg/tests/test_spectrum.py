import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from gp_core.fields import ComplexField
from gp_core.grid import mass_inner
from gp_core.model import lambda_tilde, residual_inf, shifted_hessian_matrix
from gp_core.precond import PrecondSpec, build_metric, factor_apply
from gp_core.diagnostics import q_ratios
from gp_core.riemann import PRGConfig, StageSpec, initial_guess, prg_run
from gp_core.spectrum import (
    DensePencil,
    kernel_basis,
    morse_bott_check,
    optimal_rate,
    ordering_table,
    rate_constants,
    rho_tau,
    sigma_sweep,
    tau_opt,
)

SPEC = PrecondSpec(kind="optimal-shifted", sigma0=0.1, drop_tol=1e-5, ordering="amd")


@pytest.fixture(scope="module")
def vortex_spectrum(vortex_model, vortex_ground_state):
    _, phi_g = vortex_ground_state
    metric = build_metric(vortex_model, phi_g, SPEC)
    kernel = kernel_basis(vortex_model, phi_g, metric)
    pencil = DensePencil(vortex_model, phi_g, metric)
    constants = rate_constants(vortex_model, phi_g, metric, kernel, pencil=pencil)
    return phi_g, metric, kernel, pencil, constants


def test_kernel_basis_is_p_orthonormal_and_tangent(vortex_model, vortex_spectrum):
    phi_g, metric, kernel, _, _ = vortex_spectrum
    assert kernel.labels == ["phase", "rotation"]
    K = kernel.as_matrix()
    gram = K.T @ np.column_stack([factor_apply(metric, v) for v in kernel.vectors])
    assert_allclose(gram, np.eye(2), atol=1e-10)
    for v in kernel.vectors:
        assert abs(mass_inner(vortex_model.grid, phi_g.values, v)) <= 1e-12


def test_kernel_vectors_are_near_null(vortex_model, vortex_spectrum):
    phi_g, metric, kernel, _, constants = vortex_spectrum
    A = shifted_hessian_matrix(vortex_model, phi_g, constants.lambda_tilde)
    for v in kernel.vectors:
        assert abs(v @ (A @ v)) <= 1e-6 * constants.L


def test_rotation_generator_is_dropped_without_symmetry(radial_model, radial_ground_state, vortex_model):
    _, phi_r = radial_ground_state
    metric = build_metric(radial_model, phi_r, SPEC)
    assert kernel_basis(radial_model, phi_r, metric).labels == ["phase"]
    # include_rotation=False keeps only the phase even for a rotating instance
    phi = initial_guess(vortex_model, "vortex-random", seed=0)
    spec = PrecondSpec(kind="kinetic-plus-potential")
    assert kernel_basis(vortex_model, phi, build_metric(vortex_model, phi, spec),
                        include_rotation=False).labels == ["phase"]


def test_morse_bott_on_the_vortex_ground_state(vortex_model, vortex_spectrum):
    phi_g, metric, kernel, pencil, constants = vortex_spectrum
    report = morse_bott_check(vortex_model, phi_g, metric, kernel, pencil=pencil)
    assert report.count_below == 2
    assert report.kernel_size == 2
    assert report.next_eigenvalue > 1e-5 * constants.L
    assert report.consistent
    assert abs(report.k1_rayleigh) <= report.theta0


def test_morse_bott_on_the_radial_ground_state(radial_model, radial_ground_state):
    _, phi_r = radial_ground_state
    metric = build_metric(radial_model, phi_r, SPEC)
    kernel = kernel_basis(radial_model, phi_r, metric)
    report = morse_bott_check(radial_model, phi_r, metric, kernel)
    assert report.count_below == 1
    assert report.consistent


def test_rate_constants_from_the_dense_pencil(vortex_spectrum):
    phi_g, metric, kernel, pencil, constants = vortex_spectrum
    assert constants.solver == "dense"
    assert constants.deflation_dim == 2
    assert 0.0 < constants.mu < constants.L
    assert constants.L_agreement <= 1e-8
    assert_allclose(constants.kappa, constants.L / constants.mu)
    assert_allclose(tau_opt(constants), constants.tau_opt)
    assert_allclose(optimal_rate(constants), constants.rate_opt)
    assert_allclose(rho_tau(constants, constants.tau_opt), constants.rate_opt, rtol=1e-12)
    assert rho_tau(constants, 0.5 * constants.tau_opt) > constants.rate_opt
    assert constants.ordering == "amd" and constants.sigma0 == 0.1
    # deflation removes exactly the kernel
    assert_allclose(pencil.eigenvalues[2], constants.mu, rtol=1e-4)


def test_iterative_path_agrees_with_dense(vortex_model, vortex_spectrum):
    phi_g, metric, kernel, _, constants = vortex_spectrum
    iterative = rate_constants(vortex_model, phi_g, metric, kernel, force_iterative=True)
    assert iterative.solver == "iterative"
    assert iterative.reliable
    assert_allclose(iterative.L, constants.L, rtol=1e-6)
    assert_allclose(iterative.mu, constants.mu, rtol=1e-6)


def test_unconverged_iterative_constants_are_unreliable(vortex_model, vortex_spectrum, caplog):
    phi_g, metric, kernel, _, _ = vortex_spectrum
    with caplog.at_level("WARNING"):
        iterative = rate_constants(vortex_model, phi_g, metric, kernel, force_iterative=True, lobpcg_maxiter=2)
    assert iterative.solver == "iterative"
    assert iterative.reliable is False
    assert "did not converge" in caplog.text


def test_iterative_morse_bott_agrees_with_dense(vortex_model, vortex_spectrum):
    phi_g, metric, kernel, pencil, _ = vortex_spectrum
    dense = morse_bott_check(vortex_model, phi_g, metric, kernel, pencil=pencil)
    iterative = morse_bott_check(vortex_model, phi_g, metric, kernel, dense_cap=0)
    assert iterative.solver == "iterative" and iterative.converged
    assert iterative.count_below == dense.count_below
    assert iterative.consistent == dense.consistent


def test_sigma_sweep_kappa_decreases(vortex_model, vortex_ground_state):
    _, phi_g = vortex_ground_state
    rows = sigma_sweep(vortex_model, phi_g, [1.0, 0.3, 0.1], SPEC, workers=2)
    assert [row.sigma0 for row in rows] == [1.0, 0.3, 0.1]
    kappas = [row.kappa for row in rows]
    assert kappas[0] > kappas[1] > kappas[2]


def test_ordering_table_labels_rows(vortex_model, vortex_ground_state):
    _, phi_g = vortex_ground_state
    seen = []
    rows = ordering_table(vortex_model, phi_g, SPEC, orderings=("amd", "natural"),
                          on_metric=lambda metric, kernel, pencil: seen.append((metric.stats.ordering, kernel.dim,
                                                                               pencil is not None)))
    assert [row.ordering for row in rows] == ["amd", "natural"]
    assert all(row.mu > 0 for row in rows)
    assert seen == [("amd", 2, True), ("natural", 2, True)]


def test_zero_mode_identity_along_a_trace(tiny_model):
    config = PRGConfig(stages=[StageSpec(precond=PrecondSpec(kind="hessian", refresh=10), max_iter=8)],
                       tol_inf=1e-30, snapshot_stride=2)
    trace, _ = prg_run(tiny_model, initial_guess(tiny_model, "vortex-random", seed=0), config)
    n = tiny_model.grid.N
    for _, values in trace.snapshots:
        phi = ComplexField(tiny_model.grid, values)
        lam = lambda_tilde(tiny_model, phi)
        out = shifted_hessian_matrix(tiny_model, phi, lam) @ phi.times_i().values / tiny_model.weights
        assert np.max(np.hypot(out[:n], out[n:])) <= 10.0 * residual_inf(tiny_model, phi)


def _perturbed(phi_g, amplitude, seed):
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(phi_g.values.size) * np.max(np.abs(phi_g.values))
    return ComplexField(phi_g.grid, phi_g.values + amplitude * noise).normalized_copy()


@pytest.mark.parametrize("tau_factor", [0.5, 1.0, 1.5, None])
def test_observed_rate_matches_theory(vortex_model, vortex_spectrum, tau_factor):
    phi_g, metric, _, _, constants = vortex_spectrum
    tau = constants.tau_opt if tau_factor is None else tau_factor / constants.L
    rho = rho_tau(constants, tau)
    expected_steps = int(math.log(1e5) / max(1.0 - rho, 1e-6))
    stride = max(1, expected_steps // 400)
    config = PRGConfig(
        stages=[StageSpec(precond=SPEC.model_copy(update={"refresh": 10 ** 6}), max_iter=20 * expected_steps, tau=tau)],
        tol_inf=1e-11,
        snapshot_stride=stride,
        snapshot_memory=4000,
    )
    trace, phi_ref = prg_run(vortex_model, _perturbed(phi_g, 1e-3, seed=21), config)
    assert trace.status == "converged"
    report = q_ratios(trace, phi_ref, metric, window=50, distance_floor=1e-7)
    assert report.q_phi_tail is not None
    assert abs(report.q_phi_tail - rho) <= 0.05
