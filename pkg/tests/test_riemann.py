import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from gp_core.fields import ComplexField
from gp_core.grid import mass_inner, mass_norm
from gp_core import model as gp_model
from gp_core import riemann
from gp_core.model import energy, euclid_grad, lambda_tilde, residual_inf
from gp_core.precond import PrecondSpec, build_metric, metric_inner
from gp_core.riemann import (
    TRACE_COLUMNS,
    IterTrace,
    PRGConfig,
    SnapshotStore,
    StageSpec,
    TraceRow,
    initial_guess,
    prg_run,
    retract,
    riemannian_grad,
    tangent_project_L2,
)
from gp_core.spectrum import RateConstants


def _tiny_config(**overrides):
    base = dict(
        stages=[StageSpec(precond=PrecondSpec(kind="hessian", refresh=20), max_iter=3000, tau=1.0)],
        tol_inf=1e-10,
        snapshot_stride=1,
    )
    base.update(overrides)
    return PRGConfig(**base)


@pytest.fixture(scope="module")
def tiny_run(tiny_model):
    phi0 = initial_guess(tiny_model, "vortex-random", seed=0)
    return prg_run(tiny_model, phi0, _tiny_config())


@pytest.mark.parametrize("kind", ["identity-mass", "kinetic-plus-potential", "hessian", "optimal-shifted"])
def test_gradient_is_tangent(tiny_model, kind):
    phi = initial_guess(tiny_model, "vortex-random", seed=1)
    metric = build_metric(tiny_model, phi, PrecondSpec(kind=kind, drop_tol=1e-4))
    g, lam_p = riemannian_grad(tiny_model, phi, metric)
    assert abs(mass_inner(tiny_model.grid, phi.values, g)) <= 1e-12 * max(mass_norm(tiny_model.grid, g), 1.0)
    assert math.isfinite(lam_p)


def test_mass_metric_gradient_is_the_l2_gradient(tiny_model):
    phi = initial_guess(tiny_model, "vortex-random", seed=2)
    metric = build_metric(tiny_model, None, PrecondSpec(kind="identity-mass"))
    g, lam_p = riemannian_grad(tiny_model, phi, metric)
    expected = tangent_project_L2(phi, euclid_grad(tiny_model, phi) / tiny_model.weights)
    assert_allclose(g, expected, atol=1e-12 * np.max(np.abs(expected)))
    assert_allclose(lam_p, lambda_tilde(tiny_model, phi), rtol=1e-12)


def test_retract_normalizes_and_rejects_collapse(tiny_model):
    phi = initial_guess(tiny_model, "gaussian")
    d = np.random.default_rng(0).standard_normal(tiny_model.grid.dim)
    assert abs(retract(phi, d, 0.3).mass_norm - 1.0) <= 1e-14
    with pytest.raises(RuntimeError):
        retract(phi, -phi.values, 1.0)


def test_initial_guess_kinds(tiny_model):
    for kind in ("gaussian", "vortex", "random", "vortex-random"):
        assert initial_guess(tiny_model, kind, seed=3).normalized
    assert_array_equal(initial_guess(tiny_model, "random", seed=5).values,
                       initial_guess(tiny_model, "random", seed=5).values)
    with pytest.raises(ValueError):
        initial_guess(tiny_model, "plane-wave")


def test_run_converges_with_unit_mass_and_decreasing_energy(tiny_run):
    trace, phi = tiny_run
    assert trace.status == "converged"
    assert trace.last.residual_inf <= 1e-10
    for _, values in trace.snapshots:
        assert abs(mass_norm(phi.grid, values) - 1.0) <= 1e-14
    energies = trace.column("energy")
    assert energies[-1] < energies[0]
    assert not trace.energy_increases()
    assert trace.column("n")[0] == 0


def test_run_is_deterministic(tiny_model, tiny_run):
    trace, _ = tiny_run
    again, _ = prg_run(tiny_model, initial_guess(tiny_model, "vortex-random", seed=0), _tiny_config())
    columns = [c for c in TRACE_COLUMNS if c != "wall_ms"]
    for name in columns:
        assert_array_equal(trace.column(name), again.column(name))


def test_converged_start_gives_a_single_row(tiny_model, tiny_run):
    _, phi = tiny_run
    trace, out = prg_run(tiny_model, phi, _tiny_config())
    assert len(trace) == 1 and trace.status == "converged"
    assert_array_equal(out.values, phi.values)


def test_stage_switch_and_metric_refresh_events(tiny_model):
    config = PRGConfig(
        stages=[
            StageSpec(precond=PrecondSpec(kind="kinetic-plus-potential", refresh=1000), max_iter=5),
            StageSpec(precond=PrecondSpec(kind="hessian", refresh=3), max_iter=7),
        ],
        tol_inf=1e-30,
    )
    trace, _ = prg_run(tiny_model, initial_guess(tiny_model, "vortex-random", seed=0), config)
    assert trace.status == "max_iter"
    assert len(trace) == 13
    switches = [e for e in trace.events if e["kind"] == "stage_switch"]
    assert [e["n"] for e in switches] == [5]
    builds = [e["n"] for e in trace.events if e["kind"] == "metric_build"]
    assert builds == [0, 5, 8, 11]


def test_iteration_cap(tiny_model):
    trace, _ = prg_run(tiny_model, initial_guess(tiny_model, "vortex-random", seed=0),
                       _tiny_config(tol_inf=1e-30, max_total_iter=4, snapshot_stride=0))
    assert trace.status == "iteration_cap"
    assert trace.last.n == 4


def test_optimal_step_needs_constants(tiny_model):
    config = _tiny_config(stages=[StageSpec(precond=PrecondSpec(kind="hessian"), step_rule="optimal")])
    with pytest.raises(ValueError):
        prg_run(tiny_model, initial_guess(tiny_model, "gaussian"), config)


def _fake_constants(mu, L):
    return RateConstants(mu=mu, L=L, kappa=L / mu, tau_opt=2.0 / (L + mu), rate_opt=(L - mu) / (L + mu),
                         solver="dense", deflation_dim=1, L_no_deflation=L, L_agreement=0.0,
                         lambda_tilde=0.0, lambda_p=0.0, lambda_discrepancy=0.0, residual_inf=0.0)


def test_optimal_step_uses_tau_opt(tiny_model):
    constants = _fake_constants(0.5, 1.5)
    config = _tiny_config(stages=[StageSpec(precond=PrecondSpec(kind="hessian"), step_rule="optimal", max_iter=3)],
                          tol_inf=1e-30)
    trace, _ = prg_run(tiny_model, initial_guess(tiny_model, "gaussian"), config, constants=constants)
    assert_allclose(trace.column("tau"), 1.0)


def test_inline_constants_evaluated_once_at_the_optimal_stage(tiny_model):
    calls = []

    def provider(phi):
        calls.append(phi.fingerprint())
        return _fake_constants(0.25, 1.75)

    config = _tiny_config(
        stages=[
            StageSpec(precond=PrecondSpec(kind="hessian"), max_iter=2),
            StageSpec(precond=PrecondSpec(kind="hessian"), step_rule="optimal", max_iter=4),
        ],
        tol_inf=1e-30,
    )
    trace, _ = prg_run(tiny_model, initial_guess(tiny_model, "vortex-random", seed=0), config, constants=provider)
    assert len(calls) == 1
    inline = [e for e in trace.events if e["kind"] == "inline_spectrum"]
    assert len(inline) == 1 and inline[0]["n"] == 2
    assert_allclose(trace.column("tau")[2:], 1.0)


def test_energy_increase_is_recorded(tiny_model, caplog):
    # a huge step overshoots
    config = _tiny_config(stages=[StageSpec(precond=PrecondSpec(kind="identity-mass"), max_iter=5, tau=50.0)],
                          tol_inf=1e-30)
    with caplog.at_level("WARNING"):
        trace, _ = prg_run(tiny_model, initial_guess(tiny_model, "vortex-random", seed=0), config)
    assert trace.energy_increases()
    assert "Energy increased" in caplog.text


def test_unnormalized_start_is_rejected(tiny_model):
    phi = initial_guess(tiny_model, "gaussian")
    with pytest.raises(ValueError):
        prg_run(tiny_model, ComplexField(phi.grid, 2.0 * phi.values), _tiny_config())


def test_trace_csv_and_snapshots_round_trip(tmp_path, tiny_run):
    trace, _ = tiny_run
    trace.write_csv(tmp_path / "trace.csv")
    trace.save_snapshots(tmp_path / "snapshots.npz")
    loaded = IterTrace.read_csv(tmp_path / "trace.csv")
    loaded.load_snapshots(tmp_path / "snapshots.npz")
    assert loaded.status == trace.status
    assert loaded.snapshot_stride == 1
    assert_array_equal(loaded.column("energy"), trace.column("energy"))
    assert len(loaded.snapshots) == len(trace.snapshots)
    assert_array_equal(loaded.snapshots.last[1], trace.snapshots.last[1])
    assert [e["kind"] for e in loaded.events] == [e["kind"] for e in trace.events]


def test_trace_rejects_bad_rows():
    trace = IterTrace()
    trace.append(TraceRow(0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0))
    with pytest.raises(ValueError):
        trace.append(TraceRow(0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0))
    with pytest.raises(ValueError):
        trace.append(TraceRow(1, float("nan"), 0.0, 0.0, 1.0, 1.0, 1.0, 0.0))


def test_read_csv_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        IterTrace.read_csv(tmp_path / "missing.csv")
    bad = tmp_path / "bad.csv"
    bad.write_text("n,energy\n0,1.0\n")
    with pytest.raises(ValueError):
        IterTrace.read_csv(bad)


def test_grad_pnorm_is_the_metric_norm(tiny_model):
    phi = initial_guess(tiny_model, "vortex-random", seed=8)
    spec = PrecondSpec(kind="kinetic-plus-potential")
    trace, _ = prg_run(tiny_model, phi, _tiny_config(
        stages=[StageSpec(precond=spec, max_iter=1)], tol_inf=1e-30))
    metric = build_metric(tiny_model, phi, spec)
    g, _ = riemannian_grad(tiny_model, phi, metric)
    assert_allclose(trace.rows[0].grad_pnorm, math.sqrt(metric_inner(metric, g, g)), rtol=1e-14)
    assert_allclose(trace.rows[0].energy, energy(tiny_model, phi), rtol=0)


def _random_tangent(phi, seed):
    v = np.random.default_rng(seed).standard_normal(phi.values.shape[0])
    return tangent_project_L2(phi, v)


def test_tangent_projection_is_idempotent_and_keeps_i_phi(tiny_model):
    phi = initial_guess(tiny_model, "vortex-random", seed=11)
    grid = tiny_model.grid
    v = np.random.default_rng(3).standard_normal(grid.dim)
    once = tangent_project_L2(phi, v)
    assert_allclose(tangent_project_L2(phi, once), once, rtol=0, atol=1e-14 * np.max(np.abs(once)))
    assert abs(mass_inner(grid, phi.values, once)) <= 1e-13 * mass_norm(grid, v)
    assert_allclose(tangent_project_L2(phi, phi.values), 0.0, atol=1e-14)
    i_phi = phi.times_i().values
    assert_allclose(tangent_project_L2(phi, i_phi), i_phi, rtol=0, atol=1e-14)


def test_retraction_on_a_single_complex_node(tiny_model):
    # weights 1 after scaling: phi = (1, 0) and d = (0, 1) in (Re, Im) of node 0
    grid = tiny_model.grid
    scale = 1.0 / math.sqrt(grid.node_weights[0])
    phi_values = np.zeros(grid.dim)
    phi_values[0] = scale
    d = np.zeros(grid.dim)
    d[grid.N] = scale
    out = retract(ComplexField(grid, phi_values), d, 1.0)
    assert_allclose(out.values[[0, grid.N]], scale / math.sqrt(2.0) * np.ones(2), rtol=1e-15)
    assert np.count_nonzero(out.values) == 2
    assert_allclose(retract(ComplexField(grid, phi_values), np.zeros(grid.dim), 1.0).values, phi_values, rtol=1e-15)


@pytest.mark.parametrize("tau", [1.0, 1e-1, 1e-2, 1e-3])
def test_retraction_is_second_order(tiny_model, tau):
    phi = initial_guess(tiny_model, "vortex-random", seed=12)
    grid = tiny_model.grid
    v = _random_tangent(phi, seed=int(1 / tau))
    step = phi.values + tau * v
    gap = mass_norm(grid, retract(phi, v, tau).values - step)
    assert gap <= 0.5 * tau ** 2 * mass_norm(grid, v) ** 2 * mass_norm(grid, step) * (1.0 + 1e-12)
    # for tangent v the gap is exactly sqrt(1 + tau^2 |v|^2) - 1
    assert_allclose(gap, math.sqrt(1.0 + tau ** 2 * mass_norm(grid, v) ** 2) - 1.0, rtol=1e-6)


def test_multiplier_is_phase_invariant(tiny_model):
    phi = initial_guess(tiny_model, "vortex-random", seed=13)
    spec = PrecondSpec(kind="kinetic-plus-potential")
    metric = build_metric(tiny_model, phi, spec)
    _, lam = riemannian_grad(tiny_model, phi, metric)
    _, lam_rotated = riemannian_grad(tiny_model, phi.phase_rotated(0.7), metric)
    assert_allclose(lam_rotated, lam, rtol=1e-13)


@pytest.mark.parametrize("kind, alpha", [
    ("kinetic-plus-potential", 0.7),
    ("hessian", None),
])
def test_runs_from_a_phase_rotated_start_give_the_same_energies(tiny_model, kind, alpha):
    phi0 = initial_guess(tiny_model, "vortex-random", seed=14)
    # alpha=None: multiply by i, where the realified rotation is exact
    rotated = phi0.times_i() if alpha is None else phi0.phase_rotated(alpha)
    config = _tiny_config(stages=[StageSpec(precond=PrecondSpec(kind=kind, drop_tol=0.0, refresh=5), max_iter=20)],
                          tol_inf=1e-30, snapshot_stride=0)
    trace, _ = prg_run(tiny_model, phi0, config)
    again, _ = prg_run(tiny_model, rotated, config)
    assert_allclose(again.column("energy"), trace.column("energy"), rtol=1e-10)
    assert_allclose(again.column("lambda_tilde"), trace.column("lambda_tilde"), rtol=1e-10)


def test_each_iteration_evaluates_the_gradient_once(tiny_model, monkeypatch):
    calls = []
    original = gp_model.euclid_grad

    def counting(model, phi):
        calls.append(1)
        return original(model, phi)

    monkeypatch.setattr(gp_model, "euclid_grad", counting)
    monkeypatch.setattr(riemann, "euclid_grad", counting)
    config = _tiny_config(stages=[StageSpec(precond=PrecondSpec(kind="hessian"), max_iter=6)],
                          tol_inf=1e-30, snapshot_stride=0)
    trace, phi = prg_run(tiny_model, initial_guess(tiny_model, "vortex-random", seed=15), config)
    assert len(calls) == len(trace)
    monkeypatch.undo()
    assert_allclose(trace.last.residual_inf, residual_inf(tiny_model, phi), rtol=1e-14)
    assert_allclose(trace.last.lambda_tilde, lambda_tilde(tiny_model, phi), rtol=1e-14)


def test_snapshots_spill_to_chunks_beyond_the_memory_tail(tmp_path):
    store = SnapshotStore(memory=3, spill_dir=tmp_path / "snapshots")
    for n in range(10):
        store.append(n, np.full(4, float(n)))
    assert len(store) == 10
    assert len(store.tail) <= 3
    assert len(store.chunks) == 3 and all(p.exists() for p in store.chunks)
    assert [n for n, _ in store] == list(range(10))
    assert all(np.all(values == n) for n, values in store)

    store.save(tmp_path / "snapshots.npz", stride=2)
    loaded, stride = SnapshotStore.load(tmp_path / "snapshots.npz")
    assert stride == 2 and len(loaded) == 10
    assert [n for n, _ in loaded] == list(range(10))

    store.chunks[0].unlink()
    with pytest.raises(FileNotFoundError):
        SnapshotStore.load(tmp_path / "snapshots.npz")


def test_snapshots_without_a_spill_directory_keep_the_tail():
    store = SnapshotStore(memory=4)
    for n in range(10):
        store.append(n, np.zeros(2))
    assert [n for n, _ in store] == [6, 7, 8, 9]
    assert store.discarded == 6 and not store.chunks


def test_run_streams_snapshots_to_disk(tiny_model, tmp_path):
    config = _tiny_config(stages=[StageSpec(precond=PrecondSpec(kind="hessian"), max_iter=12)],
                          tol_inf=1e-30, snapshot_stride=1, snapshot_memory=5)
    trace, _ = prg_run(tiny_model, initial_guess(tiny_model, "vortex-random", seed=16), config,
                       snapshot_dir=tmp_path / "snapshots")
    assert len(trace.snapshots) == len(trace) == 13
    assert len(trace.snapshots.tail) <= 5
    assert [n for n, _ in trace.snapshots] == list(range(13))
    for _, values in trace.snapshots:
        assert abs(mass_norm(tiny_model.grid, values) - 1.0) <= 1e-14
