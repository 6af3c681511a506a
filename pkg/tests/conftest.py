"""
Shared instances for the test suite.

The desk-scale rotating instance (R=8, 32 x 64, eta=100, Omega=0.8) is
solved once per session; spectral tests reuse its ground state.
"""

import os

import pytest

from gp_core.grid import build_grid
from gp_core.model import Nonlinearity, build_model
from gp_core.precond import PrecondSpec
from gp_core.riemann import PRGConfig, StageSpec, initial_guess, prg_run

SMALL = dict(R=8.0, Nr=32, Ntheta=64)
SMALL_ETA = 100.0
SMALL_OMEGA = 0.8


def pytest_collection_modifyitems(config, items):
    if os.getenv("GP_RUN_LONG", "0") == "1":
        return
    skip_long = pytest.mark.skip(reason="production-size run; set GP_RUN_LONG=1")
    for item in items:
        if "long" in item.keywords:
            item.add_marker(skip_long)


def ground_state_config(tol_inf: float = 1e-11, snapshot_stride: int = 0) -> PRGConfig:
    """Hessian warm-up followed by the optimal-shifted metric at tau = 1"""
    return PRGConfig(
        stages=[
            StageSpec(precond=PrecondSpec(kind="hessian", refresh=100), max_iter=2000, tau=1.0),
            StageSpec(precond=PrecondSpec(kind="optimal-shifted", sigma0=0.1, drop_tol=1e-5, refresh=100),
                      max_iter=100000, tau=1.0),
        ],
        tol_inf=tol_inf,
        snapshot_stride=snapshot_stride,
    )


@pytest.fixture(scope="session")
def tiny_grid():
    return build_grid(6.0, 8, 16)


@pytest.fixture(scope="session")
def tiny_model(tiny_grid):
    return build_model(tiny_grid, "harmonic", omega=0.5, nonlinearity=Nonlinearity(kind="cubic", eta=10.0))


@pytest.fixture(scope="session")
def small_grid():
    return build_grid(**SMALL)


@pytest.fixture(scope="session")
def vortex_model(small_grid):
    return build_model(small_grid, "harmonic", omega=SMALL_OMEGA,
                       nonlinearity=Nonlinearity(kind="cubic", eta=SMALL_ETA))


@pytest.fixture(scope="session")
def radial_model(small_grid):
    return build_model(small_grid, "harmonic", omega=0.0,
                       nonlinearity=Nonlinearity(kind="cubic", eta=SMALL_ETA))


@pytest.fixture(scope="session")
def vortex_start(vortex_model):
    return initial_guess(vortex_model, "vortex-random", seed=0)


@pytest.fixture(scope="session")
def vortex_ground_state(vortex_model, vortex_start):
    trace, phi = prg_run(vortex_model, vortex_start, ground_state_config())
    assert trace.status == "converged", f"vortex ground state did not converge: {trace.status}"
    return trace, phi


@pytest.fixture(scope="session")
def radial_ground_state(radial_model):
    trace, phi = prg_run(radial_model, initial_guess(radial_model, "gaussian"), ground_state_config())
    assert trace.status == "converged", f"radial ground state did not converge: {trace.status}"
    return trace, phi
