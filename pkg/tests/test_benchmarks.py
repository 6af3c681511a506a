"""
Quantitative benchmarks.

The Bessel benchmark runs by default (a minute or two). The production-size
runs on the 256 x 1024 disk are marked `long` and need GP_RUN_LONG=1.
"""

import json
from pathlib import Path

import numpy as np
import pytest
import scipy.linalg as la
import scipy.sparse as sp
from numpy.testing import assert_allclose
from scipy.special import jn_zeros

from app.main import EXIT_OK, main, model_from_config
from app.models import load_config
from app.run_versioning import RunDirectoryManager
from gp_core.model import energy
from gp_core.riemann import IterTrace, initial_guess, prg_run
from gp_core.spectrum import RateConstants, rho_tau

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def radial_dirichlet_energy(R: float, Nr: int) -> float:
    """Lowest (1/4) int |grad u|^2 over radial u with unit mass, 1D dense eigensolve.

    Same cell-centred nodes and flux form as the disk grid with the angular
    factor dropped, so a radial 2D iterate must land on this value.
    """
    h = R / Nr
    r = (np.arange(Nr) + 0.5) * h
    rho = np.arange(1, Nr) * h
    main_diag = np.zeros(Nr)
    main_diag[1:] += rho
    main_diag[:-1] += rho
    main_diag[-1] += 2.0 * R
    A = sp.diags([main_diag, -rho, -rho], [0, -1, 1]).toarray() / (2.0 * h)
    W = np.diag(r * h)
    lowest = la.eigh(A, W, eigvals_only=True, subset_by_index=[0, 0])[0]
    # E = (1/2) x^T K x and x^T K x = lowest at unit mass
    return 0.5 * lowest


def test_bessel_mode_energy():
    config = load_config(CONFIGS / "bessel_check.cfg")
    model = model_from_config(config)
    phi0 = initial_guess(model, config.solve.initial_guess)
    trace, phi = prg_run(model, phi0, config.solve.prg_config())
    assert trace.status == "converged"

    R = config.model.R
    analytic = jn_zeros(0, 1)[0] ** 2 / (4.0 * R ** 2)
    assert_allclose(analytic, 0.010040, rtol=1e-4)
    assert_allclose(energy(model, phi), analytic, rtol=1e-3)
    assert_allclose(energy(model, phi), radial_dirichlet_energy(R, config.model.Nr), rtol=1e-8)
    # stays radial: every ring is constant
    rings = phi.values[:model.grid.N].reshape(model.grid.Nr, model.grid.Ntheta)
    assert np.max(np.ptp(rings, axis=1)) <= 1e-8 * np.max(np.abs(rings))


def test_radial_oracle_matches_bessel_zero():
    R = 12.0
    assert_allclose(radial_dirichlet_energy(R, 1024), jn_zeros(0, 1)[0] ** 2 / (4.0 * R ** 2), rtol=1e-4)


@pytest.fixture(scope="module")
def production_runs(tmp_path_factory):
    out = tmp_path_factory.mktemp("production")
    cfg = str(CONFIGS / "paper_fig1.cfg")
    assert main(["solve", "--config", cfg, "--out", str(out)]) == EXIT_OK
    assert main(["spectrum", "--config", cfg, "--out", str(out)]) == EXIT_OK
    assert main(["rates", "--config", cfg, "--out", str(out)]) == EXIT_OK

    def artifact(command: str, name: str):
        path = RunDirectoryManager(command, str(out)).get_version_path() / name
        if path.suffix == ".csv":
            return IterTrace.read_csv(path)
        return json.loads(path.read_text())

    return artifact


@pytest.mark.long
def test_production_solve_converges(production_runs):
    result = production_runs("solve", "run.json")
    assert result["status"] == "converged"
    trace = production_runs("solve", "trace.csv")
    energies = np.array([row.energy for row in trace.rows])
    assert np.all(np.diff(energies[5:]) <= 1e-14 * np.abs(energies[5:-1]))


@pytest.mark.long
def test_amd_ordering_beats_natural(production_runs):
    constants = production_runs("spectrum", "constants.json")
    rows = {row["ordering"]: row for row in constants["rows"][:2]}
    assert rows["natural"]["kappa"] >= 5.0 * rows["amd"]["kappa"]
    assert 6.41e-4 / 5.0 <= rows["amd"]["mu"] <= 6.41e-4 * 5.0
    assert constants["morse_bott_consistent"]


@pytest.mark.long
def test_tail_ratios_follow_the_predicted_rate(production_runs):
    constants = production_runs("spectrum", "constants.json")["primary"]
    rates = production_runs("rates", "rates.json")
    predicted = rho_tau(RateConstants.model_validate(constants), 1.0)
    assert rates["regime"] == "linear"
    assert abs(rates["q_e_tail"] - predicted) <= 5e-4
    assert abs(rates["q_phi_tail"] - predicted) <= 5e-4
