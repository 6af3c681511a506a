import numpy as np
import pytest
from numpy.testing import assert_allclose

from gp_core.potentials import (
    HarmonicPotential,
    RadialTablePotential,
    ZeroPotential,
    create_potential,
)


def test_harmonic_values_and_radiality():
    pot = create_potential("harmonic", scale=2.0)
    r = np.array([0.0, 1.0, 2.0])
    x = np.array([0.0, 1.0, 0.0])
    y = np.array([0.0, 0.0, 2.0])
    assert_allclose(pot.evaluate(r, x, y), [0.0, 1.0, 4.0])
    assert pot.is_radial()

    anisotropic = create_potential({"kind": "harmonic", "gamma_x": 1.0, "gamma_y": 1.5})
    assert isinstance(anisotropic, HarmonicPotential)
    assert not anisotropic.is_radial()


def test_negative_scale_is_rejected():
    with pytest.raises(ValueError):
        HarmonicPotential(scale=-1.0)


def test_radial_table_interpolates_with_flat_ends(tmp_path):
    path = tmp_path / "trap.csv"
    path.write_text("r,V\n2.0,4.0\n0.0,0.0\n1.0,1.0\n")
    pot = create_potential("radial_table", table_path=str(path))
    assert isinstance(pot, RadialTablePotential)
    r = np.array([0.5, 1.5, 3.0])
    assert_allclose(pot.evaluate(r, r, 0 * r), [0.5, 2.5, 4.0])
    assert pot.is_radial()
    assert pot.describe()["rows"] == 3


@pytest.mark.parametrize("r,v", [([0.0], [1.0]), ([0.0, 0.0], [1.0, 2.0]), ([0.0, 1.0], [1.0, np.inf])])
def test_radial_table_rejects_bad_tables(r, v):
    with pytest.raises(ValueError):
        RadialTablePotential(np.array(r), np.array(v))


def test_missing_table_and_unknown_kind(tmp_path):
    with pytest.raises(FileNotFoundError):
        create_potential("radial_table", table_path=str(tmp_path / "missing.csv"))
    with pytest.raises(ValueError):
        create_potential("radial_table")
    with pytest.raises(ValueError):
        create_potential("quartic")


def test_zero_potential():
    pot = ZeroPotential()
    assert np.all(pot.evaluate(np.ones(4), np.ones(4), np.zeros(4)) == 0.0)
    assert pot.describe() == {"kind": "zero"}


def test_radial_table_load_is_logged(tmp_path, caplog):
    path = tmp_path / "trap.csv"
    path.write_text("r,V\n0.0,0.0\n4.0,8.0\n")
    with caplog.at_level("INFO", logger="gp_core.potentials"):
        create_potential("radial_table", table_path=str(path))
    assert f"Loaded radial potential table {path} (2 rows)" in caplog.text
