#!/usr/bin/env python3
"""
Complex grid functions stored as realified [Re; Im] vectors, and their CSV dumps.
"""

import csv
import hashlib
import math
from pathlib import Path
from typing import Optional, Union

import numpy as np

from gp_core.grid import PolarGrid, build_grid, mass_norm

NORMALIZED_TOL = 1e-12


class ComplexField:
    """The state phi on a polar grid.

    Values are copied and frozen; operations return new fields.
    """

    def __init__(self, grid: PolarGrid, values: np.ndarray):
        values = np.array(values, dtype=np.float64).reshape(-1)
        if values.shape[0] != grid.dim:
            raise ValueError(f"Field has {values.shape[0]} entries, grid needs {grid.dim}")
        if not np.all(np.isfinite(values)):
            raise ValueError("Field contains non-finite entries")
        values.setflags(write=False)
        self.grid = grid
        self.values = values
        self._norm = mass_norm(grid, values)

    @classmethod
    def from_complex(cls, grid: PolarGrid, psi: np.ndarray) -> "ComplexField":
        psi = np.asarray(psi, dtype=np.complex128).reshape(-1)
        return cls(grid, np.concatenate([psi.real, psi.imag]))

    @classmethod
    def zeros(cls, grid: PolarGrid) -> "ComplexField":
        return cls(grid, np.zeros(grid.dim))

    @property
    def re(self) -> np.ndarray:
        return self.values[: self.grid.N]

    @property
    def im(self) -> np.ndarray:
        return self.values[self.grid.N:]

    @property
    def density(self) -> np.ndarray:
        return self.re ** 2 + self.im ** 2

    @property
    def mass_norm(self) -> float:
        return self._norm

    @property
    def normalized(self) -> bool:
        return abs(self._norm - 1.0) <= NORMALIZED_TOL

    def to_complex(self) -> np.ndarray:
        return self.re + 1j * self.im

    def normalized_copy(self) -> "ComplexField":
        if self._norm == 0.0:
            raise ValueError("Cannot normalize the zero field")
        return ComplexField(self.grid, self.values / self._norm)

    def times_i(self) -> "ComplexField":
        """i*phi, realified as (-Im, Re)"""
        return ComplexField(self.grid, realified_times_i(self.values))

    def phase_rotated(self, alpha: float) -> "ComplexField":
        c, s = math.cos(alpha), math.sin(alpha)
        return ComplexField(self.grid, np.concatenate([c * self.re - s * self.im, s * self.re + c * self.im]))

    def shifted(self, k: int) -> "ComplexField":
        return ComplexField(self.grid, self.grid.shift(self.values, k))

    def fingerprint(self) -> str:
        """Short content hash used to tag metrics built at this state"""
        return hashlib.sha256(self.values.tobytes()).hexdigest()[:12]


def realified_times_i(values: np.ndarray) -> np.ndarray:
    n = values.shape[0] // 2
    return np.concatenate([-values[n:], values[:n]])


def write_field_csv(path: Union[str, Path], field: ComplexField):
    """Write `i,j,r,theta,re,im` rows, radial index outer"""
    grid = field.grid
    re = field.re.reshape(grid.Nr, grid.Ntheta)
    im = field.im.reshape(grid.Nr, grid.Ntheta)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["i", "j", "r", "theta", "re", "im"])
        for i in range(grid.Nr):
            r = grid.r_nodes[i]
            for j in range(grid.Ntheta):
                writer.writerow([i, j, f"{r:.17g}", f"{grid.theta_nodes[j]:.17g}",
                                 f"{re[i, j]:.17g}", f"{im[i, j]:.17g}"])


def read_field_csv(path: Union[str, Path], R: Optional[float] = None) -> ComplexField:
    """Read a field dump back. R is recovered from the node radii unless given."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Field file not found: {path}")
    table = np.genfromtxt(path, delimiter=",", names=True, dtype=float)
    if table.size == 0 or set(table.dtype.names) != {"i", "j", "r", "theta", "re", "im"}:
        raise ValueError(f"{path} is not a field dump (expected header i,j,r,theta,re,im)")
    i_idx = table["i"].astype(int)
    j_idx = table["j"].astype(int)
    Nr = int(i_idx.max()) + 1
    Ntheta = int(j_idx.max()) + 1
    if table.size != Nr * Ntheta:
        raise ValueError(f"{path} has {table.size} rows, expected {Nr * Ntheta}")
    if R is None:
        # r_{i+1/2} = (i + 1/2) R / Nr
        R = float(np.mean(table["r"] * Nr / (i_idx + 0.5)))
    grid = build_grid(R, Nr, Ntheta)
    order = i_idx * Ntheta + j_idx
    re = np.empty(grid.N)
    im = np.empty(grid.N)
    re[order] = table["re"]
    im[order] = table["im"]
    return ComplexField(grid, np.concatenate([re, im]))


def write_density_csv(path: Union[str, Path], field: ComplexField):
    """Write `i,j,r,theta,x,y,rho` rows for plotting"""
    grid = field.grid
    x, y = grid.coords()
    rho = field.density
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["i", "j", "r", "theta", "x", "y", "rho"])
        for p in range(grid.N):
            i, j = divmod(p, grid.Ntheta)
            writer.writerow([i, j, f"{grid.r_nodes[i]:.17g}", f"{grid.theta_nodes[j]:.17g}",
                             f"{x[p]:.17g}", f"{y[p]:.17g}", f"{rho[p]:.17g}"])
