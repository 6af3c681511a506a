#!/usr/bin/env python3
"""
Trapping potentials - an abstract interface plus a factory that builds the
configured potential from a plain description.
"""

import csv
import logging
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

logger = logging.getLogger(__name__)


class PotentialInterface(ABC):
    """Abstract interface for trapping potentials"""

    name: str = "potential"

    @abstractmethod
    def evaluate(self, r: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Sample V at nodes given their radius and cartesian coordinates"""
        pass

    @abstractmethod
    def is_radial(self) -> bool:
        """True when V depends on r only (enables the rotation generator)"""
        pass

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.name}


class HarmonicPotential(PotentialInterface):
    """V = scale * (gamma_x^2 x^2 + gamma_y^2 y^2) / 2"""

    name = "harmonic"

    def __init__(self, scale: float = 1.0, gamma_x: float = 1.0, gamma_y: float = 1.0):
        if scale < 0:
            raise ValueError(f"Harmonic scale must be nonnegative, got {scale}")
        self.scale = float(scale)
        self.gamma_x = float(gamma_x)
        self.gamma_y = float(gamma_y)

    def evaluate(self, r, x, y):
        return 0.5 * self.scale * ((self.gamma_x * x) ** 2 + (self.gamma_y * y) ** 2)

    def is_radial(self) -> bool:
        return self.gamma_x == self.gamma_y

    def describe(self):
        return {"kind": self.name, "scale": self.scale,
                "gamma_x": self.gamma_x, "gamma_y": self.gamma_y}


class RadialTablePotential(PotentialInterface):
    """Radial potential tabulated as (r, V) pairs, linearly interpolated"""

    name = "radial_table"

    def __init__(self, r_values: np.ndarray, v_values: np.ndarray, source: Optional[str] = None):
        r_values = np.asarray(r_values, dtype=float)
        v_values = np.asarray(v_values, dtype=float)
        if r_values.ndim != 1 or r_values.shape != v_values.shape or r_values.size < 2:
            raise ValueError("Radial table needs at least two (r, V) rows")
        if np.any(np.diff(r_values) <= 0):
            raise ValueError("Radial table r values must be strictly increasing")
        if not (np.all(np.isfinite(r_values)) and np.all(np.isfinite(v_values))):
            raise ValueError("Radial table contains non-finite values")
        self.r_values = r_values
        self.v_values = v_values
        self.source = source

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "RadialTablePotential":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Potential table not found: {path}")
        rows = []
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                rows.append((float(row["r"]), float(row["V"])))
        rows.sort()
        table = np.array(rows, dtype=float).reshape(-1, 2)
        potential = cls(table[:, 0], table[:, 1], source=str(path))
        logger.info(f"Loaded radial potential table {path} ({len(rows)} rows)")
        return potential

    def evaluate(self, r, x, y):
        # flat extrapolation outside the table
        return np.interp(r, self.r_values, self.v_values)

    def is_radial(self) -> bool:
        return True

    def describe(self):
        return {"kind": self.name, "source": self.source, "rows": int(self.r_values.size)}


class ZeroPotential(PotentialInterface):
    name = "zero"

    def evaluate(self, r, x, y):
        return np.zeros_like(np.asarray(r, dtype=float))

    def is_radial(self) -> bool:
        return True


def create_potential(
    spec: Union[str, Dict[str, Any]] = "harmonic",
    scale: float = 1.0,
    gamma_x: float = 1.0,
    gamma_y: float = 1.0,
    table_path: Optional[str] = None,
) -> PotentialInterface:
    """
    Create a potential from its kind name or a description dict.

    Args:
        spec: "harmonic", "radial_table", "zero", or a dict with a "kind" key
            and the keyword arguments below
        scale: harmonic prefactor
        gamma_x, gamma_y: harmonic anisotropy (unequal values make V non-radial)
        table_path: CSV with columns r,V for "radial_table"

    Raises:
        ValueError: If the kind is unknown or required settings are missing
    """
    if isinstance(spec, dict):
        options = dict(spec)
        kind = str(options.pop("kind", "harmonic"))
        return create_potential(kind, **options)

    kind = spec.lower()

    if kind == "harmonic":
        return HarmonicPotential(scale=scale, gamma_x=gamma_x, gamma_y=gamma_y)

    elif kind == "radial_table":
        if not table_path:
            raise ValueError("table_path is required for a radial_table potential")
        return RadialTablePotential.from_csv(table_path)

    elif kind == "zero":
        return ZeroPotential()

    else:
        raise ValueError(f"Unknown potential kind: {spec}. Supported kinds: harmonic, radial_table, zero")
