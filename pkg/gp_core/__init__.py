"""
GPRG core library

Polar-grid discretization of the rotating Gross-Pitaevskii energy, metric
preconditioners, the preconditioned Riemannian gradient iteration and the
spectral / rate diagnostics built around it.
"""

from .grid import PolarGrid, SparseSymOperator, build_grid
from .fields import ComplexField
from .model import ModelInstance, Nonlinearity, build_model
from .precond import FactorizedMetric, MetricBuildError, PrecondSpec, build_metric
from .riemann import IterTrace, PRGConfig, StageSpec, prg_run

__all__ = [
    'PolarGrid', 'SparseSymOperator', 'build_grid', 'ComplexField',
    'ModelInstance', 'Nonlinearity', 'build_model',
    'FactorizedMetric', 'MetricBuildError', 'PrecondSpec', 'build_metric',
    'IterTrace', 'PRGConfig', 'StageSpec', 'prg_run',
]
