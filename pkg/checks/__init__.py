"""
GPRG self-check framework

Small-scale oracle checks (grid invariants, finite-difference derivatives,
solver invariants) that the `check` subcommand runs and tabulates.
"""

from .base import BaseCheck, CheckContext, CheckResult
from .manager import CheckManager

__all__ = ['BaseCheck', 'CheckContext', 'CheckResult', 'CheckManager']
