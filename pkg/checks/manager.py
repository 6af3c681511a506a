"""
Check Manager for GPRG
Registers the self-checks and runs them by group
"""

import logging
from typing import Dict, List, Optional

from .base import BaseCheck, CheckContext, CheckResult
from .grid_checks import GRID_CHECKS
from .model_checks import MODEL_CHECKS
from .solver_checks import SOLVER_CHECKS

logger = logging.getLogger(__name__)


class CheckManager:
    """Manages available checks and executes them"""

    def __init__(self):
        self.checks: Dict[str, BaseCheck] = {}
        self._register_default_checks()

    def _register_default_checks(self):
        for check_cls in GRID_CHECKS + MODEL_CHECKS + SOLVER_CHECKS:
            self.register_check(check_cls())

    def register_check(self, check: BaseCheck):
        self.checks[f"{check.group}.{check.name}"] = check

    def get_check(self, key: str) -> Optional[BaseCheck]:
        return self.checks.get(key)

    def groups(self) -> List[str]:
        return sorted({check.group for check in self.checks.values()})

    def select(self, name_filter: Optional[str] = None) -> List[str]:
        """Keys matching a group name, a full `group.name` key, or everything"""
        keys = [k for k, c in self.checks.items() if c.enabled]
        if not name_filter:
            return keys
        return [k for k in keys if k == name_filter or self.checks[k].group == name_filter]

    def execute_check(self, key: str, ctx: CheckContext) -> CheckResult:
        check = self.get_check(key)
        if not check:
            group, _, name = key.partition(".")
            return CheckResult(name=name or key, group=group, success=False,
                               error=f"Check '{key}' not found")
        result = check.execute(ctx)
        status = "passed" if result.success else f"FAILED: {result.error}"
        logger.info(f"check {key} {status} ({result.execution_time:.2f}s)")
        return result

    def run(self, ctx: CheckContext, name_filter: Optional[str] = None) -> List[CheckResult]:
        keys = self.select(name_filter)
        if not keys:
            raise ValueError(f"No check matches filter '{name_filter}'. Groups: {', '.join(self.groups())}")
        return [self.execute_check(key, ctx) for key in keys]
