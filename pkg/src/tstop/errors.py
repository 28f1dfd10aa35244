"""Planner exceptions, mapped to CLI exit codes."""


class ScenarioError(ValueError):
    """Scenario validation failed (exit code 2)."""


class PlannerInfeasible(RuntimeError):
    """A nominal subproblem was infeasible and restoration failed (exit 3)."""


class PlannerMaxIterations(RuntimeError):
    """The outer alternation exceeded its iteration budget (exit 4)."""

    def __init__(self, message, plan=None):
        super().__init__(message)
        self.plan = plan
