"""
Solver diagnostics collection.

This module counts the work done by the state and parameter solvers so a
run can be summarised at the end. Counts are kept out of reports.
"""

import threading
from dataclasses import asdict, dataclass
from typing import Any

from .logging import get_logger

logger = get_logger(__name__)


@dataclass
class SolverStatistics:
    """Counters for state solves and parameter identifications."""

    state_solves: int = 0
    newton_iterations: int = 0
    identifications: int = 0
    gauss_newton_iterations: int = 0
    rejected_steps: int = 0
    failed_identifications: int = 0

    @property
    def avg_newton_iterations(self) -> float:
        """Average Newton iterations per state solve."""
        return self.newton_iterations / max(1, self.state_solves)

    @property
    def avg_gauss_newton_iterations(self) -> float:
        """Average Gauss-Newton iterations per identification."""
        return self.gauss_newton_iterations / max(1, self.identifications)


class SolverMonitor:
    """
    Thread-safe collector of solver statistics.
    """

    def __init__(self) -> None:
        self.stats = SolverStatistics()
        self.lock = threading.Lock()

    def record_state_solve(self, iterations: int) -> None:
        """
        Record one converged state solve.

        Args:
            iterations: Newton iterations used
        """
        with self.lock:
            self.stats.state_solves += 1
            self.stats.newton_iterations += iterations

    def record_identification(
        self, iterations: int, rejected_steps: int, converged: bool
    ) -> None:
        """
        Record one parameter identification.

        Args:
            iterations: Gauss-Newton iterations used
            rejected_steps: Trial steps rejected by the damping rule
            converged: Whether the gradient tolerance was met
        """
        with self.lock:
            self.stats.identifications += 1
            self.stats.gauss_newton_iterations += iterations
            self.stats.rejected_steps += rejected_steps
            if not converged:
                self.stats.failed_identifications += 1

    def snapshot(self) -> dict[str, Any]:
        """Return a copy of the current counters with derived averages."""
        with self.lock:
            data = asdict(self.stats)
            data["avg_newton_iterations"] = self.stats.avg_newton_iterations
            data["avg_gauss_newton_iterations"] = (
                self.stats.avg_gauss_newton_iterations
            )
        return data

    def reset(self) -> None:
        """Reset all counters."""
        with self.lock:
            self.stats = SolverStatistics()
        logger.debug("Solver statistics reset")


# Global monitor instance
_solver_monitor = SolverMonitor()


def get_solver_monitor() -> SolverMonitor:
    """Get the global solver monitor instance."""
    return _solver_monitor


def get_solver_stats() -> dict[str, Any]:
    """Get solver statistics."""
    return _solver_monitor.snapshot()
