"""Error kinds raised across alevar, each with a stable failure code."""

from __future__ import annotations

from typing import Dict, Iterable, List, Optional, Sequence


class AlevarError(Exception):
    """Base class; ``code`` is what replicate records store as the failure reason."""

    code = "error"


class InvalidSizeError(AlevarError, ValueError):
    code = "invalid-size"


class InvalidLevelError(AlevarError, ValueError):
    code = "invalid-level"


class InputOrderError(AlevarError, ValueError):
    code = "input"


class ConfigError(AlevarError, ValueError):
    code = "config"


class SingularDesignError(AlevarError, ArithmeticError):
    code = "singular-design"


class SingularDowndateError(SingularDesignError):
    code = "singular-downdate"


class NonConvergenceError(AlevarError, RuntimeError):
    code = "non-convergence"

    def __init__(self, message: str, *, last_iterate: Optional[Sequence[float]] = None, iterations: int = 0):
        super().__init__(message)
        self.last_iterate = None if last_iterate is None else [float(v) for v in last_iterate]
        self.iterations = int(iterations)


class DegenerateResponseError(AlevarError, ValueError):
    code = "degenerate-response"


class PositivityError(AlevarError, ValueError):
    code = "positivity"

    def __init__(self, message: str, *, rows: Iterable[int] = ()):
        super().__init__(message)
        self.rows: List[int] = [int(r) for r in rows]


class JackknifeRefitError(AlevarError, RuntimeError):
    code = "jackknife-refit"

    def __init__(self, message: str, *, failures: Optional[Dict[int, str]] = None):
        super().__init__(message)
        self.failures: Dict[int, str] = dict(failures or {})

    @property
    def failed_indices(self) -> List[int]:
        return sorted(self.failures)


class BootstrapDegeneracyError(AlevarError, RuntimeError):
    code = "bootstrap-degeneracy"


class DegenerateDistributionError(AlevarError, ValueError):
    code = "degenerate-distribution"


class DivisionDegenerateError(AlevarError, ZeroDivisionError):
    code = "division-degenerate"


class OracleUnavailableError(AlevarError, LookupError):
    code = "oracle-unavailable"


class ReportWriteError(AlevarError, OSError):
    code = "unwritable-path"


class StudyAbortedError(AlevarError, RuntimeError):
    code = "study-aborted"

    def __init__(self, message: str, *, summary: Optional[Dict[str, object]] = None):
        super().__init__(message)
        self.summary: Dict[str, object] = dict(summary or {})


# Failures the pipeline may hit on an unlucky sample; anything else is a bug.
RECOVERABLE_ERRORS = (AlevarError, ArithmeticError, ValueError)


def failure_code(exc: BaseException) -> str:
    code = getattr(exc, "code", None)
    if isinstance(code, str) and code:
        return code
    return type(exc).__name__.lower()
