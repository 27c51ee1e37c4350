# ope_pipeline/errors.py
"""
Exception hierarchy shared by the library, the CLI and the API.

Errors that carry structured fields define __reduce__ so they survive the
round trip through joblib worker processes.
"""

from typing import Any, Dict, Iterable, List, Optional, Tuple


class OpeError(Exception):
    """Base class for every error raised on purpose by ope_pipeline."""


class InputError(OpeError, ValueError):
    """Invalid dimensions, ranges or configuration supplied by the caller."""


class AssumptionViolationError(InputError):
    """Target puts mass on an action the behavior policy never takes."""

    def __init__(self, pairs: Iterable[Tuple[int, int]]):
        self.pairs: List[Tuple[int, int]] = [(int(s), int(a)) for s, a in pairs]
        shown = ", ".join(f"(s={s}, a={a})" for s, a in self.pairs[:10])
        more = "" if len(self.pairs) <= 10 else f" and {len(self.pairs) - 10} more"
        super().__init__(f"pi(a|s) > 0 where pi_b(a|s) = 0 at {shown}{more}")

    def __reduce__(self):
        return type(self), (self.pairs,)


class UncoveredStatesError(InputError):
    def __init__(self, states: Iterable[int]):
        self.states: List[int] = [int(s) for s in states]
        super().__init__(
            f"no logged transitions start at states {self.states}; "
            "collect more data or use missing_state='bound'"
        )

    def __reduce__(self):
        return type(self), (self.states,)


class DatasetFormatError(InputError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.message = message
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)

    def __reduce__(self):
        return type(self), (self.message, self.line)


class EstimatorError(OpeError):
    """A numerical procedure could not produce a trustworthy answer."""


class NonConvergenceError(EstimatorError):
    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        self.message = message
        self.diagnostics = diagnostics or {}
        super().__init__(message)

    def __reduce__(self):
        return type(self), (self.message, self.diagnostics)


class SingularSystemError(EstimatorError):
    pass


class InternalError(EstimatorError):
    pass
