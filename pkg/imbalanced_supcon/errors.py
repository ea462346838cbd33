"""
Exception hierarchy for imbalanced-supcon.

Every error raised on purpose by the library derives from SupconError so the
CLI can map it to an exit code in one place.
"""
from typing import Any, Dict, Optional


class SupconError(Exception):
    """Base class for all library errors"""


class InvalidConfig(SupconError):
    """A configuration value or operation precondition is out of range"""


class DegenerateVector(SupconError):
    """A vector is too close to zero to be normalized"""


class InvalidBatch(SupconError):
    """A view batch has a malformed view pairing"""


class EmptyPositives(SupconError):
    """An anchor has no positive views in the batch"""


class NoMajorityClass(SupconError):
    """Prototype placement found no majority-class encodings"""


class InitFailed(SupconError):
    """A near-collapsed initialization missed its similarity target"""


class SingleClassTrainSet(SupconError):
    """The probe training set holds only one class"""


class SingleClassTestSet(SupconError):
    """The probe test set holds only one class"""


class InsufficientData(SupconError):
    """Too few rows for a correlation report"""


class PremiseViolated(SupconError):
    """A batch is not close enough to collapse for the gradient bound to apply"""


class BoundViolation(SupconError):
    """A measured gradient norm exceeded its bound"""


class NumericalDivergence(SupconError):
    """Training produced a non-finite loss

    Args:
        message: Human readable description
        dump: Offending batch (sample ids, labels, step) for post-mortem
    """

    def __init__(self, message: str, dump: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.dump = dump or {}

    def __reduce__(self):
        # keep the dump when the error crosses a worker-process boundary
        return (type(self), (str(self), self.dump))
