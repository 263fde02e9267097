"""Exception types shared across the toolkit."""

from __future__ import annotations


class AdiapulseError(Exception):
    """Base class for all toolkit errors."""


class DegenerateField(AdiapulseError):
    """Effective field magnitude fell below the degeneracy threshold.

    With a (near-)zero energy gap the instantaneous eigenprojector and any
    adiabaticity statement are undefined.
    """

    def __init__(self, message: str, t: float | None = None):
        super().__init__(message)
        self.t = t


class AmbiguousAlignment(AdiapulseError):
    """The initial state overlaps both field eigenstates equally (within tolerance)."""


class DomainError(AdiapulseError, ValueError):
    """Argument outside the valid domain of a waveform or polynomial map."""


class SolverFailure(AdiapulseError):
    """The adaptive ODE integrator failed (e.g. step-size underflow)."""


class NonRealMetric(AdiapulseError):
    """A metric that must be real carried an imaginary residue above tolerance.

    Usually indicates a solver-tolerance or eigenstate-sign misconfiguration.
    """


class ZeroPerturbation(AdiapulseError):
    """The perturbation norm integral vanishes; the sensitivity metric is undefined."""


class StepUnderflow(AdiapulseError):
    """Backtracking line search could not find an ascent step (stationary point)."""


class NoConvergence(AdiapulseError):
    """All optimizer restarts were exhausted without meeting the target threshold."""


class DimensionTooLarge(AdiapulseError):
    """Requested Hilbert-space dimension exceeds the dense-simulation limit."""


class EmptyOverlap(AdiapulseError):
    """Weight table and response curve share no abscissa overlap."""


class ConfigError(AdiapulseError):
    """Invalid run configuration. Carries the offending field path."""

    def __init__(self, path: str, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = path
        self.reason = reason


class MemberEvaluationError(AdiapulseError):
    """Wraps an error raised while evaluating one optimization-set member."""

    def __init__(self, label: str, original: Exception):
        super().__init__(f"member {label!r}: {original}")
        self.label = label
        self.original = original
