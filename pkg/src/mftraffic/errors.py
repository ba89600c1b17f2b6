"""Exception hierarchy shared by all modules.

Everything derives from :class:`TrafficError` so the CLI can map domain
failures to exit code 1 with a single ``except`` clause.
"""


class TrafficError(Exception):
    """Base class for domain errors."""


class ParseError(TrafficError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InvalidScale(TrafficError):
    pass


class ZeroMass(TrafficError):
    pass


class NonDyadicLength(TrafficError):
    pass


class TooFewScales(TrafficError):
    pass


class ZeroVariancePoint(TrafficError):
    pass


class InsufficientDepth(TrafficError):
    pass


class AllZeroCells(TrafficError):
    pass


class DegenerateDenominator(TrafficError):
    pass


class InvalidHurst(TrafficError):
    pass


class Infeasible(TrafficError):
    def __init__(self, message, worst_residual=None, row=None, solution=None):
        self.worst_residual = worst_residual
        self.row = row
        self.solution = solution
        super().__init__(message)


class NonConvergence(TrafficError):
    pass


class RecurrenceBreakdown(TrafficError):
    def __init__(self, message, index=None, partial=None):
        self.index = index
        self.partial = partial
        super().__init__(message)


class NonErgodicTrace(TrafficError):
    pass


class BoundsTooTight(TrafficError):
    pass


class TooFewSamples(TrafficError):
    pass


class ConfigError(TrafficError):
    pass


class NoFramesDelivered(TrafficError):
    pass


class SimulationError(TrafficError):
    """Internal consistency check failed during a simulation run."""
