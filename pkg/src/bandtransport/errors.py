"""Exception hierarchy shared by all modules.

Each error carries an ``exit_code`` that the command-line layer maps to a
process status (2 config, 3 solver, 4 CFL, 5 resolution).
"""

from __future__ import annotations


class BandTransportError(Exception):
    exit_code = 3


class ConfigError(BandTransportError):
    exit_code = 2


# lattice
class SingularBasis(ConfigError):
    pass


class CutoffTooLarge(BandTransportError):
    pass


# bloch
class MissingDual(BandTransportError):
    pass


class EigSolveFailure(BandTransportError):
    pass


class CutoffTooSmall(BandTransportError):
    pass


class RefineStall(BandTransportError):
    def __init__(self, message: str, achieved_gap: float):
        super().__init__(message)
        self.achieved_gap = achieved_gap


class AmbiguousOrder(BandTransportError):
    pass


class GridSolveError(BandTransportError):
    def __init__(self, message: str, node: tuple):
        super().__init__(message)
        self.node = node


# coupling
class MomentumMismatch(BandTransportError):
    pass


class MomentumAliasing(BandTransportError):
    pass


class TruncationOverflow(BandTransportError):
    pass


class QuadratureNotConverged(BandTransportError):
    pass


# transport
class CflViolation(BandTransportError):
    exit_code = 4

    def __init__(self, message: str, suggested_dt: float):
        super().__init__(message)
        self.suggested_dt = suggested_dt


class NonHermitianDrift(BandTransportError):
    pass


class RegimeViolation(BandTransportError):
    pass


class ShellTooNarrow(BandTransportError):
    exit_code = 5


class CollisionBlowup(BandTransportError):
    pass


# oracle
class UnderResolved(BandTransportError):
    exit_code = 5


class NormDrift(BandTransportError):
    pass


class TruncationMismatch(BandTransportError):
    pass
