"""Exception types shared across the package."""


class IrwbcError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(IrwbcError):
    """Input file or document could not be parsed at all."""


class ValidationError(IrwbcError):
    """Parsed input violates a structural or numerical requirement."""


class UnknownFrame(IrwbcError):
    """Requested frame name does not exist in the model."""


class NonFiniteInput(IrwbcError):
    """A state, velocity or time step contains NaN or infinity."""


class SingularMassMatrix(IrwbcError):
    """Mass matrix is singular or too ill-conditioned to invert."""


class DimensionMismatch(IrwbcError):
    """Array shapes passed to a solver do not agree."""


class NonFiniteData(IrwbcError):
    """Solver input arrays contain NaN (or infinity where not allowed)."""


class SingularWeight(IrwbcError):
    """Weight matrix for redundancy resolution is singular."""


class UndefinedShortestRotation(IrwbcError):
    """Reduced-attitude error is undefined for antipodal axes."""


class RankDeficientTilt(IrwbcError):
    """Tilt selector lost rank during hierarchical assembly."""


class ControllerInfeasible(IrwbcError):
    """The whole-body QP has no solution even after the fallback."""


class NumericalBlowup(IrwbcError):
    """Simulation state diverged beyond any physical magnitude."""


class ScenarioError(IrwbcError):
    """Scenario description is inconsistent or its references unreachable."""


class PartialFailure(IrwbcError):
    """One comparison variant failed while the other produced usable output."""
