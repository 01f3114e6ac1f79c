"""Exception and warning types shared across the package."""


class KoopmpcError(Exception):
    """Base class for all errors raised by this package."""


class InvalidParameter(KoopmpcError):
    """A constructor argument is outside its admissible range."""


class IntegrationDiverged(KoopmpcError):
    """The fixed-step integrator produced a non-finite state."""


class LiftFailed(KoopmpcError):
    """An observable returned a non-finite value."""


class DimensionError(KoopmpcError):
    """Vector or matrix dimensions do not match the dictionary layout."""


class DictionaryNotNormBounding(KoopmpcError):
    """The lower norm inequality ||x|| <= ||Phi(x) - Phi(0)|| failed on the grid."""


class SamplingFailed(KoopmpcError):
    """Too many drawn samples had to be discarded during data generation."""


class FitFailed(KoopmpcError):
    """The least-squares fit produced a non-finite solution."""


class ValidationFailed(KoopmpcError):
    """A validation residual was non-finite."""


class PredictionDiverged(KoopmpcError):
    """Lifted prediction became non-finite; carries the failing step index."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"prediction became non-finite at step {step}")


class SynthesisInvalid(KoopmpcError):
    """Terminal ingredients violate a structural requirement (e.g. P not SPD)."""


class SynthesisFailed(KoopmpcError):
    """Terminal-ingredient synthesis could not produce a candidate."""


class TerminalRegionEmpty(KoopmpcError):
    """The terminal level shrank below the minimum without passing verification."""


class ControllerSingular(KoopmpcError):
    """The rational part of the terminal controller is singular at a state."""


class OutsideTerminalRegion(KoopmpcError):
    """The terminal controller was evaluated outside its region of validity."""


class InfeasibleTightening(KoopmpcError):
    """Accumulated tightening margin exceeds a constraint half-width."""


class SolverDiverged(KoopmpcError):
    """The trajectory optimizer produced a non-finite cost."""


class FeasibilityLost(KoopmpcError):
    """A receding-horizon step found no feasible control sequence."""


class ConfigError(KoopmpcError):
    """An experiment configuration violates its invariants."""


class InsufficientDataWarning(UserWarning):
    """Fewer samples than regression unknowns; minimum-norm solution returned."""


class RegionTooThinWarning(UserWarning):
    """Rejection sampling of the terminal region had very low acceptance."""
