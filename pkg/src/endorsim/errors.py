"""Exception types shared across the package."""


class DivergedError(RuntimeError):
    """A least-squares iteration produced non-finite residuals."""


class DegenerateSpectrumError(RuntimeError):
    """Fewer resolvable lines than the spin system requires."""


class HybridizationTooStrongError(RuntimeError):
    """No eigenstate is predominantly a single product state."""


class DegenerateSteadyStateError(RuntimeError):
    """The rate graph has more than one closed class."""

    def __init__(self, message, components=None):
        super().__init__(message)
        self.components = components or []


class RankDeficiencyError(RuntimeError):
    """Too few independent observations to determine the fit parameters."""


class FitNotConverged(RuntimeError):
    """A fit did not converge; ``result`` holds the best-effort estimate."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class CalibrationStageError(RuntimeError):
    """A stage of the recursive calibration failed.

    ``stage`` names the failing step and ``partial`` carries whatever was
    already determined (a ``CalibrationResult`` flagged partial).
    """

    def __init__(self, stage, cause, partial=None):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.partial = partial
