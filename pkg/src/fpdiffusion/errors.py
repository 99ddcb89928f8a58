"""Exception hierarchy shared by every module of the package."""


class FPDiffusionError(Exception):
    pass


class DimensionError(FPDiffusionError, ValueError):
    """Array shapes are inconsistent with the declared dimension."""


class NumericError(FPDiffusionError, ValueError):
    """Input contains NaN or infinite entries."""


class NotPositiveDefiniteError(FPDiffusionError, ValueError):
    pass


class ValidationError(FPDiffusionError, ValueError):
    pass


class DomainError(FPDiffusionError, ValueError):
    """A time argument falls outside the schedule horizon."""


class UnsupportedModelError(FPDiffusionError, NotImplementedError):
    """The requested operation has no closed form for this forward model."""


class SingularCovarianceError(FPDiffusionError, ValueError):
    pass


class DivergenceError(FPDiffusionError, RuntimeError):
    """Numerical integration produced non-finite values."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite state encountered at step {step}")


class TrainingDivergedError(FPDiffusionError, RuntimeError):
    """Loss became non-finite or blew up during optimisation."""

    def __init__(self, step, loss, param_norms):
        self.step = step
        self.loss = loss
        self.param_norms = param_norms
        super().__init__(
            f"loss diverged ({loss!r}) at step {step}; parameter norms: {param_norms}"
        )
