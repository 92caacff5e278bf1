"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration or violated operation precondition."""


class ContractViolationError(ValueError):
    """A caller passed state that breaks a documented runtime contract."""


class DivergenceError(RuntimeError):
    """An optimization run produced a non-finite loss or gradient.

    Carries the stage index and the iteration at which the blow-up
    was detected.
    """

    def __init__(self, stage: int, iteration: int, detail: str = ""):
        self.stage = stage
        self.iteration = iteration
        msg = f"non-finite value in stage {stage} at iteration {iteration}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class UnsupportedScaleError(ValueError):
    """Brute-force verification was requested above its dimension limit."""


class UndefinedMetricError(ValueError):
    """A metric has no defined value for the given inputs."""
