"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised for malformed, non-finite or out-of-range inputs."""


class NumericalError(ArithmeticError):
    """Raised when a linear solve or decomposition breaks down."""


class SimulationDivergedError(RuntimeError):
    """Raised when the simulated arm exceeds the velocity safety bound."""

    def __init__(self, step: int, speed: float):
        super().__init__(f"simulation diverged at step {step}: |dq| = {speed:.3g} rad/s")
        self.step = step
        self.speed = speed


class InsufficientDataError(RuntimeError):
    """Raised when a dataset has too few usable samples for an operation."""
