"""Exception hierarchy shared across the package."""


class MFMError(Exception):
    """Base class for all package errors."""


class ValidationError(MFMError, ValueError):
    """Bad input detected before any work is done (CLI exit code 2)."""


class DimensionError(ValidationError):
    pass


class ContractError(ValidationError):
    pass


class ConfigurationError(ValidationError):
    pass


class InputError(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericalError(MFMError, RuntimeError):
    """A computation produced NaN/Inf (CLI exit code 3)."""


class SimulationError(NumericalError):
    def __init__(self, message: str, step: int):
        self.step = step
        super().__init__(f"{message} (step {step})")


class IntegrationError(NumericalError):
    def __init__(self, message: str, step: int):
        self.step = step
        super().__init__(f"{message} (step {step})")


class TrainingError(NumericalError):
    def __init__(self, message: str, step: int, population_ids=()):
        self.step = step
        self.population_ids = list(population_ids)
        super().__init__(f"{message} (step {step}, populations {self.population_ids})")
