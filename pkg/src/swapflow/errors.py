"""Error taxonomy shared across the package.

Exit-code mapping in the CLI: InputError/ConfigError are usage-level (2),
everything else raised from here is a runtime failure (3).
"""


class SwapflowError(Exception):
    pass


class InputError(SwapflowError, ValueError):
    """Caller passed data violating an operation precondition."""


class ConfigError(SwapflowError, ValueError):
    """Invalid configuration value or incompatible artifact."""


class TrainingQualityError(SwapflowError, RuntimeError):
    """A trained component failed its quality gate."""


class NumericError(SwapflowError, RuntimeError):
    """Non-finite values encountered mid-computation."""
