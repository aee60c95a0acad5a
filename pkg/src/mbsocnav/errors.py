"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments outside its contract."""


class ConfigurationError(ValueError):
    """Inconsistent or invalid configuration, reported before any work starts."""


class ScenarioError(RuntimeError):
    """Scenario generation could not place all entities."""


class TrainingError(RuntimeError):
    """Non-finite loss or gradient, or an otherwise unrecoverable training state."""
