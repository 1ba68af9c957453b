"""Exception types shared across the package."""


class ConfigError(Exception):
    """Invalid configuration: unknown id, bad field value, missing file."""


class UsageError(ValueError):
    """An operation was called with inputs that violate its contract."""


class PlannerError(RuntimeError):
    """Planning could not produce a finite candidate in any iteration."""


class AgentError(RuntimeError):
    """Training aborted; carries a diagnostic summary of the bad step."""
