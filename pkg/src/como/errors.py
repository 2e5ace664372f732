"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
ContractViolation -> 3, OSError -> 4.  Library code raises them directly.
"""


class ConfigError(ValueError):
    """A config file, manifest, or CLI argument failed validation."""


class ContractViolation(RuntimeError):
    """An operation was called in a state its contract forbids.

    Examples: training a frozen model, composing with zero adapters while
    global blending is enabled, mismatched adapter/region counts.
    """
