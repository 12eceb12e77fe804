"""Exception hierarchy shared across the engine, pipeline, service and CLI.

The CLI maps these onto exit codes: ConfigError -> 2, ContractViolation
(and its subclasses) -> 3, OSError -> 4.
"""


class DitCacheError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(DitCacheError):
    """Invalid configuration: unknown keys, bad values, unparseable files."""


class ContractViolation(DitCacheError):
    """An operation was called outside its contract (bad inputs, bad state)."""


class StaleCacheError(ContractViolation):
    """A utilization step tried to reuse a delta that was never computed."""


class NonFiniteError(ContractViolation):
    """A denoising run produced NaN/Inf; message names the step and block."""

    def __init__(self, message, step=None, block=None):
        super().__init__(message)
        self.step = step
        self.block = block
