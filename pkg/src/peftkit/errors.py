"""Exception taxonomy shared across the package.

Every error raised on purpose derives from PeftKitError so callers (and
the CLI exit-code mapping) can distinguish usage, configuration,
numerical, and I/O failures.
"""


class PeftKitError(Exception):
    """Base class for all errors raised by peftkit."""


class DimensionError(PeftKitError):
    """Operand shapes are incompatible; message names both shapes."""


class RankError(PeftKitError):
    """Operation requires operands of a specific rank (e.g. matrices)."""


class DomainError(PeftKitError):
    """Input outside the mathematical domain of the operation."""


class ContractError(PeftKitError):
    """A caller-facing contract was violated (non-scalar loss, an
    oracle given a non-deterministic function, unserializable state)."""


class ConfigError(PeftKitError):
    """Invalid model, module, task, or run configuration."""


class SlotContractError(PeftKitError):
    """A hook returned values violating its slot's shape contract."""


class CompositionError(PeftKitError):
    """Module and base model cannot be composed (config mismatch,
    occupied slot, incompatible functional dimensions)."""


class TechniqueLookupError(PeftKitError):
    """Unknown technique name; message lists the known names."""


class IntegrityError(PeftKitError):
    """Checkpoint bytes fail checksum or structural validation."""


class CompatibilityError(PeftKitError):
    """Checkpoint fingerprint does not match the target base model."""
