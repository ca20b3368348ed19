"""Exception types shared across the package."""


class MmdLoraError(Exception):
    """Base class for all package errors."""


class DimensionError(MmdLoraError):
    """Array shapes are incompatible for the requested operation."""


class DomainError(MmdLoraError):
    """Math-domain violation, e.g. log of a non-positive input."""


class TokenizationError(MmdLoraError):
    """A prompt word is missing from the encoder vocabulary."""


class ConfigError(MmdLoraError):
    """Invalid configuration value; message carries the field path."""


class CheckpointError(MmdLoraError):
    """Checkpoint file is malformed or inconsistent with the config."""


class ContractError(MmdLoraError):
    """An API precondition was violated by the caller."""


class EmptyMaskError(MmdLoraError):
    """No pixel survives the evaluation mask; refusing to emit NaN."""


class NumericsError(MmdLoraError):
    """A non-finite value was produced during training."""
