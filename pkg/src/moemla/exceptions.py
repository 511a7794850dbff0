"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """A configuration value is invalid or inconsistent."""


class CacheError(RuntimeError):
    """A KV cache would exceed its capacity."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed (bad magic, header or manifest)."""


class DecodeError(ValueError):
    """A token id has no mapping in the active tokenizer."""
