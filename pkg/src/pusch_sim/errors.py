"""Exceptions raised by the simulator."""


class PuschSimError(Exception):
    """Base class for every error the simulator raises on purpose."""


class AssetError(PuschSimError):
    """A packaged data file is corrupt, truncated or malformed."""


class CodeConstructionError(PuschSimError):
    """An LDPC code can't be built from the given base graph."""


class LengthMismatchError(PuschSimError, ValueError):
    """An input vector doesn't have the length the operation expects."""


class ConfigurationError(PuschSimError):
    """Invalid simulation or signal configuration."""


class SignalError(PuschSimError):
    """A signal can't be processed (empty, silent or too short)."""
