"""Exception hierarchy shared across the package."""


class VgnslError(Exception):
    """Base class for all errors raised by this package."""


class BracketParseError(VgnslError):
    """Malformed bracketed tree text; carries the character offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.message = message
        self.offset = offset


class FormatError(VgnslError):
    """Corrupt or mismatched binary file (features, checkpoints)."""


class DataError(VgnslError):
    """Inconsistent inputs: count mismatches, bad manifests, bad shapes."""


class DegenerateInputError(VgnslError):
    """Zero-norm vectors, zero variance, and similar degenerate numerics."""


class ConfigError(VgnslError):
    """Invalid configuration value or unknown configuration key."""
