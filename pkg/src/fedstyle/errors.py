"""Exception types raised across the package."""


class FormatError(ValueError):
    """A binary artifact could not be decoded."""


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class VersionError(FormatError):
    pass


class ManifestMismatchError(ValueError):
    """Parameter layouts disagree (checkpoint vs. model config, or client vs. client)."""


class InvariantViolation(RuntimeError):
    """A runtime invariant that valid inputs can never break was broken."""
