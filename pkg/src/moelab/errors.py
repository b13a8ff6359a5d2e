"""Exception hierarchy shared across the toolkit."""


class MoelabError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(MoelabError):
    """Inputs violate a documented precondition or invariant."""


class NumericsError(MoelabError):
    """A computation produced non-finite values."""


class FormatError(MoelabError):
    """Base class for file-format errors."""


class VersionMismatchError(FormatError):
    """File carries an unsupported format version."""


class ChecksumError(FormatError):
    """File body does not match its trailing checksum."""


class TruncatedFileError(FormatError):
    """File is shorter (or longer) than its header promises."""


class HeaderMismatchError(ValidationError):
    """Artifacts that must share header metadata do not."""
