"""Exception hierarchy shared across the package."""


class MomeError(Exception):
    """Base class for all package errors."""


class DimensionError(MomeError, ValueError):
    """A tensor or volume has the wrong shape along some axis."""


class ContractError(MomeError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(MomeError, ValueError):
    """A configuration file or option is malformed."""


class GenerationError(MomeError, RuntimeError):
    """A phantom could not be generated under the requested constraints."""


class DivergenceError(MomeError, RuntimeError):
    """Training produced a non-finite loss."""


class FormatError(MomeError, IOError):
    """A binary file does not follow its on-disk layout."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass
