"""Exception types shared across the package."""


class VmaeError(Exception):
    """Base class for all package errors."""


class InputError(VmaeError):
    """An input array or value violates a documented precondition."""


class ParameterError(VmaeError):
    """A scalar hyperparameter is outside its legal range."""


class StructuralError(VmaeError):
    """Shapes or index structures disagree with each other."""


class NumericError(VmaeError):
    """A value that must be finite (or finitely normalizable) is not."""


class ParseError(VmaeError):
    """A file could not be parsed; the message names file and location."""


class ConfigError(VmaeError):
    """A configuration object or file is inconsistent or has unknown keys."""


class CheckpointError(ParseError):
    """A checkpoint file is corrupt, truncated, or incompatible."""
