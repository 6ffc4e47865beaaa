"""Exception taxonomy shared by every evomtl module."""


class EvoMtlError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(EvoMtlError):
    """Tensor shapes incompatible with the requested operation."""


class ConfigError(EvoMtlError):
    """A configuration value is outside its permitted domain."""


class DataError(EvoMtlError):
    """Input data (files, labels, corpora) is malformed or insufficient."""


class StateError(EvoMtlError):
    """An operation was invoked in a state that does not permit it."""


class NumericError(EvoMtlError):
    """Non-finite values appeared where finite math is required."""


class ParseError(EvoMtlError):
    """Serialized bytes could not be decoded into a valid object."""


class AssemblyError(EvoMtlError):
    """A genotype could not be turned into a runnable network."""


class HarnessError(EvoMtlError):
    """Distributed evaluation failed at the coordination level."""
