"""Exceptions raised by the fleming_viot_qsd package."""


class FlemingViotError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(FlemingViotError, ValueError):
    """An argument is outside its documented range."""


class DimensionMismatchError(FlemingViotError, ValueError):
    """Two objects that must share a dimension (or size) do not."""


class ModelError(FlemingViotError):
    """A model family or its parameters are invalid."""


class RebirthLoopError(FlemingViotError):
    """The resurrection loop exceeded its iteration cap."""


class GridError(FlemingViotError):
    """The grid reference cannot be built or iterated as requested."""


class TransportSizeError(FlemingViotError):
    """A transport problem exceeds the size guard of the exact solver."""


class FitError(FlemingViotError):
    """A rate or slope fit was refused."""


class ConfigError(FlemingViotError):
    """The run configuration is invalid."""
