"""Exception types raised across the package.

Every error derives from :class:`PorosynthError`. The CLI maps
:class:`ConfigError` to exit code 2, :class:`DataError` to 3 and
:class:`NumericalError` to 4.
"""


class PorosynthError(Exception):
    """Base class for all package errors."""


class ConfigError(PorosynthError):
    """Invalid configuration or unusable parameters."""


class DataError(PorosynthError):
    """Input data violates a precondition."""


class NumericalError(PorosynthError):
    """A numerical procedure diverged."""


# voxel-core
class PoreTooLarge(DataError):
    pass


# pore-metrics
class InsufficientPores(DataError):
    pass


# surface
class EmptySlice(DataError):
    pass


class WindowTooSmall(ConfigError):
    pass


class DoesNotFit(DataError):
    pass


# mst
class ScaleTooLarge(ConfigError):
    pass


class SizeMismatch(DataError):
    pass


class EnsembleTooSmall(DataError):
    pass


# autodiff
class ShapeMismatch(DataError):
    pass


class GraphConsumed(PorosynthError):
    """Raised when backward is called twice on the same graph."""


# synth / gan
class TooManyMembers(ConfigError):
    pass


class Diverged(NumericalError):
    pass


class EmptyDataset(DataError):
    pass


class AcceptanceTooLow(NumericalError):
    pass


# spatial-model / assembler
class NoPores(DataError):
    pass


class EmptyBank(DataError):
    pass
