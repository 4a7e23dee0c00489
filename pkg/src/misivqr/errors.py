"""Exception hierarchy shared by all modules."""


class MisIVQRError(Exception):
    """Base class for package errors."""


class DomainError(MisIVQRError, ValueError):
    """An argument lies outside the domain of the operation."""


class ConfigError(MisIVQRError, ValueError):
    """Invalid or inconsistent configuration."""


class EstimationError(MisIVQRError):
    """A sample quantity cannot be estimated (e.g. an empty instrument cell)."""


class BinDegeneracyError(EstimationError):
    """Too few distinct outcome values to form the requested bins."""


class ConstructionError(MisIVQRError):
    """The non-identification perturbation cannot be built for this model."""
