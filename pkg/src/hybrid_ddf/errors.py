"""Exception hierarchy shared across the package."""


class HybridDDFError(Exception):
    """Base class for all library errors."""


class ContractViolation(HybridDDFError, ValueError):
    """A caller broke an operation precondition."""


class ConfigurationError(HybridDDFError, ValueError):
    """Invalid scenario or model configuration."""


class UnderConstrainedError(HybridDDFError):
    """The normal equations of a factor graph are singular."""

    def __init__(self, keys, message=None):
        self.keys = list(keys)
        names = ", ".join(str(k) for k in self.keys) or "<unknown>"
        super().__init__(message or f"under-constrained variables: {names}")


class RelinearizationRequired(HybridDDFError):
    """Two densities disagree on a shared linearization point."""


class SamplingUnavailable(HybridDDFError):
    """Sampling was requested from an indefinite information form."""


class DecodeError(HybridDDFError, ValueError):
    """A stack payload could not be decoded."""


class LoadError(HybridDDFError, ValueError):
    """A classifier lookup grid could not be loaded."""
