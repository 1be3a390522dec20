"""Exception taxonomy.

ConfigurationError covers bad user input (unknown datum, out-of-range level,
incompatible meshes); the CLI maps it to exit code 1.  NumericalError and its
subclasses cover runtime failures of the solver itself (blow-up, failed
eigensolve, failed projection); the CLI maps those to exit code 2.
"""


class FnrdError(Exception):
    """Base class for all package errors."""


class ConfigurationError(FnrdError):
    """Invalid configuration or arguments."""


class MeshMismatchError(ConfigurationError):
    """Operands live on incompatible meshes."""


class NumericalError(FnrdError):
    """A numerical computation failed."""


class BlowUpError(NumericalError):
    """Non-finite values appeared in a state or intermediate quantity."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class DecompositionError(NumericalError):
    """The generalized eigendecomposition failed or is out of supported range."""


class ProjectionError(NumericalError):
    """An L2 projection could not be evaluated or solved."""
