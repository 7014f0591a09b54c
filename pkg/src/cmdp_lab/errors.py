"""Exception types shared across the package."""


class CMDPLabError(Exception):
    """Base class for all package errors."""


class InvalidInstance(CMDPLabError):
    """Features and weights do not produce valid kernels or rewards."""


class GenerationFailed(CMDPLabError):
    """The random instance generator could not produce a valid instance."""


class AllModelsImpossible(CMDPLabError):
    """Every candidate in a finite model class assigns zero likelihood to the data."""


class DimMismatch(CMDPLabError, ValueError):
    """A vector does not match the dimension of the accumulator it is fed to."""


class MissingN(CMDPLabError, ValueError):
    """A schedule that needs the planned number of episodes was called without it."""


class InvalidKernel(CMDPLabError, ValueError):
    """A transition table handed to the planner has a non-stochastic row."""


class ConfigError(CMDPLabError, ValueError):
    """An experiment configuration could not be parsed or is out of range."""
