"""Exception hierarchy shared across the toolkit.

Everything raised deliberately by this package derives from ToolkitError so
callers (and the command line front end) can catch one base class and map it
to a nonzero exit code without swallowing genuine bugs.
"""


class ToolkitError(Exception):
    """Base class for all errors raised on purpose by this package."""


class ConfigError(ToolkitError):
    """Invalid architecture config, operation attributes, or run settings."""


class ShapeMismatchError(ConfigError):
    """Tensor shapes disagree with what an operation requires.

    Messages name the offending dimension so failures during graph
    construction or execution point at the node to fix.
    """


class DataError(ToolkitError):
    """Problems with image files, metadata tables, or manifests."""


class SamplerError(DataError):
    """The batch sampler cannot satisfy its class-balance contract."""


class CheckpointError(ToolkitError):
    """Base class for checkpoint read/write failures."""


class CheckpointFormatError(CheckpointError):
    """The byte stream is not a well-formed checkpoint."""


class CheckpointCompatError(CheckpointError):
    """Checkpoint tensors do not line up with the target architecture."""


class NonFiniteGradientError(ToolkitError):
    """An optimizer step saw a NaN or Inf gradient; names the parameter."""


class PreconditionError(ToolkitError):
    """An operation's documented precondition does not hold for the input."""
