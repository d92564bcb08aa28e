"""Exception types shared across the package."""


class RefSegError(Exception):
    """Base class for all refseg3d errors."""


class ShapeError(RefSegError, ValueError):
    """Operands have incompatible shapes; the message names both."""


class IndexRangeError(RefSegError, IndexError):
    """A row index falls outside the source tensor."""


class ContractError(RefSegError, ValueError):
    """A documented precondition was violated by the caller."""


class DegenerateInputError(RefSegError, ValueError):
    """Input collapsed to an empty structure (e.g. a stage with no voxels)."""


class LabelError(RefSegError, ValueError):
    """A referenced label id is absent from the label set."""


class GenerationError(RefSegError, RuntimeError):
    """Procedural scene or query generation could not satisfy its spec."""


class TrainingError(RefSegError, RuntimeError):
    """The optimization loop hit a non-recoverable state (NaN loss/grad)."""


class CheckpointError(RefSegError, ValueError):
    """A checkpoint file is malformed or incompatible."""


class ModelError(RefSegError, RuntimeError):
    """A forward pass produced non-finite values; names the module."""
