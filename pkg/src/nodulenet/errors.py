"""Exception hierarchy shared across the package."""


class NoduleNetError(Exception):
    """Base class for all package-specific errors."""


class MalformedFile(NoduleNetError):
    """An image file could not be decoded or has an impossible size."""


class SpecMismatch(NoduleNetError):
    """Decoded image disagrees with the declared dataset format."""


class SchemaError(NoduleNetError):
    """A delimited metadata file is missing mandatory columns."""


class RangeError(NoduleNetError):
    """Annotation coordinates fall outside the image bounds."""


class MissingMask(NoduleNetError):
    """An operation that needs a lung mask was given a record without one."""


class LabelError(NoduleNetError):
    """A bounding-box row with an unexpected label was passed through."""


class CurationListMissing(NoduleNetError):
    """The external-dataset curation id list is required but absent."""


class DuplicateId(NoduleNetError):
    """Image ids handed to the fold planner are not unique."""


class ShapeMismatch(NoduleNetError):
    """Two arrays that must share a shape do not."""


class SpecError(NoduleNetError):
    """A model specification violates its structural invariants."""


class ShapeError(NoduleNetError):
    """An input image does not match the model's expected dimensions."""


class InsufficientHistory(NoduleNetError):
    """Epoch selection needs at least three epochs of metrics."""


class NonFiniteLoss(NoduleNetError):
    """Training produced a NaN/Inf loss; aborted with diagnostics."""


class MissingCheckpoint(NoduleNetError):
    """A checkpoint file needed for ensembling does not exist."""


class EmptySet(NoduleNetError):
    """An aggregate was requested over zero rated images."""


class StageDependencyError(NoduleNetError):
    """A pipeline stage was invoked before its upstream artifacts exist."""


class PartialFailure(NoduleNetError):
    """Some experiment cells failed; the rest completed.

    ``failures`` maps cell key to the stringified error.
    """

    def __init__(self, failures):
        self.failures = dict(failures)
        keys = ", ".join(sorted(self.failures))
        super().__init__(f"{len(self.failures)} cell(s) failed: {keys}")


class DegenerateMask(UserWarning):
    """A synthesized nodule mask had to clamp its radius up to 1 pixel."""
