"""Exception hierarchy shared by every stage of the pipeline."""


class BmmAugmentError(Exception):
    """Base class for all package errors."""


class WrongMagic(BmmAugmentError):
    pass


class TruncatedPayload(BmmAugmentError):
    pass


class ZeroDimension(BmmAugmentError):
    pass


class LabelOutOfRange(BmmAugmentError):
    pass


class InsufficientData(BmmAugmentError):
    pass


class DimensionMismatch(BmmAugmentError, ValueError):
    pass


class LengthMismatch(BmmAugmentError, ValueError):
    pass


class ShapeMismatch(BmmAugmentError, ValueError):
    pass


class EmptyDataset(BmmAugmentError):
    pass


class EmptyTrainingSet(BmmAugmentError):
    pass


class BadComponentId(BmmAugmentError, IndexError):
    pass


class IoFailure(BmmAugmentError, OSError):
    pass


class TooFewMembers(BmmAugmentError):
    pass


class MissingComponent(BmmAugmentError):
    pass


class BadModelFile(BmmAugmentError):
    pass


class FitError(BmmAugmentError):
    """An EM fit failed inside a sweep; carries the offending (K, seed)."""

    def __init__(self, k, seed, cause):
        super().__init__(f"fit failed for K={k}, seed={seed}: {cause}")
        self.k = k
        self.seed = seed
        self.cause = cause


class StageError(BmmAugmentError):
    """A pipeline stage failed; the manifest on disk marks which one."""

    def __init__(self, stage, cause):
        super().__init__(f"pipeline stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
