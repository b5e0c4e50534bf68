"""Exception hierarchy.

Precondition violations derive from ``PreconditionError`` (CLI exit code 2);
failures inside a running stage derive from ``StageError`` (exit code 3).
"""


class PoseFuseError(Exception):
    pass


class PreconditionError(PoseFuseError, ValueError):
    pass


class StageError(PoseFuseError, RuntimeError):
    def __init__(self, message, stage=None, diagnostics=None):
        self.stage = stage
        self.diagnostics = dict(diagnostics or {})
        prefix = f"[{stage}] " if stage else ""
        super().__init__(prefix + message)


class DegenerateAlignment(PreconditionError):
    pass


class DegeneratePair(PreconditionError):
    pass


class DimensionMismatch(PreconditionError):
    pass


class IdMismatch(PreconditionError):
    pass


class ImageTooSmall(PreconditionError):
    pass


class ZeroDescriptor(PreconditionError):
    pass


class InsufficientCorrespondence(StageError):
    pass


class AllCandidatesDegenerate(StageError):
    pass


class NoVerifiedPairs(StageError):
    pass


class NonFiniteLoss(StageError):
    pass
