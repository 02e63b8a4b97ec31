"""Exception types raised across the package."""


class RelplanError(Exception):
    pass


class PlacementExhausted(RelplanError):
    """Rejection sampling could not place an object; the request is too crowded."""


class UnknownObject(RelplanError, KeyError):
    pass


class InapplicableAction(RelplanError):
    pass


class SubjectNotAllowed(RelplanError):
    pass


class NonFiniteResidual(RelplanError):
    pass


class InfeasibleResult(RelplanError):
    pass


class IoFailure(RelplanError, OSError):
    pass


class MalformedRecord(RelplanError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no


class ShapeMismatch(RelplanError, ValueError):
    pass


class NonFiniteActivation(RelplanError):
    pass


class NonFiniteGradient(RelplanError):
    pass


class EmptyDataset(RelplanError):
    pass


class ModelPredicateMissing(RelplanError):
    pass
