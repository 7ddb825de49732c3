"""Exception types shared across the package.

Everything derives from ValueError (except NumericError) so callers that
only know about the standard taxonomy still behave sensibly.
"""


class ContractError(ValueError):
    """A caller violated a documented precondition."""


class ShapeMismatchError(ContractError):
    """Operands have incompatible shapes; message names the op and both shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        pretty = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {pretty}")


class DomainError(ValueError):
    """A numeric argument lies outside the mathematical domain of an operation."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


class TrainingDivergedError(NumericError):
    """Training produced a non-finite loss; carries epoch/step context."""

    def __init__(self, message: str, epoch: int, step: int):
        super().__init__(f"{message} (epoch {epoch}, step {step})")
        self.epoch = epoch
        self.step = step


class FormatError(ValueError):
    """A serialized file is malformed; carries the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
