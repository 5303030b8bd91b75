"""Exception hierarchy shared by every xfq module."""


class XfqError(Exception):
    """Base class for all library errors."""


class ShapeError(XfqError, ValueError):
    """Two tensors (or a tensor and a layer) disagree on a dimension."""

    def __init__(self, what: str, expected, got):
        self.what = what
        self.expected = expected
        self.got = got
        super().__init__(f"{what}: expected {expected}, got {got}")


class GeometryError(XfqError, ValueError):
    pass


class QuantizationError(XfqError, ValueError):
    pass


class FormatError(XfqError):
    """Malformed XFQT/XFQM file. ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int | None = None, path=None):
        self.message = message
        self.offset = offset
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}: "
        if offset is not None:
            where += f"byte {offset}: "
        super().__init__(where + message)


class InstrumentationError(XfqError, RuntimeError):
    pass


class StaleCacheError(XfqError, RuntimeError):
    pass


class GradCheckError(XfqError, RuntimeError):
    pass


class TrainingDivergedError(XfqError, ArithmeticError):
    def __init__(self, step: int, loss: float):
        self.step = step
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at step {step}")
