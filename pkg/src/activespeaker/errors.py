"""Exception hierarchy shared by the library and the CLI."""


class ActiveSpeakerError(Exception):
    pass


class DimensionMismatchError(ActiveSpeakerError, ValueError):
    """Model and feature vectors have incompatible lengths."""


class DataError(ActiveSpeakerError, ValueError):
    """Input data violates a precondition (empty, single-class, malformed)."""


class ParseError(DataError):
    """A dataset or model file could not be parsed.

    ``line`` is the 1-based line number in ``path`` when known.
    """

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


class NumericalError(ActiveSpeakerError, ArithmeticError):
    """The optimizer produced a non-finite objective or gradient."""
