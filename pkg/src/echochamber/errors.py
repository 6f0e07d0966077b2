"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input data violates a documented constraint."""


class ParseError(ValidationError):
    """A line of an input file could not be parsed; message carries the line number."""
