"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A model, checkpoint, or run configuration is inconsistent or incomplete."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values (NaN/Inf)."""


class ParseError(ValueError):
    """A data file could not be parsed; message names the file/line."""
