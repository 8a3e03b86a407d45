"""Exception types shared across the toolkit."""


class DataError(ValueError):
    """Malformed, missing or inconsistent input data."""


class NumericalError(ArithmeticError):
    """A computation produced a non-finite or undefined value."""


class CheckpointError(DataError):
    """A checkpoint file is corrupt or has an unsupported version."""
