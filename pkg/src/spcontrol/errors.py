"""Exception types shared across the package."""


class NumericsError(RuntimeError):
    """A solver or iteration produced non-finite or inconsistent values."""
