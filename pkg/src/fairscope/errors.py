"""Exception types shared across the package."""


class FairscopeError(Exception):
    """Base class for all errors raised by fairscope."""


class DataError(FairscopeError):
    """Malformed input data: bad CSV, unknown columns, unseen factor levels."""


class FitError(FairscopeError):
    """A model could not be fitted: rank deficiency, separation, no convergence."""
