class InvalidArgumentError(ValueError):
    """An argument has the wrong shape, range or curvature."""


class UsageError(Exception):
    """The command line can't be interpreted."""


class FormatError(Exception):
    """A file doesn't follow its expected format."""


class InternalConsistencyError(Exception):
    """Two data structures that must agree don't."""


class NumericalFailureError(Exception):
    """A computation produced a non-finite value."""


class DegenerateAggregationError(NumericalFailureError):
    """A codeword aggregate can't be normalized back onto the manifold."""
