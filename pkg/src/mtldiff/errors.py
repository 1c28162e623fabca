"""Exception hierarchy.

Everything raised deliberately by this package derives from ``MtldiffError``
so the CLI can catch one type, print a single diagnostic line, and exit
nonzero without a traceback.
"""


class MtldiffError(Exception):
    """Base class for all errors raised by mtldiff."""


class SchemaError(MtldiffError):
    """A config file has a missing, unknown, or ill-typed key."""


class FormatError(MtldiffError):
    """An artifact file is corrupt or does not match its declared layout."""


class VersionError(FormatError):
    """An artifact declares a format version this build does not understand."""


class InfeasibleClusteringError(MtldiffError):
    """No contiguous partition satisfies the requested size bounds."""


class NonConvergenceError(MtldiffError):
    """An iterative solver exhausted its budget without meeting tolerance."""


class NotPositiveDefiniteError(MtldiffError):
    """A Gram matrix that must be positive definite is not."""


class RunLockedError(MtldiffError):
    """Another process holds the lock on the run directory."""
