"""Exception types shared across the package.

The CLI maps these onto process exit codes: usage problems exit 1, bad
data exits 2, numerical failures exit 3.
"""


class MelkeyError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(MelkeyError):
    """Bad command-line invocation or configuration."""


class DataError(MelkeyError):
    """Invalid input data: malformed annotations, too-short audio, shape
    mismatches, out-of-range labels."""


class NumericalError(MelkeyError):
    """Non-finite values or a diverging optimization."""
