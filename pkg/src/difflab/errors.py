"""Exception taxonomy shared across modules.

ValidationFailure maps to exit code 1 in the command-line driver,
NumericalAbort (and the sampler's subclass of it) to exit code 2.
"""


class ValidationFailure(Exception):
    """Inputs or assumptions rejected before any numerics ran."""


class NumericalAbort(RuntimeError):
    """A computation produced non-finite values and cannot continue."""
