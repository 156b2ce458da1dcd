"""Exception types shared across the package.

Exit-code mapping used by the CLI: usage/parse/IO errors -> 1,
validation (invariant) errors -> 2, numeric failures -> 3.
"""


class CamoSplatError(Exception):
    """Base class for all package errors."""


class ParseError(CamoSplatError):
    """Malformed input: scene file, run config, or CLI config string."""


class ValidationError(CamoSplatError):
    """A domain invariant was violated (bad field value, broken reference)."""


class NumericError(CamoSplatError):
    """A non-finite value was produced somewhere in a numeric pass."""


def check_finite(name: str, *arrays) -> None:
    """Raise NumericError if any array contains NaN or infinity."""
    import numpy as np

    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite values detected in {name}")
