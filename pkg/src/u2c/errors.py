"""Exception hierarchy. Each family maps to a CLI exit code."""


class U2CError(Exception):
    exit_code = 1


class SchemaError(U2CError):
    """Input file layout does not match the declared columns or dimensions."""

    exit_code = 3


class DataError(U2CError):
    """A value in the input violates a data invariant (non-finite, bad label)."""

    exit_code = 3


class CompatibilityError(U2CError):
    exit_code = 3


class InputError(U2CError):
    """A caller supplied arguments a function cannot work with."""

    exit_code = 3


class FitError(U2CError):
    exit_code = 3


class NumericError(U2CError):
    exit_code = 5


class ModelFormatError(U2CError):
    """Malformed, out-of-version or invariant-violating model file."""

    exit_code = 3


class VerificationError(U2CError):
    exit_code = 4

    def __init__(self, clause: str, detail: str = ""):
        self.clause = clause
        super().__init__(f"{clause}: {detail}" if detail else clause)
