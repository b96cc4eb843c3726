class ContractViolation(ValueError):
    """Raised when an operation's preconditions do not hold (shapes, ranges, counts)."""


class ManifestError(ContractViolation):
    """A scene manifest is malformed; the message names the offending field."""


class NonFiniteError(ContractViolation):
    """NaN or infinity reached an operator boundary."""
