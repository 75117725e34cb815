"""Exception hierarchy shared across the package."""


class RacmfError(Exception):
    """Base class for all package-specific errors."""


class SpecificationError(RacmfError):
    """A configuration or parameter violates its documented constraints."""


class DimensionError(RacmfError):
    """Array shapes are inconsistent with the operation's contract."""


class FormatError(RacmfError):
    """An on-disk artifact is malformed (header, payload, or checksum)."""


class NumericalError(RacmfError):
    """A computation produced non-finite values."""


class ContractError(RacmfError):
    """An internal invariant was violated (e.g. a frozen model changed)."""
