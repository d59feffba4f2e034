"""Exception hierarchy shared by every module."""

from __future__ import annotations


class AvrRopError(Exception):
    """Base class for all domain errors raised by this package."""


class MissingTrailingWord(AvrRopError):
    pass


class OperandOutOfRange(AvrRopError):
    pass


class UnsupportedMnemonic(AvrRopError):
    pass


class RangeOutOfBounds(AvrRopError):
    pass


class ChecksumMismatch(AvrRopError):
    pass


class MalformedRecord(AvrRopError):
    pass


class AddressOverflow(AvrRopError):
    pass


class UnmodeledInstruction(AvrRopError):
    pass


class NoChainFound(AvrRopError):
    pass


class ConstraintUnsatisfiable(AvrRopError):
    pass


class PayloadTooLong(AvrRopError):
    pass


class MalwareTooLarge(AvrRopError):
    pass


class UnalignedDestination(AvrRopError):
    pass


class RegionCollision(AvrRopError):
    pass


class PacketTooLarge(AvrRopError):
    pass
