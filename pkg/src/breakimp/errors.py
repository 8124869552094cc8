"""Exception hierarchy shared by every breakimp module.

Every failure raised by the toolkit derives from :class:`PeToolError`. The
CLI maps the three middle-tier classes onto its exit codes.
"""
from __future__ import annotations


class PeToolError(Exception):
    """Base class for all toolkit errors."""


# -- malformed or unsupported input -------------------------------------------

class PeFormatError(PeToolError):
    """The input is not a PE file this toolkit can read."""


class BadDosMagic(PeFormatError):
    pass


class BadNtSignature(PeFormatError):
    pass


class UnsupportedMachineClass(PeFormatError):
    pass


class TruncatedFile(PeFormatError):
    pass


class MalformedSectionTable(PeFormatError):
    pass


class UnmappedRva(PeFormatError):
    pass


class UnmappedOffset(PeFormatError):
    pass


class MalformedDescriptor(PeFormatError):
    pass


class UnterminatedThunkArray(PeFormatError):
    pass


class MalformedRelocBlock(PeFormatError):
    pass


class OverlappingEdits(PeFormatError):
    pass


class EditOutOfBounds(PeFormatError):
    pass


class NoSymbolName(PeFormatError):
    """Paper-mode imphash met an ordinal import, which it cannot name."""


class OftFtMismatch(PeFormatError):
    pass


class RelocTargetUnmappable(PeFormatError):
    pass


# -- transform refused ----------------------------------------------------------

class TransformRefused(PeToolError):
    """The input is valid but the transform cannot be applied to it."""


class NoImportTable(TransformRefused):
    pass


class NothingToShuffle(TransformRefused):
    pass


class BoundImportsPresent(TransformRefused):
    pass


class NoRetargetPath(TransformRefused):
    pass


# -- internal consistency / verification ---------------------------------------

class InvalidPermutation(PeToolError):
    pass


class SlotNotInPermutation(PeToolError):
    pass


class UnresolvedImport(PeToolError):
    pass


class DanglingReference(PeToolError):
    pass


class EquivalenceCheckFailed(PeToolError):
    """The verifier rejected a transform output. Always a bug."""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class SpecInvalid(PeToolError):
    pass
