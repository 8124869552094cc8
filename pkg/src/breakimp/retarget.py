"""Byte-pattern scan for ``call/jmp [slot]`` sites and operand retargeting.

Used as the fallback when an image has no relocations, and for every
RIP-relative site in PE32+ images (relocations never cover those).
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Collection, Iterator, Mapping

from .errors import SlotNotInPermutation
from .model import MachineClass, PeImage

OPCODE = 0xFF
MODRM_CALL = 0x15
MODRM_JMP = 0x25
SITE_LENGTH = 6


class SiteKind(enum.Enum):
    CALL_INDIRECT = "call"
    JMP_INDIRECT = "jmp"


class Addressing(enum.Enum):
    ABSOLUTE32 = "abs32"
    RIP_RELATIVE32 = "rip32"


@dataclass(frozen=True)
class CallSite:
    instr_rva: int
    kind: SiteKind
    operand_offset: int
    addressing: Addressing
    referenced_slot_rva: int


@dataclass(frozen=True)
class ScanHit:
    """A pattern match in a code buffer, before slot filtering."""
    position: int
    kind: SiteKind
    target_rva: int


def iter_patterns(code: bytes, start_rva: int, base: int, addressing: Addressing) -> Iterator[ScanHit]:
    """Yield every FF 15 / FF 25 pattern in ``code`` with the RVA its operand addresses.

    ``base`` is the address absolute operands are relative to. Hits may
    overlap; :func:`scan_buffer` decides which ones qualify.
    """
    find = code.find
    pos = find(b"\xff", 0, len(code) - SITE_LENGTH + 1)
    while pos >= 0:
        modrm = code[pos + 1]
        if modrm in (MODRM_CALL, MODRM_JMP):
            kind = SiteKind.CALL_INDIRECT if modrm == MODRM_CALL else SiteKind.JMP_INDIRECT
            if addressing is Addressing.ABSOLUTE32:
                target = struct.unpack_from("<I", code, pos + 2)[0] - base
            else:
                disp = struct.unpack_from("<i", code, pos + 2)[0]
                target = start_rva + pos + SITE_LENGTH + disp
            yield ScanHit(pos, kind, target)
        pos = find(b"\xff", pos + 1, len(code) - SITE_LENGTH + 1)


def scan_buffer(
    code: bytes,
    start_rva: int,
    base: int,
    addressing: Addressing,
    accept: Collection[int],
) -> tuple[list[ScanHit], int]:
    """Left-to-right scan keeping hits whose target is in ``accept``.

    Returns the kept hits and the number of patterns that were ignored.
    Scanning resumes after the 6-byte extent of each kept hit.
    """
    kept = []
    ignored = 0
    resume = 0
    for hit in iter_patterns(code, start_rva, base, addressing):
        if hit.position < resume:
            continue
        if hit.target_rva in accept:
            kept.append(hit)
            resume = hit.position + SITE_LENGTH
        else:
            ignored += 1
    return kept, ignored


def addressing_for(machine_class: MachineClass) -> Addressing:
    if machine_class is MachineClass.PE32:
        return Addressing.ABSOLUTE32
    return Addressing.RIP_RELATIVE32


def scan_iat_references_detailed(image: PeImage, slot_rvas: Collection[int]) -> tuple[list[CallSite], int]:
    addressing = addressing_for(image.machine_class)
    slots = frozenset(slot_rvas)
    sites = []
    ignored = 0
    for section in image.sections:
        if not section.executable or not section.raw_size:
            continue
        code = image.raw[section.raw_offset:section.raw_offset + section.raw_size]
        hits, skipped = scan_buffer(code, section.virtual_address, image.image_base, addressing, slots)
        ignored += skipped
        for hit in hits:
            sites.append(CallSite(
                instr_rva=section.virtual_address + hit.position,
                kind=hit.kind,
                operand_offset=section.raw_offset + hit.position + 2,
                addressing=addressing,
                referenced_slot_rva=hit.target_rva,
            ))
    return sites, ignored


def scan_iat_references(image: PeImage, slot_rvas: Collection[int]) -> list[CallSite]:
    return scan_iat_references_detailed(image, slot_rvas)[0]


def retarget_call_sites(sites: list[CallSite], mapping: Mapping[int, int], image: PeImage) -> list[tuple[int, bytes]]:
    """Rewrite each site's operand to address the slot its symbol moved to.

    ``mapping`` is the combined old-slot to new-slot map of a permutation.
    """
    edits = []
    for site in sites:
        if site.referenced_slot_rva not in mapping:
            raise SlotNotInPermutation(f"site at {site.instr_rva:#x} reads unknown slot {site.referenced_slot_rva:#x}")
        new = mapping[site.referenced_slot_rva]
        if new == site.referenced_slot_rva:
            continue
        if site.addressing is Addressing.ABSOLUTE32:
            operand = struct.pack("<I", (image.image_base + new) & 0xFFFFFFFF)
        else:
            operand = struct.pack("<i", new - (site.instr_rva + SITE_LENGTH))
        edits.append((site.operand_offset, operand))
    return edits
