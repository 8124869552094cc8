"""PE domain types and RVA/file-offset arithmetic."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Union

from .errors import UnmappedOffset, UnmappedRva

# COFF characteristics
IMAGE_FILE_RELOCS_STRIPPED = 0x0001
IMAGE_FILE_EXECUTABLE_IMAGE = 0x0002
IMAGE_FILE_LARGE_ADDRESS_AWARE = 0x0020
IMAGE_FILE_32BIT_MACHINE = 0x0100

# section characteristics
IMAGE_SCN_CNT_CODE = 0x00000020
IMAGE_SCN_CNT_INITIALIZED_DATA = 0x00000040
IMAGE_SCN_CNT_UNINITIALIZED_DATA = 0x00000080
IMAGE_SCN_MEM_EXECUTE = 0x20000000
IMAGE_SCN_MEM_READ = 0x40000000
IMAGE_SCN_MEM_WRITE = 0x80000000

# data directory slots
DIR_IMPORT = 1
DIR_BASERELOC = 5
DIR_BOUND_IMPORT = 11
DIR_IAT = 12

# base relocation types
IMAGE_REL_BASED_ABSOLUTE = 0
IMAGE_REL_BASED_HIGHLOW = 3
IMAGE_REL_BASED_DIR64 = 10

OPTIONAL_MAGIC_PE32 = 0x10B
OPTIONAL_MAGIC_PE32PLUS = 0x20B


class MachineClass(enum.Enum):
    PE32 = "PE32"
    PE32PLUS = "PE32PLUS"

    @property
    def thunk_width(self) -> int:
        return 4 if self is MachineClass.PE32 else 8

    @property
    def ordinal_flag(self) -> int:
        return 1 << (self.thunk_width * 8 - 1)

    @property
    def reloc_type(self) -> int:
        return IMAGE_REL_BASED_HIGHLOW if self is MachineClass.PE32 else IMAGE_REL_BASED_DIR64


@dataclass(frozen=True)
class SectionHeader:
    name: bytes
    virtual_address: int
    virtual_size: int
    raw_offset: int
    raw_size: int
    characteristics: int

    @property
    def label(self) -> str:
        return self.name.rstrip(b"\0").decode("latin-1")

    @property
    def executable(self) -> bool:
        return bool(self.characteristics & (IMAGE_SCN_MEM_EXECUTE | IMAGE_SCN_CNT_CODE))

    @property
    def virtual_extent(self) -> int:
        return max(self.virtual_size, self.raw_size)

    def contains_rva(self, rva: int) -> bool:
        return self.virtual_address <= rva < self.virtual_address + self.virtual_extent


@dataclass(frozen=True)
class Ordinal:
    value: int


@dataclass(frozen=True)
class ByName:
    hint: int
    name: str
    name_rva: int


Payload = Union[Ordinal, ByName]


@dataclass(frozen=True)
class ThunkSlot:
    ft_slot_rva: int
    oft_slot_rva: Optional[int]
    payload: Payload
    # raw value stored in the array the payload was decoded from (OFT if present)
    value: int
    # raw value stored in the FT slot; differs from ``value`` only for bound images
    ft_value: int

    @property
    def symbol(self) -> Union[str, int]:
        """Symbol name, or the ordinal number for ordinal imports."""
        if isinstance(self.payload, Ordinal):
            return self.payload.value
        return self.payload.name


@dataclass(frozen=True)
class ImportDescriptor:
    oft_rva: int
    time_date_stamp: int
    forwarder_chain: int
    name_rva: int
    ft_rva: int
    module_name: str
    thunks: tuple[ThunkSlot, ...]
    # file offset of the 20-byte descriptor record
    offset: int = 0

    @property
    def bound(self) -> bool:
        return self.time_date_stamp != 0


@dataclass(frozen=True)
class RelocBlock:
    page_rva: int
    entries: tuple[tuple[int, int], ...]

    def targets(self, reloc_type: int) -> list[int]:
        return [self.page_rva + off for typ, off in self.entries if typ == reloc_type]


@dataclass(frozen=True)
class PeImage:
    raw: bytes
    machine_class: MachineClass
    image_base: int
    e_lfanew: int
    sections: tuple[SectionHeader, ...]
    data_directories: tuple[tuple[int, int], ...]
    characteristics: int
    checksum_offset: int
    # file offset of data directory 0; entry i lives at +8*i
    data_directory_offset: int = 0
    size_of_image: int = 0
    entry_point: int = 0
    _header_limit: int = field(default=0, repr=False, compare=False)

    @property
    def thunk_width(self) -> int:
        return self.machine_class.thunk_width

    @property
    def relocs_stripped(self) -> bool:
        return bool(self.characteristics & IMAGE_FILE_RELOCS_STRIPPED)

    def directory(self, index: int) -> tuple[int, int]:
        if index < len(self.data_directories):
            return self.data_directories[index]
        return (0, 0)

    def rva_to_offset(self, rva: int) -> int:
        return rva_to_offset(self, rva)

    def offset_to_rva(self, offset: int) -> int:
        return offset_to_rva(self, offset)

    def range_offset(self, rva: int, size: int) -> int:
        """File offset of ``size`` bytes at ``rva``; the whole range must be mapped
        contiguously by one region."""
        return range_offset(self, rva, size)

    def read(self, rva: int, size: int) -> bytes:
        off = self.range_offset(rva, size)
        return self.raw[off:off + size]

    def read_uint(self, rva: int, size: int) -> int:
        return int.from_bytes(self.read(rva, size), "little")


def header_limit(sections, file_size: int) -> int:
    """End of the identity-mapped header region."""
    limit = file_size
    for s in sections:
        if s.raw_size:
            limit = min(limit, s.raw_offset)
        limit = min(limit, s.virtual_address)
    return limit


def _find_section(image: PeImage, rva: int) -> Optional[SectionHeader]:
    for s in image.sections:
        if s.contains_rva(rva):
            return s
    return None


def rva_to_offset(image: PeImage, rva: int) -> int:
    if 0 <= rva < image._header_limit:
        return rva
    s = _find_section(image, rva)
    if s is None:
        raise UnmappedRva(f"RVA {rva:#x} lies in no section")
    delta = rva - s.virtual_address
    if delta >= s.raw_size:
        raise UnmappedRva(f"RVA {rva:#x} lies beyond the raw data of {s.label!r}")
    return s.raw_offset + delta


def range_offset(image: PeImage, rva: int, size: int) -> int:
    if rva < 0 or size < 0:
        raise UnmappedRva(f"invalid range {rva:#x}+{size}")
    if rva + size <= image._header_limit:
        return rva
    s = _find_section(image, rva)
    if s is None:
        raise UnmappedRva(f"RVA {rva:#x} lies in no section")
    delta = rva - s.virtual_address
    if delta + size > s.raw_size:
        raise UnmappedRva(f"range {rva:#x}+{size} runs past the raw data of {s.label!r}")
    return s.raw_offset + delta


def offset_to_rva(image: PeImage, offset: int) -> int:
    if 0 <= offset < image._header_limit:
        return offset
    for s in image.sections:
        if s.raw_offset <= offset < s.raw_offset + s.raw_size:
            return s.virtual_address + (offset - s.raw_offset)
    raise UnmappedOffset(f"file offset {offset:#x} is not mapped by any section")
