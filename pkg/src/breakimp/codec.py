"""Parse PE headers, import and relocation directories; write byte patches back.

Parsing is strict: every out-of-range read turns into a typed
:class:`~breakimp.errors.PeFormatError`. Serialization never re-lays-out the
file, it only overwrites bytes at fixed offsets.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import (
    BadDosMagic,
    BadNtSignature,
    EditOutOfBounds,
    MalformedDescriptor,
    MalformedRelocBlock,
    MalformedSectionTable,
    NoImportTable,
    OverlappingEdits,
    TruncatedFile,
    UnmappedRva,
    UnsupportedMachineClass,
    UnterminatedThunkArray,
)
from .model import (
    DIR_BASERELOC,
    DIR_BOUND_IMPORT,
    DIR_IMPORT,
    OPTIONAL_MAGIC_PE32,
    OPTIONAL_MAGIC_PE32PLUS,
    ByName,
    ImportDescriptor,
    MachineClass,
    Ordinal,
    PeImage,
    RelocBlock,
    SectionHeader,
    ThunkSlot,
    header_limit,
)

Edit = tuple[int, bytes]

DOS_HEADER_SIZE = 64
DESCRIPTOR_SIZE = 20
MAX_NAME_LENGTH = 4096
MAX_DESCRIPTORS = 4096
MAX_THUNKS = 65536


@dataclass(frozen=True)
class ParsedDirectories:
    imports: tuple[ImportDescriptor, ...]
    relocs: tuple[RelocBlock, ...]


def _u16(buf: bytes, off: int) -> int:
    return struct.unpack_from("<H", buf, off)[0]


def _u32(buf: bytes, off: int) -> int:
    return struct.unpack_from("<I", buf, off)[0]


def parse_pe(data: bytes) -> PeImage:
    data = bytes(data)
    size = len(data)
    if size < DOS_HEADER_SIZE:
        raise TruncatedFile(f"{size} bytes is shorter than a DOS header")
    if data[:2] != b"MZ":
        raise BadDosMagic("missing MZ signature")
    e_lfanew = _u32(data, 0x3C)
    # signature + COFF header
    if e_lfanew + 24 > size:
        raise TruncatedFile(f"e_lfanew {e_lfanew:#x} points past the end of the file")
    if data[e_lfanew:e_lfanew + 4] != b"PE\0\0":
        raise BadNtSignature("missing PE\\0\\0 signature")

    coff = e_lfanew + 4
    n_sections = _u16(data, coff + 2)
    size_of_optional = _u16(data, coff + 16)
    characteristics = _u16(data, coff + 18)
    opt = coff + 20
    if opt + 2 > size:
        raise TruncatedFile("optional header missing")
    magic = _u16(data, opt)
    if magic == OPTIONAL_MAGIC_PE32:
        machine_class = MachineClass.PE32
        fixed, dir_count_at = 96, 92
    elif magic == OPTIONAL_MAGIC_PE32PLUS:
        machine_class = MachineClass.PE32PLUS
        fixed, dir_count_at = 112, 108
    else:
        raise UnsupportedMachineClass(f"optional header magic {magic:#x}")
    if size_of_optional < fixed or opt + fixed > size:
        raise TruncatedFile("optional header is truncated")

    if machine_class is MachineClass.PE32:
        image_base = _u32(data, opt + 28)
    else:
        image_base = struct.unpack_from("<Q", data, opt + 24)[0]
    entry_point = _u32(data, opt + 16)
    size_of_image = _u32(data, opt + 56)
    checksum_offset = opt + 64

    dir_offset = opt + fixed
    n_dirs = min(_u32(data, opt + dir_count_at), 16, (size_of_optional - fixed) // 8)
    if dir_offset + 8 * n_dirs > size:
        raise TruncatedFile("data directories are truncated")
    directories = tuple(struct.unpack_from("<II", data, dir_offset + 8 * i) for i in range(n_dirs))

    table = opt + size_of_optional
    if table + 40 * n_sections > size:
        raise TruncatedFile("section table is truncated")
    sections = []
    for i in range(n_sections):
        off = table + 40 * i
        name = data[off:off + 8]
        vsize, va, raw_size, raw_off = struct.unpack_from("<IIII", data, off + 8)
        flags = _u32(data, off + 36)
        if raw_size and raw_off + raw_size > size:
            raise TruncatedFile(f"section {i} raw data runs past the end of the file")
        sections.append(SectionHeader(name, va, vsize, raw_off if raw_size else 0, raw_size, flags))
    _check_sections(sections)

    return PeImage(
        raw=data,
        machine_class=machine_class,
        image_base=image_base,
        e_lfanew=e_lfanew,
        sections=tuple(sections),
        data_directories=directories,
        characteristics=characteristics,
        checksum_offset=checksum_offset,
        data_directory_offset=dir_offset,
        size_of_image=size_of_image,
        entry_point=entry_point,
        _header_limit=header_limit(sections, size),
    )


def _check_sections(sections: Sequence[SectionHeader]) -> None:
    spans = sorted((s.raw_offset, s.raw_offset + s.raw_size) for s in sections if s.raw_size)
    for (_, end), (start, _) in zip(spans, spans[1:]):
        if start < end:
            raise MalformedSectionTable("section raw ranges overlap")


def _read_cstring(image: PeImage, rva: int) -> str:
    try:
        off = image.rva_to_offset(rva)
    except UnmappedRva as exc:
        raise MalformedDescriptor(f"name at {rva:#x} is unmappable") from exc
    end = image.raw.find(b"\0", off, off + MAX_NAME_LENGTH + 1)
    if end < 0:
        raise MalformedDescriptor(f"name at {rva:#x} is unterminated or longer than {MAX_NAME_LENGTH}")
    # a name must not straddle the end of its section
    try:
        image.range_offset(rva, end - off + 1)
    except UnmappedRva as exc:
        raise MalformedDescriptor(f"name at {rva:#x} crosses a section boundary") from exc
    return image.raw[off:end].decode("latin-1")


def _read_thunk_array(image: PeImage, rva: int) -> list[int]:
    width = image.thunk_width
    values = []
    while True:
        if len(values) >= MAX_THUNKS:
            raise UnterminatedThunkArray(f"thunk array at {rva:#x} exceeds {MAX_THUNKS} entries")
        try:
            value = image.read_uint(rva + width * len(values), width)
        except UnmappedRva as exc:
            if not values:
                raise MalformedDescriptor(f"thunk array at {rva:#x} is unmappable") from exc
            raise UnterminatedThunkArray(f"thunk array at {rva:#x} has no terminator") from exc
        if value == 0:
            return values
        values.append(value)


def _decode_payload(image: PeImage, value: int):
    flag = image.machine_class.ordinal_flag
    if value & flag:
        return Ordinal(value & 0xFFFF)
    if value >> 31:
        raise MalformedDescriptor(f"thunk value {value:#x} is neither an ordinal nor an RVA")
    try:
        hint = image.read_uint(value, 2)
    except UnmappedRva as exc:
        raise MalformedDescriptor(f"hint/name record at {value:#x} is unmappable") from exc
    return ByName(hint, _read_cstring(image, value + 2), value)


def read_import_directory(image: PeImage) -> list[ImportDescriptor]:
    rva, _ = image.directory(DIR_IMPORT)
    if rva == 0:
        raise NoImportTable("import directory is empty")
    width = image.thunk_width
    descriptors = []
    for index in range(MAX_DESCRIPTORS + 1):
        if index == MAX_DESCRIPTORS:
            raise MalformedDescriptor("import descriptor table is not terminated")
        at = rva + DESCRIPTOR_SIZE * index
        try:
            record = image.read(at, DESCRIPTOR_SIZE)
        except UnmappedRva as exc:
            raise MalformedDescriptor(f"descriptor {index} is unmappable") from exc
        oft, stamp, chain, name_rva, ft = struct.unpack("<IIIII", record)
        if not any(record):
            break
        if name_rva == 0 or ft == 0:
            raise MalformedDescriptor(f"descriptor {index} lacks a name or first thunk")
        module = _read_cstring(image, name_rva)
        values = _read_thunk_array(image, oft or ft)
        if not values:
            raise MalformedDescriptor(f"descriptor {index} ({module}) imports nothing")
        thunks = []
        for i, value in enumerate(values):
            ft_slot = ft + width * i
            try:
                ft_value = image.read_uint(ft_slot, width)
            except UnmappedRva as exc:
                raise MalformedDescriptor(f"first-thunk slot {ft_slot:#x} is unmappable") from exc
            thunks.append(ThunkSlot(
                ft_slot_rva=ft_slot,
                oft_slot_rva=oft + width * i if oft else None,
                payload=_decode_payload(image, value),
                value=value,
                ft_value=ft_value,
            ))
        descriptors.append(ImportDescriptor(
            oft_rva=oft,
            time_date_stamp=stamp,
            forwarder_chain=chain,
            name_rva=name_rva,
            ft_rva=ft,
            module_name=module,
            thunks=tuple(thunks),
            offset=image.rva_to_offset(at),
        ))
    return descriptors


def has_bound_import_directory(image: PeImage) -> bool:
    return image.directory(DIR_BOUND_IMPORT)[0] != 0


def read_reloc_directory(image: PeImage) -> list[RelocBlock]:
    rva, size = image.directory(DIR_BASERELOC)
    if rva == 0 or size == 0 or image.relocs_stripped:
        return []
    try:
        blob = image.read(rva, size)
    except UnmappedRva as exc:
        raise MalformedRelocBlock("relocation directory is unmappable") from exc
    wanted = image.machine_class.reloc_type
    width = image.thunk_width
    blocks = []
    pos = 0
    while pos + 8 <= size:
        page, block_size = struct.unpack_from("<II", blob, pos)
        if page == 0 and block_size == 0:
            break
        if block_size < 8 or block_size % 2 or pos + block_size > size:
            raise MalformedRelocBlock(f"block at +{pos:#x} has bad size {block_size:#x}")
        count = (block_size - 8) // 2
        raw_entries = struct.unpack_from(f"<{count}H", blob, pos + 8)
        entries = tuple((e >> 12, e & 0xFFF) for e in raw_entries)
        for typ, off in entries:
            if typ == wanted:
                try:
                    image.range_offset(page + off, width)
                except UnmappedRva as exc:
                    raise MalformedRelocBlock(f"relocation target {page + off:#x} is unmappable") from exc
        blocks.append(RelocBlock(page, entries))
        pos += block_size
    return blocks


def read_directories(image: PeImage) -> ParsedDirectories:
    try:
        imports = tuple(read_import_directory(image))
    except NoImportTable:
        imports = ()
    return ParsedDirectories(imports, tuple(read_reloc_directory(image)))


def check_edits(size: int, edits: Iterable[Edit]) -> list[Edit]:
    ordered = sorted(((off, bytes(b)) for off, b in edits if len(b)), key=lambda e: e[0])
    prev_end = -1
    for off, blob in ordered:
        if off < 0 or off + len(blob) > size:
            raise EditOutOfBounds(f"edit at {off:#x}+{len(blob)} is outside the {size}-byte buffer")
        if off < prev_end:
            raise OverlappingEdits(f"edit at {off:#x} overlaps the previous edit")
        prev_end = off + len(blob)
    return ordered


def apply_edits(data: bytes, edits: Iterable[Edit]) -> bytes:
    out = bytearray(data)
    for off, blob in check_edits(len(out), edits):
        out[off:off + len(blob)] = blob
    return bytes(out)


def serialize(image: PeImage, edits: Iterable[Edit] = ()) -> bytes:
    return apply_edits(image.raw, edits)


def compute_checksum(data: bytes, checksum_offset: int) -> int:
    """Standard PE checksum: 16-bit folded word sum, CheckSum field as zero, plus length."""
    buf = bytearray(data)
    buf[checksum_offset:checksum_offset + 4] = b"\0\0\0\0"
    if len(buf) % 2:
        buf.append(0)
    total = sum(struct.unpack(f"<{len(buf) // 2}H", buf))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return (total + len(data)) & 0xFFFFFFFF


def update_checksum(data: bytes, checksum_offset: int) -> bytes:
    if checksum_offset + 4 > len(data):
        return bytes(data)
    if _u32(data, checksum_offset) == 0:
        return bytes(data)
    value = compute_checksum(data, checksum_offset)
    return apply_edits(data, [(checksum_offset, struct.pack("<I", value))])

