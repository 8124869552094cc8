"""Synthetic PE32/PE32+ fixtures with configurable imports and call sites.

Layout is fixed: headers, ``.text`` (call stubs), ``.idata`` (descriptors,
thunk arrays, hint/name records, module names, optional pointer table),
optional ``.reloc`` and optional ``.bss``. The files are never meant to run.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

from .codec import compute_checksum
from .errors import SpecInvalid
from .model import (
    DIR_BASERELOC,
    DIR_IAT,
    DIR_IMPORT,
    IMAGE_FILE_32BIT_MACHINE,
    IMAGE_FILE_EXECUTABLE_IMAGE,
    IMAGE_FILE_LARGE_ADDRESS_AWARE,
    IMAGE_FILE_RELOCS_STRIPPED,
    IMAGE_SCN_CNT_CODE,
    IMAGE_SCN_CNT_INITIALIZED_DATA,
    IMAGE_SCN_CNT_UNINITIALIZED_DATA,
    IMAGE_SCN_MEM_EXECUTE,
    IMAGE_SCN_MEM_READ,
    IMAGE_SCN_MEM_WRITE,
    MachineClass,
)
from .prng import SplitMix64

Symbol = Union[str, int]

FILE_ALIGNMENT = 0x200
SECTION_ALIGNMENT = 0x1000
E_LFANEW = 0x80
MACHINE_I386 = 0x14C
MACHINE_AMD64 = 0x8664
DEFAULT_IMAGE_BASE = {MachineClass.PE32: 0x400000, MachineClass.PE32PLUS: 0x140000000}


@dataclass
class SynthSpec:
    machine_class: MachineClass = MachineClass.PE32
    image_base: Optional[int] = None
    # (module name, symbols); an int in place of the list asks for that many generated names
    modules: list[tuple[str, Union[Sequence[Symbol], int]]] = field(default_factory=list)
    call_sites_per_symbol: int = 1
    emit_oft: bool = True
    emit_relocs: bool = True
    set_relocs_stripped: bool = False
    bound_stamp: Optional[int] = None
    overlay_bytes: Optional[bytes] = None
    seed: int = 0
    # extras beyond the core fields
    pointer_table: bool = False
    decoy_patterns: int = 0
    shuffle_sites: bool = True
    compute_checksum: bool = False
    file_slack: int = 0
    bss_size: int = 0

    @classmethod
    def from_json(cls, doc: dict) -> "SynthSpec":
        doc = dict(doc)
        try:
            if "machine_class" in doc:
                doc["machine_class"] = MachineClass(doc["machine_class"])
            modules = []
            for entry in doc.get("modules", []):
                if isinstance(entry, dict):
                    modules.append((entry["name"], entry["symbols"]))
                else:
                    name, symbols = entry
                    modules.append((name, symbols))
            doc["modules"] = modules
            if doc.get("overlay_bytes") is not None:
                doc["overlay_bytes"] = bytes.fromhex(doc["overlay_bytes"])
            return cls(**doc)
        except (KeyError, TypeError, ValueError) as exc:
            raise SpecInvalid(f"bad spec document: {exc}") from exc

    @classmethod
    def load(cls, path) -> "SynthSpec":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise SpecInvalid(f"spec is not valid JSON: {exc}") from exc
        return cls.from_json(doc)


def _align(value: int, alignment: int) -> int:
    return (value + alignment - 1) // alignment * alignment


def _generated_names(rng: SplitMix64, count: int, taken: set[str]) -> list[str]:
    letters = "abcdefghijklmnopqrstuvwxyz"
    names = []
    while len(names) < count:
        length = 4 + rng.below(21)
        name = "".join(letters[rng.below(26)] for _ in range(length))
        if name not in taken:
            taken.add(name)
            names.append(name)
    return names


def _validate(spec: SynthSpec) -> list[tuple[str, list[Symbol]]]:
    if spec.set_relocs_stripped and spec.emit_relocs:
        raise SpecInvalid("set_relocs_stripped requires emit_relocs = false")
    if spec.call_sites_per_symbol < 0 or spec.decoy_patterns < 0:
        raise SpecInvalid("site counts must be non-negative")
    if spec.file_slack < 0 or spec.bss_size < 0:
        raise SpecInvalid("file_slack and bss_size must be non-negative")
    if spec.bound_stamp is not None and not 0 <= spec.bound_stamp <= 0xFFFFFFFF:
        raise SpecInvalid("bound_stamp must fit 32 bits")
    rng = SplitMix64(spec.seed)
    modules = []
    for name, symbols in spec.modules:
        if not name or "\0" in name:
            raise SpecInvalid(f"bad module name {name!r}")
        if isinstance(symbols, int):
            if symbols < 1:
                raise SpecInvalid(f"{name}: at least one symbol is required")
            symbols = _generated_names(rng, symbols, set())
        symbols = list(symbols)
        if not symbols:
            raise SpecInvalid(f"{name}: at least one symbol is required")
        for s in symbols:
            if isinstance(s, bool) or not isinstance(s, (str, int)):
                raise SpecInvalid(f"{name}: symbol {s!r} is neither a name nor an ordinal")
            if isinstance(s, int) and not 0 <= s <= 0xFFFF:
                raise SpecInvalid(f"{name}: ordinal {s} does not fit 16 bits")
            if isinstance(s, str) and (not s or "\0" in s):
                raise SpecInvalid(f"{name}: bad symbol name {s!r}")
        modules.append((name, symbols))
    return modules


def build_pe(spec: SynthSpec) -> bytes:
    modules = _validate(spec)
    mc = spec.machine_class
    width = mc.thunk_width
    image_base = DEFAULT_IMAGE_BASE[mc] if spec.image_base is None else spec.image_base
    pe32 = mc is MachineClass.PE32
    if pe32 and image_base + (1 << 28) > 1 << 32:
        raise SpecInvalid("PE32 image base leaves no room below 4 GiB")
    rng = SplitMix64(spec.seed ^ 0x5EED)

    # -- .idata layout, relative to its start ----------------------------------
    descriptors_size = 20 * (len(modules) + 1)
    cursor = _align(descriptors_size, 8)
    oft_at, ft_at = [], []
    if spec.emit_oft:
        for _, symbols in modules:
            oft_at.append(cursor)
            cursor += width * (len(symbols) + 1)
    iat_start = cursor
    for _, symbols in modules:
        ft_at.append(cursor)
        cursor += width * (len(symbols) + 1)
    iat_size = cursor - iat_start
    hint_at: list[list[Optional[int]]] = []
    for _, symbols in modules:
        row = []
        for s in symbols:
            if isinstance(s, int):
                row.append(None)
            else:
                row.append(cursor)
                cursor = _align(cursor + 2 + len(s.encode("latin-1")) + 1, 2)
        hint_at.append(row)
    name_at = []
    for name, _ in modules:
        name_at.append(cursor)
        cursor += len(name.encode("latin-1")) + 1
    cursor = _align(cursor, 8)
    table_at = cursor
    if spec.pointer_table:
        cursor += width * sum(len(s) for _, s in modules)
    idata_size = max(cursor, 1)

    # -- .text: entry stub then one 6-byte site per reference -------------------
    site_plan = []  # (module index, symbol index or None for decoy, opcode modrm)
    for m, (_, symbols) in enumerate(modules):
        for k in range(len(symbols)):
            for j in range(spec.call_sites_per_symbol):
                site_plan.append((m, k, 0x15 if j % 2 == 0 else 0x25))
    site_plan.extend((None, None, 0x15) for _ in range(spec.decoy_patterns))
    if spec.shuffle_sites:
        rng.shuffle(site_plan)
    text_size = 16 + 6 * len(site_plan) + 1

    n_sections = 2 + bool(spec.emit_relocs) + bool(spec.bss_size)
    optional_size = 0xE0 if pe32 else 0xF0
    headers_size = _align(E_LFANEW + 24 + optional_size + 40 * n_sections, FILE_ALIGNMENT)

    text_rva = SECTION_ALIGNMENT
    idata_rva = _align(text_rva + text_size, SECTION_ALIGNMENT)
    next_rva = _align(idata_rva + idata_size, SECTION_ALIGNMENT)
    text_raw = headers_size
    text_raw_size = _align(text_size, FILE_ALIGNMENT)
    idata_raw = text_raw + text_raw_size + _align(spec.file_slack, FILE_ALIGNMENT)
    idata_raw_size = _align(idata_size, FILE_ALIGNMENT)

    # -- fill .idata ----------------------------------------------------------
    idata = bytearray(idata_raw_size)
    ordinal_flag = mc.ordinal_flag
    pack_thunk = "<I" if pe32 else "<Q"
    slot_rva: list[list[int]] = []
    for m, (name, symbols) in enumerate(modules):
        oft_rva = idata_rva + oft_at[m] if spec.emit_oft else 0
        ft_rva = idata_rva + ft_at[m]
        stamp = spec.bound_stamp or 0
        struct.pack_into("<IIIII", idata, 20 * m, oft_rva, stamp, 0, idata_rva + name_at[m], ft_rva)
        name_bytes = name.encode("latin-1")
        idata[name_at[m]:name_at[m] + len(name_bytes)] = name_bytes
        row = []
        for k, s in enumerate(symbols):
            if isinstance(s, int):
                value = ordinal_flag | s
            else:
                value = idata_rva + hint_at[m][k]
                struct.pack_into("<H", idata, hint_at[m][k], k)
                encoded = s.encode("latin-1")
                idata[hint_at[m][k] + 2:hint_at[m][k] + 2 + len(encoded)] = encoded
            ft_value = value
            if spec.bound_stamp and spec.emit_oft:
                # a bound FT holds resolved addresses
                ft_value = 0x10000000 + 0x10 * (m * 0x1000 + k)
            if spec.emit_oft:
                struct.pack_into(pack_thunk, idata, oft_at[m] + width * k, value)
            struct.pack_into(pack_thunk, idata, ft_at[m] + width * k, ft_value)
            row.append(ft_rva + width * k)
        slot_rva.append(row)

    absolute_refs = []  # RVAs holding absolute addresses
    if spec.pointer_table:
        pos = table_at
        for row in slot_rva:
            for rva in row:
                struct.pack_into(pack_thunk, idata, pos, image_base + rva)
                absolute_refs.append(idata_rva + pos)
                pos += width

    # -- fill .text -------------------------------------------------------------
    text = bytearray(b"\xcc" * text_raw_size)
    text[0] = 0xC3
    text[1:16] = b"\x90" * 15
    for i, (m, k, modrm) in enumerate(site_plan):
        pos = 16 + 6 * i
        instr_rva = text_rva + pos
        target = text_rva if m is None else slot_rva[m][k]
        text[pos:pos + 2] = bytes((0xFF, modrm))
        if pe32:
            struct.pack_into("<I", text, pos + 2, image_base + target)
            absolute_refs.append(instr_rva + 2)
        else:
            struct.pack_into("<i", text, pos + 2, target - (instr_rva + 6))
    text[16 + 6 * len(site_plan)] = 0xC3

    # -- .reloc -----------------------------------------------------------------
    sections = [
        (b".text", text_rva, text_size, text_raw, text_raw_size,
         IMAGE_SCN_CNT_CODE | IMAGE_SCN_MEM_EXECUTE | IMAGE_SCN_MEM_READ, bytes(text)),
        (b".idata", idata_rva, idata_size, idata_raw, idata_raw_size,
         IMAGE_SCN_CNT_INITIALIZED_DATA | IMAGE_SCN_MEM_READ | IMAGE_SCN_MEM_WRITE, bytes(idata)),
    ]
    raw_end = idata_raw + idata_raw_size
    reloc_dir = (0, 0)
    if spec.emit_relocs:
        reloc = _build_relocs(absolute_refs, mc.reloc_type)
        if not reloc:
            # keep the directory non-empty so the image stays relocatable
            reloc = struct.pack("<II", text_rva, 8)
        reloc_raw_size = _align(len(reloc), FILE_ALIGNMENT)
        sections.append((b".reloc", next_rva, len(reloc), raw_end, reloc_raw_size,
                         IMAGE_SCN_CNT_INITIALIZED_DATA | IMAGE_SCN_MEM_READ,
                         reloc + b"\0" * (reloc_raw_size - len(reloc))))
        reloc_dir = (next_rva, len(reloc))
        raw_end += reloc_raw_size
        next_rva = _align(next_rva + len(reloc), SECTION_ALIGNMENT)
    if spec.bss_size:
        sections.append((b".bss", next_rva, spec.bss_size, 0, 0,
                         IMAGE_SCN_CNT_UNINITIALIZED_DATA | IMAGE_SCN_MEM_READ | IMAGE_SCN_MEM_WRITE, b""))
        next_rva = _align(next_rva + spec.bss_size, SECTION_ALIGNMENT)
    size_of_image = next_rva

    # -- headers --------------------------------------------------------------------
    out = bytearray(raw_end)
    out[0:2] = b"MZ"
    struct.pack_into("<I", out, 0x3C, E_LFANEW)
    out[E_LFANEW:E_LFANEW + 4] = b"PE\0\0"
    characteristics = IMAGE_FILE_EXECUTABLE_IMAGE
    characteristics |= IMAGE_FILE_32BIT_MACHINE if pe32 else IMAGE_FILE_LARGE_ADDRESS_AWARE
    if spec.set_relocs_stripped:
        characteristics |= IMAGE_FILE_RELOCS_STRIPPED
    struct.pack_into("<HHIIIHH", out, E_LFANEW + 4, MACHINE_I386 if pe32 else MACHINE_AMD64,
                     len(sections), 0, 0, 0, optional_size, characteristics)

    opt = E_LFANEW + 24
    struct.pack_into("<HBB", out, opt, 0x10B if pe32 else 0x20B, 14, 0)
    struct.pack_into("<IIIII", out, opt + 4, text_raw_size, idata_raw_size, 0, text_rva, text_rva)
    if pe32:
        struct.pack_into("<II", out, opt + 24, idata_rva, image_base)
    else:
        struct.pack_into("<Q", out, opt + 24, image_base)
    struct.pack_into("<II", out, opt + 32, SECTION_ALIGNMENT, FILE_ALIGNMENT)
    struct.pack_into("<HHHHHH", out, opt + 40, 6, 0, 0, 0, 6, 0)
    struct.pack_into("<IIII", out, opt + 52, 0, size_of_image, headers_size, 0)
    dll_characteristics = 0x0040 if spec.emit_relocs else 0  # DYNAMIC_BASE
    struct.pack_into("<HH", out, opt + 68, 3, dll_characteristics)
    if pe32:
        struct.pack_into("<IIIIII", out, opt + 72, 0x100000, 0x1000, 0x100000, 0x1000, 0, 16)
        dirs = opt + 96
    else:
        struct.pack_into("<QQQQII", out, opt + 72, 0x100000, 0x1000, 0x100000, 0x1000, 0, 16)
        dirs = opt + 112
    if modules:
        struct.pack_into("<II", out, dirs + 8 * DIR_IMPORT, idata_rva, descriptors_size)
        struct.pack_into("<II", out, dirs + 8 * DIR_IAT, idata_rva + iat_start, iat_size)
    struct.pack_into("<II", out, dirs + 8 * DIR_BASERELOC, *reloc_dir)

    table = opt + optional_size
    for i, (name, va, vsize, raw_off, raw_size, flags, body) in enumerate(sections):
        struct.pack_into("<8sIIIIIIHHI", out, table + 40 * i, name, vsize, va, raw_size, raw_off, 0, 0, 0, 0, flags)
        if raw_size:
            out[raw_off:raw_off + raw_size] = body

    if spec.overlay_bytes:
        out += spec.overlay_bytes
    if spec.compute_checksum:
        struct.pack_into("<I", out, opt + 64, compute_checksum(bytes(out), opt + 64) or 1)
    return bytes(out)


def _build_relocs(rvas: Sequence[int], reloc_type: int) -> bytes:
    pages: dict[int, list[int]] = {}
    for rva in sorted(rvas):
        pages.setdefault(rva & ~0xFFF, []).append(rva & 0xFFF)
    out = bytearray()
    for page, offsets in sorted(pages.items()):
        entries = [(reloc_type << 12) | off for off in offsets]
        if len(entries) % 2:
            entries.append(0)
        out += struct.pack(f"<II{len(entries)}H", page, 8 + 2 * len(entries), *entries)
    return bytes(out)
