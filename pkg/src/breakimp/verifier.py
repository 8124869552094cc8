"""Loader-binding simulation and equivalence checking.

Nothing here executes code. The simulator maps an image at a load base,
applies base relocations, binds every IAT slot to a synthetic export address
and follows each code reference to the symbol it would reach.
"""
from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

from .codec import read_import_directory, read_reloc_directory
from .errors import (
    DanglingReference,
    MalformedSectionTable,
    NoImportTable,
    PeToolError,
    UnresolvedImport,
)
from .model import ImportDescriptor, PeImage, RelocBlock
from .retarget import addressing_for, scan_buffer

Symbol = Union[str, int]
ImportKey = tuple[str, Symbol]

DEFAULT_SHIFT = 0x10000
MAX_SIMULATED_IMAGE = 1 << 28


def _symbol_label(symbol: Symbol) -> str:
    return f"#{symbol}" if isinstance(symbol, int) else symbol


def import_keys(descriptors: Iterable[ImportDescriptor]) -> list[ImportKey]:
    return [(d.module_name.lower(), t.symbol) for d in descriptors for t in d.thunks]


class MockExportUniverse:
    """Deterministic fake export addresses, unique across the universe.

    Addresses are 31-bit so they fit a PE32 slot unchanged.
    """

    def __init__(self, keys: Iterable[ImportKey] = ()):
        self.exports: dict[str, dict[Symbol, int]] = {}
        self._reverse: dict[int, ImportKey] = {}
        for module, symbol in sorted(set(keys), key=lambda k: (k[0], isinstance(k[1], str), str(k[1]))):
            self.add(module, symbol)

    @classmethod
    def covering(cls, *images: PeImage) -> "MockExportUniverse":
        keys = []
        for image in images:
            try:
                keys.extend(import_keys(read_import_directory(image)))
            except NoImportTable:
                pass
        return cls(keys)

    def add(self, module: str, symbol: Symbol) -> int:
        module = module.lower()
        existing = self.exports.get(module, {}).get(symbol)
        if existing is not None:
            return existing
        salt = 0
        while True:
            h = hashlib.sha256(f"{module}!{_symbol_label(symbol)}#{salt}".encode()).digest()
            va = int.from_bytes(h[:8], "little") & 0x7FFFFFFF
            if va and va not in self._reverse:
                break
            salt += 1
        self.exports.setdefault(module, {})[symbol] = va
        self._reverse[va] = (module, symbol)
        return va

    def lookup(self, module: str, symbol: Symbol) -> int:
        try:
            return self.exports[module.lower()][symbol]
        except KeyError:
            raise UnresolvedImport(f"{module}!{_symbol_label(symbol)} is not exported by the universe") from None

    def reverse(self, va: int) -> Optional[ImportKey]:
        return self._reverse.get(va)


@dataclass
class BindReport:
    load_base: int
    rebase_delta: int
    slot_bindings: dict[int, ImportKey] = field(default_factory=dict)
    site_resolutions: dict[int, ImportKey] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "load_base": self.load_base,
            "rebase_delta": self.rebase_delta,
            "slot_bindings": {f"{k:#x}": _key_json(v) for k, v in sorted(self.slot_bindings.items())},
            "site_resolutions": {f"{k:#x}": _key_json(v) for k, v in sorted(self.site_resolutions.items())},
        }


def _key_json(key: Optional[ImportKey]):
    if key is None:
        return None
    return [key[0], key[1]]


def _map_image(image: PeImage) -> bytearray:
    end = image._header_limit
    for s in image.sections:
        end = max(end, s.virtual_address + s.virtual_extent)
    if end > MAX_SIMULATED_IMAGE:
        raise MalformedSectionTable(f"image spans {end:#x} bytes, too large to simulate")
    memory = bytearray(end)
    memory[:image._header_limit] = image.raw[:image._header_limit]
    for s in image.sections:
        if s.raw_size:
            memory[s.virtual_address:s.virtual_address + s.raw_size] = image.raw[s.raw_offset:s.raw_offset + s.raw_size]
    return memory


def simulate_bind(
    image: PeImage,
    universe: MockExportUniverse,
    load_base: int,
    descriptors: Optional[Sequence[ImportDescriptor]] = None,
    relocs: Optional[Sequence[RelocBlock]] = None,
) -> BindReport:
    if descriptors is None:
        try:
            descriptors = read_import_directory(image)
        except NoImportTable:
            descriptors = []
    if relocs is None:
        relocs = read_reloc_directory(image)
    width = image.thunk_width
    mask = (1 << (8 * width)) - 1
    reloc_type = image.machine_class.reloc_type
    targets = [t for block in relocs for t in block.targets(reloc_type)]

    # an image without relocations cannot move: the loader keeps the preferred base
    if not targets:
        load_base = image.image_base
    delta = load_base - image.image_base
    memory = _map_image(image)

    def load(rva: int) -> int:
        return int.from_bytes(memory[rva:rva + width], "little")

    def store(rva: int, value: int) -> None:
        memory[rva:rva + width] = (value & mask).to_bytes(width, "little")

    for t in targets:
        store(t, load(t) + delta)

    report = BindReport(load_base=load_base, rebase_delta=delta)
    iat_region: set[int] = set()
    for desc in descriptors:
        iat_region.update(range(desc.ft_rva, desc.ft_rva + width * (len(desc.thunks) + 1)))
        module = desc.module_name.lower()
        for thunk in desc.thunks:
            store(thunk.ft_slot_rva, universe.lookup(module, thunk.symbol))
            report.slot_bindings[thunk.ft_slot_rva] = (module, thunk.symbol)

    def resolve(site: int, slot: int) -> ImportKey:
        if slot not in report.slot_bindings:
            raise DanglingReference(f"reference at {site:#x} reads {slot:#x}, which is not a bound slot")
        key = universe.reverse(load(slot))
        if key is None:
            raise DanglingReference(f"slot {slot:#x} holds no known export")
        return key

    addressing = addressing_for(image.machine_class)
    operand_rvas = set()
    for s in image.sections:
        if not s.executable or not s.raw_size:
            continue
        code = bytes(memory[s.virtual_address:s.virtual_address + s.raw_size])
        hits, _ = scan_buffer(code, s.virtual_address, load_base, addressing, iat_region)
        for hit in hits:
            instr = s.virtual_address + hit.position
            operand_rvas.add(instr + 2)
            report.site_resolutions[instr] = resolve(instr, hit.target_rva)

    for t in targets:
        if t in operand_rvas:
            continue
        ref = load(t) - load_base
        if ref in iat_region:
            report.site_resolutions[t] = resolve(t, ref)
    return report


@dataclass
class Divergence:
    load_base: int
    site_rva: int
    original: Optional[ImportKey]
    transformed: Optional[ImportKey]

    def to_json(self) -> dict:
        return {
            "load_base": self.load_base,
            "site_rva": self.site_rva,
            "original": _key_json(self.original),
            "transformed": _key_json(self.transformed),
        }


@dataclass
class EquivalenceReport:
    equivalent: bool
    load_bases: list[int]
    geometry_match: bool
    imports_match: bool
    sites_checked: int
    divergent_sites: list[Divergence] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "equivalent": self.equivalent,
            "load_bases": [f"{b:#x}" for b in self.load_bases],
            "geometry_match": self.geometry_match,
            "imports_match": self.imports_match,
            "sites_checked": self.sites_checked,
            "divergent_sites": [d.to_json() for d in self.divergent_sites],
            "errors": self.errors,
        }


def _geometry(image: PeImage):
    return (
        image.machine_class,
        image.image_base,
        tuple((s.virtual_address, s.virtual_size, s.raw_offset, s.raw_size) for s in image.sections),
    )


def _imports(image: PeImage) -> Counter:
    try:
        return Counter(import_keys(read_import_directory(image)))
    except NoImportTable:
        return Counter()


def assert_equivalent(
    original: PeImage,
    transformed: PeImage,
    universe: Optional[MockExportUniverse] = None,
    load_bases: Optional[Sequence[int]] = None,
) -> EquivalenceReport:
    """Compare site-to-symbol resolutions of two images at several load bases."""
    bases = [original.image_base, original.image_base + DEFAULT_SHIFT]
    for b in load_bases or ():
        if b not in bases:
            bases.append(b)
    errors: list[str] = []
    try:
        imports_match = _imports(original) == _imports(transformed)
    except PeToolError as exc:
        imports_match = False
        errors.append(f"import table: {exc}")
    geometry_match = _geometry(original) == _geometry(transformed)
    if universe is None:
        universe = MockExportUniverse.covering(original)

    divergent: list[Divergence] = []
    checked = 0
    if geometry_match and imports_match:
        for base in bases:
            try:
                before = simulate_bind(original, universe, base).site_resolutions
                after = simulate_bind(transformed, universe, base).site_resolutions
            except PeToolError as exc:
                errors.append(f"load base {base:#x}: {type(exc).__name__}: {exc}")
                continue
            checked += len(before)
            for site in sorted(before.keys() | after.keys()):
                if before.get(site) != after.get(site):
                    divergent.append(Divergence(base, site, before.get(site), after.get(site)))

    return EquivalenceReport(
        equivalent=geometry_match and imports_match and not divergent and not errors,
        load_bases=bases,
        geometry_match=geometry_match,
        imports_match=imports_match,
        sites_checked=checked,
        divergent_sites=divergent,
        errors=errors,
    )
