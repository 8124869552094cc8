"""Import-thunk shuffling with reference repair.

Within each import descriptor the slot contents are permuted: the
hint/name reference stored in slot ``old`` moves to slot ``new`` in both the
first-thunk (IAT) and original-first-thunk arrays. Every code reference to
``old`` is then rewritten to ``new``, through the relocation table or, when the
image carries none, by scanning executable sections. The import multiset is
untouched, but the order the imphash walks changes.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .codec import (
    Edit,
    apply_edits,
    has_bound_import_directory,
    parse_pe,
    read_import_directory,
    read_reloc_directory,
    update_checksum,
)
from .errors import (
    BoundImportsPresent,
    DanglingReference,
    EquivalenceCheckFailed,
    InvalidPermutation,
    MalformedDescriptor,
    NoRetargetPath,
    NoSymbolName,
    NothingToShuffle,
    OftFtMismatch,
    RelocTargetUnmappable,
    UnmappedRva,
)
from .imphash import ImphashReport, Mode, imphash_of_descriptors
from .model import DIR_BOUND_IMPORT, ImportDescriptor, MachineClass, PeImage, RelocBlock
from .prng import SplitMix64, derive_seed
from .retarget import CallSite, retarget_call_sites, scan_iat_references_detailed
from .verifier import DEFAULT_SHIFT, EquivalenceReport, MockExportUniverse, assert_equivalent, simulate_bind

MAX_REDRAWS = 64
MAX_RESEEDS = 8


class Strategy(enum.Enum):
    AUTO = "auto"
    RELOC_PATCH = "reloc"
    TEXT_SCAN = "text-scan"


@dataclass(frozen=True)
class ThunkGroup:
    descriptor_index: int
    module_name: str
    # (address_of_data, ft_slot_rva) in slot order
    pairs: tuple[tuple[int, int], ...]


@dataclass
class ModulePermutation:
    descriptor_index: int
    module_name: str
    mapping: dict[int, int]

    @property
    def moved(self) -> dict[int, int]:
        return {old: new for old, new in self.mapping.items() if old != new}


@dataclass
class ThunkPermutation:
    seed: int
    per_module: list[ModulePermutation]

    def combined(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for module in self.per_module:
            out.update(module.mapping)
        return out

    def moved(self) -> dict[int, int]:
        return {old: new for old, new in self.combined().items() if old != new}

    @property
    def is_identity(self) -> bool:
        return not self.moved()

    def inverse(self) -> dict[int, int]:
        return {new: old for old, new in self.combined().items()}

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "modules": [
                {
                    "module": m.module_name,
                    "descriptor_index": m.descriptor_index,
                    "mapping": {f"{k:#x}": f"{v:#x}" for k, v in sorted(m.mapping.items())},
                }
                for m in self.per_module
            ],
        }


def _is_bound(image: PeImage, descriptors: Sequence[ImportDescriptor]) -> bool:
    return has_bound_import_directory(image) or any(d.bound for d in descriptors)


def _check_disjoint_arrays(image: PeImage, descriptors: Sequence[ImportDescriptor]) -> None:
    width = image.thunk_width
    seen: set[int] = set()
    for d in descriptors:
        count = len(d.thunks)
        for base in (d.ft_rva, d.oft_rva):
            if not base:
                continue
            span = set(range(base, base + width * count))
            if span & seen:
                raise MalformedDescriptor(f"thunk arrays of {d.module_name} overlap another thunk array")
            seen |= span


def collect_thunk_pairs(
    image: PeImage,
    descriptors: Optional[Sequence[ImportDescriptor]] = None,
    allow_bound: bool = False,
) -> list[ThunkGroup]:
    if descriptors is None:
        descriptors = read_import_directory(image)
    bound = _is_bound(image, descriptors)
    if bound and not allow_bound:
        raise BoundImportsPresent("image carries bound imports; pass unbind to strip them")
    _check_disjoint_arrays(image, descriptors)
    width = image.thunk_width
    groups = []
    for index, desc in enumerate(descriptors):
        if desc.oft_rva and not bound:
            for slot in desc.thunks:
                if slot.ft_value != slot.value:
                    raise OftFtMismatch(f"{desc.module_name}: FT slot {slot.ft_slot_rva:#x} disagrees with its OFT slot")
            try:
                terminator = image.read_uint(desc.ft_rva + width * len(desc.thunks), width)
            except UnmappedRva as exc:
                raise OftFtMismatch(f"{desc.module_name}: FT array is shorter than its OFT array") from exc
            if terminator != 0:
                raise OftFtMismatch(f"{desc.module_name}: FT array is longer than its OFT array")
        pairs = tuple((slot.value, slot.ft_slot_rva) for slot in desc.thunks)
        groups.append(ThunkGroup(index, desc.module_name, pairs))
    return groups


def make_permutation(groups: Sequence[ThunkGroup], seed: int) -> ThunkPermutation:
    """Shuffle each group independently; never returns the identity."""
    if not any(len(g.pairs) >= 2 for g in groups):
        raise NothingToShuffle("every import descriptor holds a single symbol")
    rng = SplitMix64(seed)
    for _ in range(MAX_REDRAWS):
        orders = []
        for g in groups:
            order = list(range(len(g.pairs)))
            rng.shuffle(order)
            orders.append(order)
        if any(order != sorted(order) for order in orders):
            break
    else:
        orders = [list(range(len(g.pairs))) for g in groups]
        largest = max(range(len(groups)), key=lambda i: (len(groups[i].pairs), -i))
        orders[largest][0], orders[largest][1] = orders[largest][1], orders[largest][0]

    per_module = []
    for g, order in zip(groups, orders):
        slots = [rva for _, rva in g.pairs]
        # the symbol now at position i came from position order[i]
        mapping = {slots[order[i]]: slots[i] for i in range(len(slots))}
        per_module.append(ModulePermutation(g.descriptor_index, g.module_name, mapping))
    return ThunkPermutation(seed, per_module)


def apply_permutation(
    image: PeImage,
    perm: ThunkPermutation,
    descriptors: Optional[Sequence[ImportDescriptor]] = None,
) -> list[Edit]:
    if descriptors is None:
        descriptors = read_import_directory(image)
    width = image.thunk_width
    edits: list[Edit] = []
    for module in perm.per_module:
        if not 0 <= module.descriptor_index < len(descriptors):
            raise InvalidPermutation(f"descriptor index {module.descriptor_index} out of range")
        desc = descriptors[module.descriptor_index]
        if desc.module_name != module.module_name:
            raise InvalidPermutation(f"descriptor {module.descriptor_index} is {desc.module_name}, not {module.module_name}")
        by_slot = {t.ft_slot_rva: t for t in desc.thunks}
        if set(module.mapping) != set(by_slot) or set(module.mapping.values()) != set(by_slot):
            raise InvalidPermutation(f"mapping for {desc.module_name} is not a bijection on its slots")
        for old, new in module.moved.items():
            value = by_slot[old].value
            blob = value.to_bytes(width, "little")
            target = by_slot[new]
            if target.ft_value != value:
                edits.append((image.rva_to_offset(new), blob))
            if target.oft_slot_rva is not None and target.value != value:
                edits.append((image.rva_to_offset(target.oft_slot_rva), blob))
    return edits


def patch_relocated_references(
    image: PeImage,
    perm: ThunkPermutation,
    relocs: Sequence[RelocBlock],
) -> tuple[list[Edit], int]:
    """Rewrite absolute operands covered by relocations that address a moved slot."""
    moved = perm.moved()
    width = image.thunk_width
    reloc_type = image.machine_class.reloc_type
    edits: list[Edit] = []
    for block in relocs:
        for target in block.targets(reloc_type):
            try:
                offset = image.range_offset(target, width)
            except UnmappedRva as exc:
                raise RelocTargetUnmappable(f"relocation target {target:#x} is unmappable") from exc
            stored = int.from_bytes(image.raw[offset:offset + width], "little")
            new = moved.get(stored - image.image_base)
            if new is not None:
                edits.append((offset, (image.image_base + new).to_bytes(width, "little")))
    return edits, len(edits)


def unbind_edits(image: PeImage, descriptors: Sequence[ImportDescriptor]) -> list[Edit]:
    """Zero bound timestamps and the bound-import directory; restore FT from OFT."""
    width = image.thunk_width
    edits: list[Edit] = []
    for desc in descriptors:
        if not desc.bound:
            continue
        if not desc.oft_rva:
            raise BoundImportsPresent(f"{desc.module_name} is bound but has no original thunks to restore from")
        edits.append((desc.offset + 4, b"\0\0\0\0"))
        for slot in desc.thunks:
            if slot.ft_value != slot.value:
                edits.append((image.rva_to_offset(slot.ft_slot_rva), slot.value.to_bytes(width, "little")))
    if has_bound_import_directory(image):
        edits.append((image.data_directory_offset + 8 * DIR_BOUND_IMPORT, b"\0" * 8))
    return edits


@dataclass
class TransformResult:
    output: bytes
    permutation: ThunkPermutation
    relocation_patches: int
    retargeted_sites: int
    imphash_before: ImphashReport
    imphash_after: ImphashReport
    strategy_used: Strategy
    paper_before: Optional[ImphashReport] = None
    paper_after: Optional[ImphashReport] = None
    requested_seed: int = 0
    attempts: int = 1
    ignored_patterns: int = 0
    unbound: bool = False
    edits: list[Edit] = field(default_factory=list)
    equivalence: Optional[EquivalenceReport] = None

    def to_json(self) -> dict:
        def report(r):
            return None if r is None else r.to_json(show_string=False)

        return {
            "seed": self.requested_seed,
            "effective_seed": self.permutation.seed,
            "attempts": self.attempts,
            "strategy": self.strategy_used.value,
            "unbound": self.unbound,
            "relocation_patches": self.relocation_patches,
            "retargeted_sites": self.retargeted_sites,
            "scan_warnings": self.ignored_patterns,
            "imphash_before": report(self.imphash_before),
            "imphash_after": report(self.imphash_after),
            "paper_imphash_before": report(self.paper_before),
            "paper_imphash_after": report(self.paper_after),
            "moved_slots": len(self.permutation.moved()),
            "equivalent": None if self.equivalence is None else self.equivalence.equivalent,
            "permutation": self.permutation.to_json(),
        }


def _paper_report(descriptors) -> Optional[ImphashReport]:
    try:
        return imphash_of_descriptors(descriptors, Mode.PAPER)
    except NoSymbolName:
        return None


def _resolve_strategy(strategy: Strategy, relocs: Sequence[RelocBlock]) -> Strategy:
    if strategy is not Strategy.AUTO:
        return strategy
    return Strategy.RELOC_PATCH if any(b.entries for b in relocs) else Strategy.TEXT_SCAN


def _check_scan_coverage(image: PeImage, relocs, sites: Sequence[CallSite], slots: set[int]) -> None:
    if not sites:
        raise NoRetargetPath("text scan found no call/jmp sites referencing the import table")
    # absolute references the scanner cannot see would be left pointing at old slots
    width = image.thunk_width
    operands = {image.offset_to_rva(s.operand_offset) for s in sites}
    for block in relocs:
        for target in block.targets(image.machine_class.reloc_type):
            if target in operands:
                continue
            stored = image.read_uint(target, width)
            if stored - image.image_base in slots:
                raise NoRetargetPath(f"relocated reference at {target:#x} is not a scannable call site")


def transform(
    data: bytes,
    seed: int,
    strategy: Strategy = Strategy.AUTO,
    *,
    unbind: bool = False,
    recompute_checksum: bool = True,
    verify: bool = True,
) -> TransformResult:
    image = parse_pe(data)
    descriptors = read_import_directory(image)
    unbound = False
    if unbind and _is_bound(image, descriptors):
        data = apply_edits(image.raw, unbind_edits(image, descriptors))
        image = parse_pe(data)
        descriptors = read_import_directory(image)
        unbound = True
    groups = collect_thunk_pairs(image, descriptors)
    if not any(len(g.pairs) >= 2 for g in groups):
        raise NothingToShuffle("every import descriptor holds a single symbol")

    relocs = read_reloc_directory(image)
    chosen = _resolve_strategy(strategy, relocs)
    slots = {rva for g in groups for _, rva in g.pairs}
    sites, ignored = scan_iat_references_detailed(image, slots)
    if chosen is Strategy.TEXT_SCAN:
        _check_scan_coverage(image, relocs, sites, slots)
    else:
        # RIP-relative operands are never relocated; absolute ones may be missed by a damaged table
        covered = {t for b in relocs for t in b.targets(image.machine_class.reloc_type)}
        sites = [s for s in sites if image.offset_to_rva(s.operand_offset) not in covered]
        if sites and image.machine_class is MachineClass.PE32:
            raise NoRetargetPath(f"absolute site at {sites[0].instr_rva:#x} has no relocation entry")
    universe = MockExportUniverse.covering(image)
    try:
        simulate_bind(image, universe, image.image_base, descriptors, relocs)
    except DanglingReference as exc:
        raise NoRetargetPath(f"input already holds a reference no slot can satisfy: {exc}") from None

    compat_before = imphash_of_descriptors(descriptors, Mode.COMPAT)
    paper_before = _paper_report(descriptors)

    for attempt in range(MAX_RESEEDS + 1):
        perm = make_permutation(groups, derive_seed(seed, attempt))
        edits = apply_permutation(image, perm, descriptors)
        patches = 0
        if chosen is Strategy.RELOC_PATCH:
            reloc_edits, patches = patch_relocated_references(image, perm, relocs)
            edits += reloc_edits
        site_edits = retarget_call_sites(sites, perm.combined(), image)
        edits += site_edits
        output = apply_edits(image.raw, edits)
        if recompute_checksum:
            output = update_checksum(output, image.checksum_offset)
        after_image = parse_pe(output)
        after_descriptors = read_import_directory(after_image)
        compat_after = imphash_of_descriptors(after_descriptors, Mode.COMPAT)
        paper_after = _paper_report(after_descriptors)
        changed = compat_after.canonical_string != compat_before.canonical_string
        if paper_before is not None:
            changed = changed and paper_after.canonical_string != paper_before.canonical_string
        if changed:
            break
    else:
        raise NothingToShuffle("no permutation changed the imphash; descriptors repeat the same symbol")

    equivalence = None
    if verify:
        equivalence = assert_equivalent(
            image, after_image, universe, [image.image_base, image.image_base + DEFAULT_SHIFT]
        )
        if not equivalence.equivalent:
            raise EquivalenceCheckFailed("transformed image does not bind like its input", equivalence)

    return TransformResult(
        output=output,
        permutation=perm,
        relocation_patches=patches,
        retargeted_sites=len(site_edits),
        imphash_before=compat_before,
        imphash_after=compat_after,
        strategy_used=chosen,
        paper_before=paper_before,
        paper_after=paper_after,
        requested_seed=seed,
        attempts=attempt + 1,
        ignored_patterns=ignored,
        unbound=unbound,
        edits=edits,
        equivalence=equivalence,
    )
