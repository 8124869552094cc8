import struct
from collections import Counter
from dataclasses import replace

import pytest

from breakimp.codec import apply_edits, compute_checksum, parse_pe, read_import_directory, read_reloc_directory
from breakimp.errors import (
    BoundImportsPresent,
    InvalidPermutation,
    NoImportTable,
    NothingToShuffle,
    OftFtMismatch,
)
from breakimp.forge import SynthSpec, build_pe
from breakimp.imphash import Mode, imphash
from breakimp.model import MachineClass
from breakimp.shuffler import (
    ModulePermutation,
    Strategy,
    ThunkPermutation,
    apply_permutation,
    collect_thunk_pairs,
    make_permutation,
    patch_relocated_references,
    transform,
)
from breakimp.verifier import import_keys

from corpus import OLE32_SYMBOLS, great_exe_spec


@pytest.fixture(scope="module")
def great():
    return parse_pe(build_pe(great_exe_spec()))


def ole32_only(mc=MachineClass.PE32, **kw):
    return parse_pe(build_pe(SynthSpec(machine_class=mc, modules=[("ole32.dll", list(OLE32_SYMBOLS))], **kw)))


def test_groups_for_paper_layout(great):
    groups = collect_thunk_pairs(great)
    assert [len(g.pairs) for g in groups] == [3, 66]
    descs = read_import_directory(great)
    assert [rva for _, rva in groups[0].pairs] == [t.ft_slot_rva for t in descs[0].thunks]
    assert [v for v, _ in groups[0].pairs] == [t.payload.name_rva for t in descs[0].thunks]


def test_single_import_single_group():
    groups = collect_thunk_pairs(parse_pe(build_pe(SynthSpec(modules=[("a.dll", 1)]))))
    assert len(groups) == 1 and len(groups[0].pairs) == 1


def test_no_import_table():
    with pytest.raises(NoImportTable):
        collect_thunk_pairs(parse_pe(build_pe(SynthSpec(modules=[]))))


def test_bound_descriptor_refused():
    img = parse_pe(build_pe(SynthSpec(modules=[("a.dll", 3)], bound_stamp=0x5C000000)))
    with pytest.raises(BoundImportsPresent):
        collect_thunk_pairs(img)
    assert len(collect_thunk_pairs(img, allow_bound=True)[0].pairs) == 3


def test_oft_ft_mismatch_detected():
    img = ole32_only()
    desc = read_import_directory(img)[0]
    data = bytearray(img.raw)
    struct.pack_into("<I", data, img.rva_to_offset(desc.thunks[0].ft_slot_rva), desc.thunks[1].value)
    with pytest.raises(OftFtMismatch):
        collect_thunk_pairs(parse_pe(bytes(data)))


def symbol_order(image, index=0):
    return [t.symbol for t in read_import_directory(image)[index].thunks]


def test_all_non_identity_outcomes_reachable_for_ole32():
    img = ole32_only()
    groups = collect_thunk_pairs(img)
    outcomes = Counter()
    for seed in range(300):
        perm = make_permutation(groups, seed)
        out = parse_pe(apply_edits(img.raw, apply_permutation(img, perm)))
        outcomes[tuple(symbol_order(out))] += 1
    assert tuple(OLE32_SYMBOLS) not in outcomes
    assert len(outcomes) == 5
    # the rotation seen in the disassembly walk-through
    assert ("CoCreateGuid", "CoUninitialize", "CoInitialize") in outcomes
    # the order listed for the transformed descriptor
    assert ("CoCreateGuid", "CoInitialize", "CoUninitialize") in outcomes


def test_hint_name_records_stay_put():
    img = ole32_only()
    before = {t.symbol: t.payload.name_rva for t in read_import_directory(img)[0].thunks}
    perm = make_permutation(collect_thunk_pairs(img), 1)
    out = parse_pe(apply_edits(img.raw, apply_permutation(img, perm)))
    thunks = read_import_directory(out)[0].thunks
    assert [t.symbol for t in thunks] != OLE32_SYMBOLS
    assert {t.symbol: t.payload.name_rva for t in thunks} == before
    for t in thunks:
        assert t.ft_value == t.value


def test_all_singletons_nothing_to_shuffle():
    img = parse_pe(build_pe(SynthSpec(modules=[("a.dll", 1), ("b.dll", 1)])))
    with pytest.raises(NothingToShuffle):
        make_permutation(collect_thunk_pairs(img), 0)
    with pytest.raises(NothingToShuffle):
        make_permutation([], 0)


def test_permutation_deterministic_and_bijective(great):
    groups = collect_thunk_pairs(great)
    a, b = make_permutation(groups, 1234), make_permutation(groups, 1234)
    assert a == b
    assert not a.is_identity
    seen = set()
    for module, group in zip(a.per_module, groups):
        slots = {rva for _, rva in group.pairs}
        assert set(module.mapping) == slots == set(module.mapping.values())
        assert not slots & seen
        seen |= slots


def test_forced_swap_when_redraws_fail(monkeypatch):
    from breakimp import shuffler

    monkeypatch.setattr(shuffler.SplitMix64, "shuffle", lambda self, items: None)
    img = parse_pe(build_pe(SynthSpec(modules=[("a.dll", 2), ("b.dll", 3)])))
    groups = collect_thunk_pairs(img)
    perm = make_permutation(groups, 0)
    slots = [rva for _, rva in groups[1].pairs]
    assert perm.moved() == {slots[0]: slots[1], slots[1]: slots[0]}


def test_identity_permutation_yields_no_edits(great):
    groups = collect_thunk_pairs(great)
    identity = ThunkPermutation(0, [
        ModulePermutation(g.descriptor_index, g.module_name, {rva: rva for _, rva in g.pairs}) for g in groups
    ])
    assert apply_permutation(great, identity) == []
    assert patch_relocated_references(great, identity, read_reloc_directory(great)) == ([], 0)


@pytest.mark.parametrize("emit_oft,expected", [(True, 4), (False, 2)])
def test_swap_edit_count(emit_oft, expected):
    img = ole32_only(emit_oft=emit_oft)
    (g,) = collect_thunk_pairs(img)
    s = [rva for _, rva in g.pairs]
    perm = ThunkPermutation(0, [ModulePermutation(0, "ole32.dll", {s[0]: s[1], s[1]: s[0], s[2]: s[2]})])
    edits = apply_permutation(img, perm)
    assert len(edits) == expected
    assert all(len(blob) == 4 for _, blob in edits)


def test_invalid_permutation_rejected():
    img = ole32_only()
    (g,) = collect_thunk_pairs(img)
    s = [rva for _, rva in g.pairs]
    bad = ThunkPermutation(0, [ModulePermutation(0, "ole32.dll", {s[0]: s[1], s[1]: s[1], s[2]: s[2]})])
    with pytest.raises(InvalidPermutation):
        apply_permutation(img, bad)
    wrong_module = ThunkPermutation(0, [ModulePermutation(0, "user32.dll", {x: x for x in s})])
    with pytest.raises(InvalidPermutation):
        apply_permutation(img, wrong_module)


def test_relocated_operand_follows_symbol():
    img = ole32_only(shuffle_sites=False)
    (g,) = collect_thunk_pairs(img)
    s = [rva for _, rva in g.pairs]
    # rotation: CoCreateGuid -> slot 0, CoUninitialize -> slot 1, CoInitialize -> slot 2
    perm = ThunkPermutation(0, [ModulePermutation(0, "ole32.dll", {s[1]: s[0], s[2]: s[1], s[0]: s[2]})])
    edits, count = patch_relocated_references(img, perm, read_reloc_directory(img))
    assert count == 3
    out = parse_pe(apply_edits(img.raw, apply_permutation(img, perm) + edits))
    # call sites were emitted in symbol order at .text+0x10, +0x16, +0x1c
    operands = [out.read_uint(0x1012 + 6 * k, 4) - out.image_base for k in range(3)]
    assert operands == [s[2], s[0], s[1]]
    assert symbol_order(out) == ["CoCreateGuid", "CoUninitialize", "CoInitialize"]
    # each call site still reaches the symbol it was emitted for
    by_slot = {t.ft_slot_rva: t.symbol for t in read_import_directory(out)[0].thunks}
    assert by_slot[operands[0]] == "CoInitialize"
    assert by_slot[operands[1]] == "CoCreateGuid"


def test_non_slot_relocation_untouched():
    img = parse_pe(build_pe(SynthSpec(modules=[("a.dll", 4)], decoy_patterns=3)))
    perm = make_permutation(collect_thunk_pairs(img), 3)
    edits, count = patch_relocated_references(img, perm, read_reloc_directory(img))
    decoy = (img.image_base + img.sections[0].virtual_address).to_bytes(4, "little")
    assert count == len(edits) <= 4
    for off, _ in edits:
        assert img.raw[off:off + 4] != decoy


def diff_offsets(a: bytes, b: bytes) -> set[int]:
    return {i for i in range(len(a)) if a[i] != b[i]}


def test_transform_diff_regions():
    spec = SynthSpec(modules=[("kernel32.dll", ["a1", "b2", "c3", "d4"]), ("user32.dll", ["e5", "f6", "g7", "h8"])],
                     compute_checksum=True, seed=11)
    data = build_pe(spec)
    img = parse_pe(data)
    result = transform(data, 7)
    allowed = set(range(img.checksum_offset, img.checksum_offset + 4))
    for d in read_import_directory(img):
        for t in d.thunks:
            allowed |= set(range(img.rva_to_offset(t.ft_slot_rva), img.rva_to_offset(t.ft_slot_rva) + 4))
            allowed |= set(range(img.rva_to_offset(t.oft_slot_rva), img.rva_to_offset(t.oft_slot_rva) + 4))
    for block in read_reloc_directory(img):
        for target in block.targets(3):
            off = img.rva_to_offset(target)
            allowed |= set(range(off, off + 4))
    changed = diff_offsets(data, result.output)
    assert changed and changed <= allowed
    assert result.strategy_used is Strategy.RELOC_PATCH
    assert result.relocation_patches > 0


def test_transform_refuses_single_import():
    with pytest.raises(NothingToShuffle):
        transform(build_pe(SynthSpec(modules=[("a.dll", 1)])), 0)


def test_transform_deterministic(great):
    first = transform(great.raw, 7).output
    assert all(transform(great.raw, 7).output == first for _ in range(2))
    assert transform(great.raw, 8).output != first


def test_transform_preserves_import_multiset_and_slots(great):
    result = transform(great.raw, 99)
    out = parse_pe(result.output)
    before, after = read_import_directory(great), read_import_directory(out)
    assert Counter(import_keys(before)) == Counter(import_keys(after))
    for a, b in zip(before, after):
        assert [t.ft_slot_rva for t in a.thunks] == [t.ft_slot_rva for t in b.thunks]
        assert a.module_name == b.module_name


def test_transform_changes_both_digests(great):
    result = transform(great.raw, 5)
    for mode in Mode:
        assert imphash(great, mode).digest != imphash(parse_pe(result.output), mode).digest
    assert result.paper_after.digest != result.paper_before.digest


def test_duplicate_symbols_force_reseed():
    # swapping the two identical names leaves the string unchanged; transform must keep looking
    data = build_pe(SynthSpec(modules=[("a.dll", ["dup", "dup", "other"])]))
    for seed in range(20):
        result = transform(data, seed)
        assert result.imphash_after.canonical_string != result.imphash_before.canonical_string


def test_only_duplicates_cannot_change_digest():
    data = build_pe(SynthSpec(modules=[("a.dll", ["same", "same"])]))
    with pytest.raises(NothingToShuffle):
        transform(data, 0)


def test_unbind_then_transform():
    data = build_pe(SynthSpec(modules=[("a.dll", 4), ("b.dll", 2)], bound_stamp=0xFFFFFFFF))
    with pytest.raises(BoundImportsPresent):
        transform(data, 1)
    result = transform(data, 1, unbind=True)
    assert result.unbound
    out = read_import_directory(parse_pe(result.output))
    assert all(d.time_date_stamp == 0 for d in out)
    assert all(t.ft_value == t.value for d in out for t in d.thunks)
    assert result.equivalence.equivalent


def test_bound_without_oft_cannot_unbind():
    data = build_pe(SynthSpec(modules=[("a.dll", 4)], bound_stamp=1, emit_oft=False))
    with pytest.raises(BoundImportsPresent):
        transform(data, 1, unbind=True)


def test_no_checksum_option_leaves_field():
    spec = SynthSpec(modules=[("a.dll", 5)], compute_checksum=True)
    data = build_pe(spec)
    img = parse_pe(data)
    kept = transform(data, 3, recompute_checksum=False).output
    assert kept[img.checksum_offset:img.checksum_offset + 4] == data[img.checksum_offset:img.checksum_offset + 4]
    fixed = transform(data, 3, Strategy.TEXT_SCAN).output
    stored = struct.unpack_from("<I", fixed, img.checksum_offset)[0]
    # permuting aligned words keeps the folded sum, so the value need not move; it must be correct
    assert stored == compute_checksum(fixed, img.checksum_offset)


@pytest.mark.parametrize("mc", list(MachineClass))
def test_pointer_table_needs_relocations(mc):
    from breakimp.errors import NoRetargetPath

    data = build_pe(SynthSpec(machine_class=mc, modules=[("a.dll", 6)], pointer_table=True))
    result = transform(data, 4)
    assert result.strategy_used is Strategy.RELOC_PATCH
    assert result.relocation_patches > 0
    with pytest.raises(NoRetargetPath):
        transform(data, 4, Strategy.TEXT_SCAN)


def test_stripped_without_sites_has_no_path():
    from breakimp.errors import NoRetargetPath

    data = build_pe(SynthSpec(modules=[("a.dll", 3)], call_sites_per_symbol=0, emit_relocs=False,
                              set_relocs_stripped=True))
    with pytest.raises(NoRetargetPath):
        transform(data, 0)


def test_result_json_shape(great):
    doc = transform(great.raw, 7).to_json()
    assert doc["seed"] == 7
    assert doc["strategy"] == "reloc"
    assert doc["imphash_before"]["digest"] != doc["imphash_after"]["digest"]
    assert doc["equivalent"] is True
    assert len(doc["permutation"]["modules"]) == 2


def _drop_relocation(image, target_rva: int) -> bytes:
    """Turn the relocation entry for ``target_rva`` into padding."""
    rva, _ = image.directory(5)
    offset = image.rva_to_offset(rva)
    buf = bytearray(image.raw)
    for block in read_reloc_directory(image):
        for k, (typ, off) in enumerate(block.entries):
            if block.page_rva + off == target_rva and typ:
                struct.pack_into("<H", buf, offset + 8 + 2 * k, 0)
                return bytes(buf)
        offset += 8 + 2 * len(block.entries)
    raise AssertionError("no such relocation")


def test_absolute_site_missing_relocation_refused(great):
    from breakimp.errors import NoRetargetPath
    from breakimp.retarget import scan_iat_references

    slots = {t.ft_slot_rva for d in read_import_directory(great) for t in d.thunks}
    site = scan_iat_references(great, slots)[0]
    damaged = _drop_relocation(great, great.offset_to_rva(site.operand_offset))
    with pytest.raises(NoRetargetPath):
        transform(damaged, 7)


def test_reference_to_terminator_refused():
    from breakimp.errors import NoRetargetPath
    from breakimp.retarget import scan_iat_references

    image = parse_pe(build_pe(great_exe_spec(emit_relocs=False, set_relocs_stripped=True)))
    first = read_import_directory(image)[0]
    terminator = first.ft_rva + 4 * len(first.thunks)
    site = scan_iat_references(image, {first.ft_rva})[0]
    data = bytearray(image.raw)
    struct.pack_into("<I", data, site.operand_offset, image.image_base + terminator)
    with pytest.raises(NoRetargetPath, match="no slot"):
        transform(bytes(data), 7)
